"""``selattn`` command line: train, eval, prune-search and dump.

Exit codes: 0 success, 2 user error, 3 checkpoint/config/budget mismatch,
4 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import write_matrix_csv
from .model import ModelConfig, TransformerLM
from .presets import PRESETS, Preset, TaskDef, get_preset
from .pruning import InfeasibleBudgetError, PruneBudget, keep_masks_for, normalize_policy, search_model_budget, write_tradeoff_csv
from .tasks import encode
from .training import METRICS, TrainConfig, TrainingDivergedError, evaluate, load_checkpoint, train

log = logging.getLogger("selattn")

EXIT_OK, EXIT_USER, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4
SELECTION_FLAGS = {"head0": "head_zero", "bilinear": "separate_bilinear"}


class UserError(Exception):
    """Bad flags, missing files or invalid configuration."""


class MismatchError(Exception):
    """Checkpoint, config, data or budget disagree with each other."""


# -- config assembly ---------------------------------------------------------------
def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{what} file {path} is not valid JSON: {exc}") from None


def _model_overrides(args) -> dict:
    out = {}
    if getattr(args, "selective", None) is not None:
        out["selective"] = args.selective == "on"
    if getattr(args, "selection", None) is not None:
        out["selection_source"] = SELECTION_FLAGS[args.selection]
    if getattr(args, "no_shift", False):
        out["shift_future"] = False
    if getattr(args, "no_relu", False):
        out["constrain_relu"] = False
    if getattr(args, "allow_bos_mask", False):
        out["protect_bos"] = False
    if getattr(args, "allow_self_mask", False):
        out["protect_self"] = False
    if getattr(args, "d", None) is not None:
        out["d"] = args.d
    return out


def _train_overrides(args) -> dict:
    out = {}
    for flag, key in (
        ("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"), ("warmup_steps", "warmup_steps"),
        ("epsilon", "mem_epsilon"), ("tau", "mem_tau"), ("seed", "seed"), ("eval_every", "eval_every"),
        ("eval_samples", "eval_samples"), ("micro_batch_size", "micro_batch_size"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    if out.get("steps") is not None and "warmup_steps" not in out:
        out["warmup_steps"] = None  # resolved below against the preset
    return out


def resolve_run(args) -> tuple[Preset, str]:
    """Preset, then ``--config`` file sections, then individual flags."""
    if args.preset is None and args.config is None:
        raise UserError("give --preset or --config")
    preset = get_preset(args.preset) if args.preset else None
    task = preset.task if preset else None
    model = preset.model.to_dict() if preset else {}
    tcfg = preset.train.to_dict() if preset else TrainConfig().to_dict()
    metric = preset.metric if preset else None
    if args.config:
        data = _read_json(args.config, "config")
        unknown = set(data) - {"task", "model", "train", "metric"}
        if unknown:
            raise UserError(f"unknown config section(s): {sorted(unknown)}")
        if "task" in data:
            task = TaskDef.from_dict(data["task"])
        model.update(data.get("model", {}))
        tcfg.update(data.get("train", {}))
        metric = data.get("metric", metric)
    if task is None:
        raise UserError("config has no task section and no --preset was given")
    context, vocab = task.dims()
    model.setdefault("context_size", context)
    model.setdefault("vocab_size", vocab)
    model.update(_model_overrides(args))
    overrides = _train_overrides(args)
    if overrides.get("warmup_steps", 0) is None:
        overrides["warmup_steps"] = min(tcfg["warmup_steps"], overrides["steps"])
    tcfg.update(overrides)
    mcfg = ModelConfig.from_dict(model)
    if (mcfg.context_size, mcfg.vocab_size) != (context, vocab):
        raise UserError(f"model context/vocab {mcfg.context_size}/{mcfg.vocab_size} do not fit task ({context}/{vocab})")
    train_cfg = TrainConfig.from_dict(tcfg)
    if train_cfg.mem_epsilon is not None and not mcfg.selective:
        raise UserError("--epsilon (memory loss) requires --selective on")
    metric = getattr(args, "metric", None) or metric or task.default_metric
    if metric not in METRICS:
        raise UserError(f"unknown metric {metric!r}; choose from {METRICS}")
    return Preset(task, mcfg, train_cfg), metric


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load(args) -> tuple[TransformerLM, dict, TaskDef]:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    try:
        model, meta, _ = load_checkpoint(path)
    except (KeyError, ValueError) as exc:
        raise MismatchError(f"checkpoint {path} is inconsistent: {exc}") from None
    if "task" not in meta:
        raise MismatchError(f"checkpoint {path} carries no task definition")
    task = TaskDef.from_dict(meta["task"])
    if getattr(args, "config", None):
        data = _read_json(args.config, "config")
        want = {**model.config.to_dict(), **data.get("model", {})}
        if want != model.config.to_dict():
            diff = sorted(k for k in want if want[k] != model.config.to_dict().get(k))
            raise MismatchError(f"checkpoint config disagrees with {args.config} on {diff}")
    if task.dims() != (model.config.context_size, model.config.vocab_size):
        raise MismatchError("checkpoint model shape does not fit its task")
    return model, meta, task


def _load_budget(path, model: TransformerLM) -> PruneBudget:
    data = _read_json(path, "budget")
    try:
        budget = PruneBudget(**data)
    except TypeError as exc:
        raise UserError(f"malformed budget file {path}: {exc}") from None
    cfg = model.config
    if len(budget.K) != cfg.layers:
        raise MismatchError(f"budget has {len(budget.K)} layers, checkpoint has {cfg.layers}")
    try:
        budget.validate(cfg.layers, cfg.context_size)
    except InfeasibleBudgetError as exc:
        raise UserError(str(exc)) from None
    except ValueError as exc:
        raise MismatchError(str(exc)) from None
    return budget


def _data_paths(args):
    return [str(p) for p in args.data] if getattr(args, "data", None) else None


# -- commands ----------------------------------------------------------------------
def cmd_train(args) -> int:
    preset, metric = resolve_run(args)
    out = _out_dir(args)
    data_paths = _data_paths(args)
    task = preset.task
    if data_paths:
        task = TaskDef(task.kind, {**task.params, "paths": data_paths})
    snapshot = {"task": task.to_dict(), "model": preset.model.to_dict(), "train": preset.train.to_dict(), "metric": metric}
    _write_json(out / "config.json", snapshot)
    source = task.train_source(preset.train.seed)
    eval_data = task.eval_set(preset.train.eval_samples, preset.train.seed)
    try:
        result = train(
            preset.model,
            preset.train,
            source,
            eval_data,
            metric=metric,
            metrics_path=out / "metrics.jsonl",
            checkpoint_path=out / "checkpoint.npz",
            pad_id=task.pad_id,
            checkpoint_meta={"task": task.to_dict(), "metric": metric},
        )
    except TrainingDivergedError as exc:
        where = f"; last good state in {exc.last_good}" if exc.last_good else ""
        print(f"error: training diverged at step {exc.step}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    final = result.metrics[-1] if result.metrics else None
    summary = {"checkpoint": str(out / "checkpoint.npz"), "steps": result.step, "num_parameters": result.model.num_parameters()}
    if final is not None:
        summary.update(eval_log_perplexity=final.eval_log_perplexity, eval_accuracy=final.eval_accuracy)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, task = _load(args)
    metric = args.metric or meta.get("metric") or task.default_metric
    if metric not in METRICS:
        raise UserError(f"unknown metric {metric!r}; choose from {METRICS}")
    budget = _load_budget(args.budget, model) if args.budget else None
    n = args.samples or meta.get("train_config", {}).get("eval_samples", 256)
    data = task.eval_set(n, args.seed, ood=args.ood, data_paths=_data_paths(args))
    value = evaluate(model, data, metric, budget)
    record = {
        "checkpoint": str(args.checkpoint),
        "metric": metric,
        "value": value,
        "ood": bool(args.ood),
        "n_samples": len(data),
        "budget": budget.K if budget else None,
        "policy": budget.policy if budget else None,
        "memory_factor": budget.memory_factor(model.config.context_size) if budget else 1.0,
    }
    if metric != "log_perplexity":
        record["log_perplexity"] = evaluate(model, data, "log_perplexity", budget)
    else:
        record["log_perplexity"] = value
    print(f"{metric} {value:.6f}")
    if args.out:
        _write_json(_out_dir(args) / "eval.json", record)
    return EXIT_OK


def _stop_threshold(args) -> float:
    if args.stop is not None:
        return args.stop
    if args.baseline is None:
        raise UserError("give --stop VALUE or --baseline EVAL_JSON")
    data = _read_json(args.baseline, "baseline")
    base = data.get("log_perplexity", data.get("value"))
    if base is None:
        raise UserError(f"baseline file {args.baseline} has no log_perplexity")
    return float(base) + args.tolerance


def cmd_prune_search(args) -> int:
    model, meta, task = _load(args)
    policy = normalize_policy(args.policy)
    if policy == "selective_f" and not model.config.selective:
        raise MismatchError("policy 'selective' needs a checkpoint trained with selective attention")
    stop = _stop_threshold(args)
    data_paths = _data_paths(args)
    tune = task.tune_set(args.tune_samples, args.seed, data_paths)
    result = search_model_budget(model, tune, stop, C=args.C, policy=policy)
    out = _out_dir(args)
    result.budget.save(out / "budget.json")
    write_tradeoff_csv(result.trajectory, out / "tradeoff.csv")
    test = task.eval_set(args.test_samples, args.seed, data_paths=data_paths)
    summary = {
        "K": result.budget.K,
        "total_budget": result.budget.total(),
        "memory_factor": result.budget.memory_factor(model.config.context_size),
        "stop_log_perplexity": stop,
        "tune_log_perplexity": result.trajectory[-1]["log_perplexity"],
        "test_log_perplexity": evaluate(model, test, "log_perplexity", result.budget),
        "test_log_perplexity_unpruned": evaluate(model, test, "log_perplexity"),
        "warning": result.warning,
    }
    _write_json(out / "search.json", summary)
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
    print(json.dumps({k: summary[k] for k in ("K", "total_budget", "memory_factor")}))
    return EXIT_OK


def _dump_tokens(args, model: TransformerLM, task: TaskDef) -> np.ndarray:
    n_max = model.config.context_size
    if args.text is not None or args.input is not None:
        if task.kind != "lm":
            raise UserError("--text/--input only apply to byte-level language-model checkpoints")
        raw = args.text if args.text is not None else Path(args.input).read_bytes()
        from .tasks import BYTE_BOS

        ids = np.concatenate([[BYTE_BOS], encode(raw)])
        if len(ids) > n_max:
            raise UserError(f"input of {len(ids)} tokens (with BOS) exceeds context size {n_max}")
        return ids[None].astype(np.int64)
    return task.eval_set(1, args.seed, data_paths=_data_paths(args)).tokens


def cmd_dump(args) -> int:
    if args.input is not None and not Path(args.input).is_file():
        raise UserError(f"input file not found: {args.input}")
    model, meta, task = _load(args)
    cfg = model.config
    budget = _load_budget(args.budget, model) if args.budget else None
    tokens = _dump_tokens(args, model, task)
    out = _out_dir(args)
    n = tokens.shape[1]
    flags = cfg.attention.flags()
    with T.no_grad():
        _, states = model.forward(tokens)
    F = [s.F_array(n, 1) for s in states]
    for l, Fl in enumerate(F):
        write_matrix_csv(out / f"F_layer{l}.csv", {"F": Fl[0]}, {"layer": l, "n": n, **flags})
    with open(out / "last_row.csv", "w") as fh:
        fh.write(f"# n={n}\n# row={n - 1}\n")
        fh.write("layer," + ",".join(f"c{j}" for j in range(n)) + "\n")
        for l, Fl in enumerate(F):
            fh.write(f"{l}," + ",".join(repr(float(v)) for v in Fl[0, n - 1]) + "\n")
    if budget is not None:
        keep = keep_masks_for(F, budget)
        for l in range(cfg.layers):
            write_matrix_csv(
                out / f"keep_layer{l}.csv",
                {"keep": keep[l, 0].astype(np.int64)},
                {"layer": l, "K": budget.K[l], "policy": budget.policy},
            )
    if args.mean_samples and task.kind != "lm":
        data = task.eval_set(args.mean_samples, args.seed + 1)
        sums = [np.zeros((data.tokens.shape[1],) * 2) for _ in range(cfg.layers)]
        with T.no_grad():
            for s in range(0, len(data), 64):
                part = data.subset(slice(s, s + 64))
                _, st = model.forward(part.tokens)
                for l, state in enumerate(st):
                    sums[l] += state.F_array(part.tokens.shape[1], len(part)).sum(axis=0)
        for l in range(cfg.layers):
            write_matrix_csv(out / f"F_mean_layer{l}.csv", {"F_mean": sums[l] / len(data)}, {"layer": l, "samples": len(data), **flags})
    print(f"wrote dumps for {cfg.layers} layer(s) to {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------
def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--selective", choices=("on", "off"))
    p.add_argument("--selection", choices=tuple(SELECTION_FLAGS))
    p.add_argument("--no-shift", action="store_true", help="let a token's own selection row mask its own attention")
    p.add_argument("--no-relu", action="store_true", help="allow negative selection scores (boosting)")
    p.add_argument("--allow-bos-mask", action="store_true")
    p.add_argument("--allow-self-mask", action="store_true")
    p.add_argument("--d", type=int, help="override the width knob d")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selattn", description="Selective-attention transformer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON with optional task/model/train/metric sections")
    _model_flags(p)
    p.add_argument("--epsilon", type=float, help="memory-loss weight (enables the auxiliary term)")
    p.add_argument("--tau", type=float, help="memory-loss clamp")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--micro-batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-samples", type=int)
    p.add_argument("--metric", help=f"tracked metric, one of {METRICS}")
    p.add_argument("--data", nargs="+", help="corpus file(s) for the lm task")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally under a pruning budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config to check the checkpoint against")
    p.add_argument("--budget")
    p.add_argument("--metric")
    p.add_argument("--ood", action="store_true", help="use the reduced value range of the variable-assignment task")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune-search", help="greedy per-layer budget search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    stop = p.add_mutually_exclusive_group()
    stop.add_argument("--stop", type=float, help="log-perplexity threshold")
    stop.add_argument("--baseline", help="eval.json whose log_perplexity (+ --tolerance) is the threshold")
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--C", type=int, default=8)
    p.add_argument("--policy", default="selective", choices=("selective", "window", "window+4", "selective_f", "window_plus_first4"))
    p.add_argument("--tune-samples", type=int, default=64)
    p.add_argument("--test-samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune_search)

    p = sub.add_parser("dump", help="write F matrices, keep masks and last-row CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--text")
    src.add_argument("--input")
    p.add_argument("--budget")
    p.add_argument("--mean-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)
    return parser


def _limit_threads():
    value = os.environ.get("SELATTN_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UserError(f"SELATTN_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (ValueError, TypeError) as exc:
        # config dataclasses validate themselves and name the offending field
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
