"""AdamW training with linear warmup and cosine decay, plus evaluation helpers."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, TransformerLM
from .pruning import MemLossParams, PruneBudget, budget_keep_fns, masked_eval, memory_loss
from .tasks import Batch

log = logging.getLogger(__name__)

METRICS = ("log_perplexity", "answer_accuracy", "token_accuracy")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, last_good: Path | None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 0.005
    warmup_steps: int = 1000
    lr_floor_ratio: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 0
    mem_epsilon: float | None = None
    mem_tau: float = 1.0
    eval_every: int = 500
    eval_samples: int = 256
    micro_batch_size: int | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.warmup_steps < 0 or (self.steps > 0 and self.warmup_steps > self.steps):
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.lr_floor_ratio <= 1:
            raise ValueError("lr_floor_ratio must lie in [0, 1]")

    @property
    def mem_loss(self) -> MemLossParams | None:
        if self.mem_epsilon is None:
            return None
        return MemLossParams(self.mem_epsilon, self.mem_tau)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` at ``warmup_steps``, cosine to the floor at ``steps``."""
    peak = cfg.lr
    floor = peak * cfg.lr_floor_ratio
    if cfg.warmup_steps > 0 and t < cfg.warmup_steps:
        return peak * t / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    if span <= 0:
        return peak
    frac = min(max((t - cfg.warmup_steps) / span, 0.0), 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay (decay scaled by the current lr)."""

    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            if lr != 0.0:
                p.data -= (lr * update).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"adam_m/{k}"].copy()
            self.v[k] = tensors[f"adam_v/{k}"].copy()
        self.t = t


@dataclass
class MetricsRecord:
    step: int
    train_loss: float | None = None
    eval_log_perplexity: float | None = None
    eval_accuracy: float | None = None
    mem_term: float | None = None
    lr: float | None = None
    wall_time: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items()}, sort_keys=True)


@dataclass
class TrainResult:
    model: TransformerLM
    metrics: list[MetricsRecord] = field(default_factory=list)
    optimizer: AdamW | None = None
    step: int = 0


class BatchSource:
    """Anything with ``batch(index, batch_size) -> Batch``."""

    def batch(self, index: int, batch_size: int) -> Batch:  # pragma: no cover - protocol
        raise NotImplementedError


class WindowSource(BatchSource):
    """Random corpus windows; batch ``k`` depends only on ``(seed, k)``."""

    def __init__(self, windows: Batch, seed: int = 0):
        self.windows = windows
        self.seed = seed

    def batch(self, index: int, batch_size: int) -> Batch:
        rng = np.random.default_rng([self.seed, index])
        n = len(self.windows)
        idx = rng.choice(n, batch_size, replace=batch_size > n)
        return self.windows.subset(np.sort(idx))


def _loss_terms(model: TransformerLM, part: Batch, total_scored: int, batch_size: int, mem: MemLossParams | None, pad_id: int | None):
    positions = np.nonzero(part.loss_mask)
    sel, states = model.forward(part.tokens, positions=positions)
    c = len(positions[0])
    ce = T.cross_entropy(sel, part.targets[positions]) * (c / total_scored) if c else None
    mem_term = None
    if mem is not None:
        nonpad = np.ones(part.tokens.shape, dtype=bool) if pad_id is None else part.tokens != pad_id
        mem_term = memory_loss([s.F for s in states], mem, nonpad) * (len(part) / batch_size)
    return ce, mem_term


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: BatchSource,
    eval_data: Batch | None = None,
    *,
    model: TransformerLM | None = None,
    metric: str = "log_perplexity",
    metrics_path=None,
    checkpoint_path=None,
    pad_id: int | None = 0,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    stop_fn: Callable[[MetricsRecord], bool] | None = None,
    checkpoint_meta: dict | None = None,
    dtype=np.float32,
) -> TrainResult:
    """Run ``train_config.steps`` AdamW updates and return the trained model.

    ``eval_data`` is scored every ``eval_every`` steps and at the end.  If the
    loss becomes non-finite, the last good state is written to
    ``checkpoint_path`` (when given) and :class:`TrainingDivergedError` raised.
    ``stop_fn`` may end training early after any evaluation.
    """
    cfg = train_config
    mem = cfg.mem_loss
    if mem is not None and not model_config.selective:
        raise ValueError("the memory loss needs selective attention (no F without it)")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    model = model if model is not None else TransformerLM.build(model_config, seed=cfg.seed, dtype=dtype)
    opt = optimizer if optimizer is not None else AdamW(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    result = TrainResult(model, [], opt, start_step)
    micro = cfg.micro_batch_size or cfg.batch_size
    metrics_fh = open(metrics_path, "a" if start_step else "w") if metrics_path else None
    t0 = time.time()
    last_good: dict[str, np.ndarray] | None = None

    def emit(rec: MetricsRecord) -> None:
        result.metrics.append(rec)
        if metrics_fh:
            metrics_fh.write(rec.to_json() + "\n")
            metrics_fh.flush()

    try:
        for step in range(start_step, cfg.steps):
            batch = data.batch(step, cfg.batch_size)
            total_scored = int(batch.loss_mask.sum())
            if total_scored == 0:
                raise ValueError(f"batch {step} has no scored positions")
            model.zero_grad()
            loss_val, mem_val = 0.0, 0.0
            try:
                for s in range(0, len(batch), micro):
                    part = batch.subset(slice(s, s + micro))
                    ce, mem_term = _loss_terms(model, part, total_scored, len(batch), mem, pad_id)
                    loss = ce
                    if mem_term is not None:
                        mem_val += mem_term.item()
                        # a zero-weight term would only reorder gradient sums
                        if mem.epsilon > 0:
                            loss = mem_term if loss is None else loss + mem_term
                    if loss is None:
                        continue
                    loss_val += loss.item()
                    loss.backward()
            except FloatingPointError:
                loss_val = math.nan
            if not math.isfinite(loss_val) or not _grads_finite(model):
                path = None
                if checkpoint_path and last_good is not None:
                    path = Path(checkpoint_path)
                    TransformerLM(model.config, {k: T.Tensor(v, requires_grad=True) for k, v in last_good.items()}).save(
                        path, {**(checkpoint_meta or {}), "step": step, "diverged": True, "train_config": cfg.to_dict()}
                    )
                raise TrainingDivergedError(step, path)
            if checkpoint_path:
                last_good = {k: p.data.copy() for k, p in model.params.items()}
            if cfg.clip_norm is not None:
                _clip(model, cfg.clip_norm)
            lr = lr_at(step + 1, cfg)
            opt.step(lr)
            result.step = step + 1
            done = step + 1 == cfg.steps
            if eval_data is not None and ((step + 1) % cfg.eval_every == 0 or done):
                rec = MetricsRecord(step + 1, loss_val, lr=lr, mem_term=mem_val if mem else None, wall_time=time.time() - t0)
                rec.eval_log_perplexity = evaluate(model, eval_data, "log_perplexity")
                if metric != "log_perplexity":
                    rec.eval_accuracy = evaluate(model, eval_data, metric)
                emit(rec)
                log.info("step %d loss %.4f eval %.4f acc %s", step + 1, loss_val, rec.eval_log_perplexity, rec.eval_accuracy)
                if stop_fn is not None and stop_fn(rec):
                    break
            elif eval_data is None and ((step + 1) % cfg.eval_every == 0 or done):
                emit(MetricsRecord(step + 1, loss_val, lr=lr, mem_term=mem_val if mem else None, wall_time=time.time() - t0))
    finally:
        if metrics_fh:
            metrics_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result, cfg, checkpoint_meta)
    return result


def _grads_finite(model: TransformerLM) -> bool:
    return all(p.grad is None or np.isfinite(p.grad).all() for p in model.params.values())


def _clip(model: TransformerLM, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in model.params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in model.params.values():
            if p.grad is not None:
                p.grad *= scale


def save_checkpoint(path, result: TrainResult, cfg: TrainConfig, meta: dict | None = None) -> None:
    extra = result.optimizer.state() if result.optimizer is not None else {}
    result.model.save(
        path,
        {
            **(meta or {}),
            "step": result.step,
            "adam_t": result.optimizer.t if result.optimizer else 0,
            "train_config": cfg.to_dict(),
            "seed": cfg.seed,
        },
        extra,
    )


def load_checkpoint(path) -> tuple[TransformerLM, dict, AdamW]:
    model, meta, others = TransformerLM.load(path)
    tc = meta.get("train_config", {})
    opt = AdamW(model.params, tc.get("adam_beta1", 0.9), tc.get("adam_beta2", 0.999), tc.get("adam_eps", 1e-8), tc.get("weight_decay", 0.0))
    if others:
        opt.load_state(others, meta.get("adam_t", 0))
    return model, meta, opt


# -- evaluation -------------------------------------------------------------------
def evaluate(model: TransformerLM, data: Batch, metric: str = "log_perplexity", budget: PruneBudget | None = None, batch_size: int = 32) -> float:
    """Score ``model`` on ``data``.

    ``log_perplexity`` is the mean NLL over scored positions; ``answer_accuracy``
    counts a sample as correct when the argmax is right at every scored
    position; ``token_accuracy`` is the fraction of scored positions right.
    """
    if len(data) == 0:
        raise ValueError("empty evaluation data")
    if metric == "log_perplexity":
        return masked_eval(model, data, budget, batch_size=batch_size)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    n = data.tokens.shape[1]
    keep_fns = None
    if budget is not None:
        budget.validate(model.config.layers, model.config.context_size)
        keep_fns = budget_keep_fns(budget, n)
    right_samples, right_tokens, scored = 0, 0, 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            part = data.subset(slice(s, s + batch_size))
            logits, _ = model.forward(part.tokens, keep_fns=keep_fns)
            ok = (logits.data.argmax(-1) == part.targets) | ~part.loss_mask
            right_samples += int(ok.all(axis=1).sum())
            right_tokens += int((ok & part.loss_mask).sum())
            scored += int(part.loss_mask.sum())
    if metric == "answer_accuracy":
        return right_samples / len(data)
    return right_tokens / scored


def compare_runs(
    configs: Sequence[tuple[str, ModelConfig]],
    seeds: Sequence[int],
    run: Callable[[ModelConfig, int], dict[str, float]],
    csv_path=None,
) -> list[dict]:
    """Run every (config, seed) pair and summarise final metrics per config.

    ``run(config, seed)`` returns a flat ``{metric: value}`` dict.  Each output
    row carries the per-metric mean and sample standard deviation over seeds.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for name, config in configs:
        per_seed = [run(config, s) for s in seeds]
        row: dict = {"config": name, "n_seeds": len(seeds)}
        for key in per_seed[0]:
            vals = np.array([r[key] for r in per_seed], dtype=float)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
