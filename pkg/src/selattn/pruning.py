"""Context-buffer pruning under per-layer budgets.

A token, once evicted from a layer's buffer, stays evicted.  ``selective_f``
evicts the surviving past token with the largest accumulated mask ``F``;
``window`` evicts the oldest non-BOS token; ``window_plus_first4`` keeps
positions 0-3 forever and evicts the oldest after them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tasks import Batch
from .tensor import Tensor

log = logging.getLogger(__name__)

POLICIES = ("selective_f", "window", "window_plus_first4")
POLICY_ALIASES = {"selective": "selective_f", "window+4": "window_plus_first4"}


class InfeasibleBudgetError(ValueError):
    """A budget too small to keep BOS (and the protected prefix) plus the current token."""


def normalize_policy(policy: str) -> str:
    policy = POLICY_ALIASES.get(policy, policy)
    if policy not in POLICIES:
        raise ValueError(f"unknown eviction policy {policy!r}; choose from {POLICIES}")
    return policy


def protected_prefix(policy: str) -> int:
    return 4 if normalize_policy(policy) == "window_plus_first4" else 1


def min_budget(policy: str) -> int:
    return protected_prefix(policy) + 1


@dataclass
class PruneBudget:
    K: list[int]
    policy: str = "selective_f"
    C: int = 8
    stop_log_perplexity: float | None = None
    tune_hash: str | None = None

    def __post_init__(self):
        self.policy = normalize_policy(self.policy)
        self.K = [int(k) for k in self.K]
        if self.C < 1:
            raise ValueError("C must be >= 1")

    @classmethod
    def full(cls, n_layers: int, context_size: int, **kw) -> "PruneBudget":
        return cls([context_size] * n_layers, **kw)

    def total(self) -> int:
        return int(sum(self.K))

    def memory_factor(self, context_size: int) -> float:
        """Baseline cache size ``L * N`` divided by ``sum(K)``."""
        return len(self.K) * context_size / self.total()

    def validate(self, n_layers: int, context_size: int) -> None:
        if len(self.K) != n_layers:
            raise ValueError(f"budget has {len(self.K)} layers, model has {n_layers}")
        floor = min_budget(self.policy)
        for l, k in enumerate(self.K):
            if k < floor:
                raise InfeasibleBudgetError(f"layer {l}: budget {k} < {floor} under policy {self.policy}")
            if k > context_size:
                raise ValueError(f"layer {l}: budget {k} exceeds context size {context_size}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PruneBudget":
        data = json.loads(Path(path).read_text())
        return cls(**data)


# -- eviction -------------------------------------------------------------------
def evict_sequence(F, K: int, policy: str = "selective_f") -> np.ndarray:
    """Keep mask ``[b, n, n]`` (or ``[n, n]``) for one layer.

    ``keep[i, j]`` is true when token ``j`` is still in the buffer while token
    ``i`` is processed.  Token ``i`` is appended first; if the buffer then
    exceeds ``K`` a single past token is evicted.  Ties in ``F`` go to the
    smallest index.
    """
    policy = normalize_policy(policy)
    F = np.asarray(F)
    squeeze = F.ndim == 2
    if squeeze:
        F = F[None]
    b, n, _ = F.shape
    prefix = protected_prefix(policy)
    if K < prefix + 1:
        raise InfeasibleBudgetError(f"budget {K} cannot hold the {prefix} protected token(s) plus the current one")
    keep = np.zeros((b, n, n), dtype=bool)
    alive = np.zeros((b, n), dtype=bool)
    rows = np.arange(b)
    for i in range(n):
        alive[:, i] = True
        if i + 1 > K:
            cand = alive[:, :i].copy()
            cand[:, :prefix] = False
            if policy == "selective_f":
                scores = np.where(cand, F[:, i, :i], -np.inf)
                victim = scores.argmax(axis=1)
            else:
                victim = cand.argmax(axis=1)
            alive[rows, victim] = False
        keep[:, i] = alive
    return keep[0] if squeeze else keep


def keep_masks_for(F_per_layer: Sequence[np.ndarray], budget: PruneBudget) -> np.ndarray:
    """Stack per-layer keep masks into ``[L, b, n, n]``."""
    return np.stack([evict_sequence(F, k, budget.policy) for F, k in zip(F_per_layer, budget.K)])


def budget_keep_fns(budget: PruneBudget, n: int):
    """Per-layer callables for ``TransformerLM.forward(keep_fns=...)``.

    Layers whose budget covers the whole sequence get ``None`` so the unpruned
    code path is used verbatim.
    """
    fns = []
    for k in budget.K:
        if k >= n:
            fns.append(None)
        else:
            fns.append(lambda F, k=k: evict_sequence(F, k, budget.policy))
    return fns


# -- evaluation -----------------------------------------------------------------
def masked_eval(model, data: Batch, budget: PruneBudget | None = None, batch_size: int = 32) -> float:
    """Mean log-perplexity over scored positions, optionally with pruned buffers."""
    n = data.tokens.shape[1]
    if budget is not None:
        budget.validate(model.config.layers, model.config.context_size)
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            part = data.subset(slice(s, s + batch_size))
            keep_fns = budget_keep_fns(budget, n) if budget is not None else None
            logits, _ = model.forward(part.tokens, keep_fns=keep_fns)
            c = int(part.loss_mask.sum())
            if c == 0:
                continue
            loss = T.cross_entropy(logits, part.targets, part.loss_mask).item()
            total += loss * c
            count += c
    if count == 0:
        raise ValueError("no scored positions in evaluation data")
    return total / count


# -- greedy budget search --------------------------------------------------------
@dataclass
class SearchResult:
    budget: PruneBudget
    trajectory: list[dict] = field(default_factory=list)
    warning: str | None = None


def greedy_budget_search(
    evaluate,
    n_layers: int,
    context_size: int,
    stop_log_perplexity: float,
    C: int = 8,
    policy: str = "selective_f",
    floor: int | None = None,
) -> SearchResult:
    """Shrink the layer budget whose reduction by ``C`` hurts the tune loss least.

    ``evaluate(PruneBudget) -> log-perplexity`` is called on every candidate.
    Stops (returning the last budget at or under the threshold) once the best
    candidate exceeds ``stop_log_perplexity`` or no layer can shrink further.
    Ties favour the lowest layer index.
    """
    policy = normalize_policy(policy)
    floor = max(C, 2, min_budget(policy)) if floor is None else floor
    K = [context_size] * n_layers
    current = evaluate(PruneBudget(K, policy, C))
    result = SearchResult(PruneBudget(list(K), policy, C, stop_log_perplexity))
    result.trajectory.append({"iteration": 0, "total_budget": sum(K), "K": list(K), "log_perplexity": current})
    if current > stop_log_perplexity:
        result.warning = f"unpruned tune loss {current:.6f} already above threshold {stop_log_perplexity:.6f}"
        log.warning(result.warning)
        return result
    it = 0
    while True:
        best, best_layer = math.inf, None
        for l in range(n_layers):
            if K[l] - C < floor:
                continue
            cand = list(K)
            cand[l] -= C
            val = evaluate(PruneBudget(cand, policy, C))
            if val < best:
                best, best_layer = val, l
        if best_layer is None or best > stop_log_perplexity:
            break
        K[best_layer] -= C
        it += 1
        result.trajectory.append({"iteration": it, "total_budget": sum(K), "K": list(K), "log_perplexity": best})
        log.info("iteration %d: layer %d -> %d (loss %.5f)", it, best_layer, K[best_layer], best)
    result.budget = PruneBudget(list(K), policy, C, stop_log_perplexity)
    return result


def search_model_budget(model, tune_data: Batch, stop_log_perplexity: float, C: int = 8, policy: str = "selective_f", batch_size: int = 32) -> SearchResult:
    cfg = model.config
    result = greedy_budget_search(
        lambda b: masked_eval(model, tune_data, b, batch_size=batch_size),
        cfg.layers,
        cfg.context_size,
        stop_log_perplexity,
        C=C,
        policy=policy,
    )
    result.budget.tune_hash = tune_data.digest()
    return result


def write_tradeoff_csv(trajectory: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total_budget", "per_layer_budgets", "log_perplexity"])
        for row in trajectory:
            w.writerow([row["iteration"], row["total_budget"], " ".join(map(str, row["K"])), repr(float(row["log_perplexity"]))])


# -- auxiliary memory loss -------------------------------------------------------
@dataclass(frozen=True)
class MemLossParams:
    epsilon: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def memory_requirements(F, tau: float = 1.0):
    """``M_i = i - sum_{k=1..i} min(F[i, k], tau) / tau`` for every row (``[..., n]``).

    ``F`` is clamped to ``[0, tau]`` first so ``0 <= M_i <= i`` always holds.
    Accepts a Tensor (differentiable) or an array.
    """
    is_tensor = isinstance(F, Tensor)
    Ft = F if is_tensor else Tensor(np.asarray(F, dtype=np.float64))
    n = Ft.shape[-1]
    counted = np.tril(np.ones((n, n), dtype=bool))
    counted[:, 0] = False
    # scale before clamping so each term is at most 1 exactly, whatever tau rounds to
    clipped = T.masked_fill(T.clamp(Ft * (1.0 / tau), 0.0, 1.0), ~counted, 0.0)
    kept_mass = T.sum_(clipped, axis=-1)
    M = T.sub(Tensor(np.arange(n, dtype=Ft.dtype)), kept_mass)
    return M if is_tensor else M.data


def memory_loss(F_layers: Sequence[Tensor], params: MemLossParams, nonpad_mask) -> Tensor:
    """``epsilon * sum_l max_i M^l_i / (L * n_nonpad)``, averaged over the batch.

    ``nonpad_mask`` (``[b, n]`` bool) marks real tokens; padded rows never win the max.
    """
    nonpad_mask = np.asarray(nonpad_mask, dtype=bool)
    n_nonpad = nonpad_mask.sum(axis=-1)
    if (n_nonpad < 1).any():
        raise ValueError("every sequence needs at least one non-pad token")
    L = len(F_layers)
    total = None
    for F in F_layers:
        M = memory_requirements(F, params.tau)
        M = T.masked_fill(M, ~nonpad_mask, -np.inf)
        worst = T.max_axis(M, axis=-1)
        total = worst if total is None else total + worst
    per_example = T.mul(total, Tensor((1.0 / (L * n_nonpad)).astype(total.dtype)))
    return T.mean(per_example) * params.epsilon
