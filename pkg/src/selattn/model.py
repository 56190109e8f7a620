"""Decoder-only transformer parameterised by a single width knob ``d``.

``d_model = 64 d`` and ``n_heads = n_layers = d``.  Blocks are pre-norm
(RMSNorm), bias-free, with RMS-normalised queries/keys, SwiGLU feed-forward
and learned absolute positions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, SelectionState, selective_attention, split_heads
from .tensor import Tensor

CONFIG_FILE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 3
    context_size: int = 512
    vocab_size: int = 8000
    selective: bool = False
    selection_source: str = "head_zero"
    shift_future: bool = True
    constrain_relu: bool = True
    protect_bos: bool = True
    protect_self: bool = True
    qk_norm: bool = True
    # explicit overrides; None means "derive from d"
    n_layers: int | None = None
    n_heads: int | None = None
    d_model: int | None = None
    ffn_hidden: int | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.context_size < 1:
            raise ValueError("context_size must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.model_dim % self.heads:
            raise ValueError(f"d_model={self.model_dim} is not divisible by n_heads={self.heads}")
        # validates selection_source
        self.attention  # noqa: B018

    @property
    def layers(self) -> int:
        return self.n_layers if self.n_layers is not None else self.d

    @property
    def heads(self) -> int:
        return self.n_heads if self.n_heads is not None else self.d

    @property
    def model_dim(self) -> int:
        return self.d_model if self.d_model is not None else 64 * self.d

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        # int(8 D / 3): the width that reproduces the per-layer growth of the reference parameter table
        return self.ffn_hidden if self.ffn_hidden is not None else (8 * self.model_dim) // 3

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            n_heads=self.heads,
            d_head=self.head_dim,
            selective=self.selective,
            selection_source=self.selection_source,
            shift_future=self.shift_future,
            constrain_relu=self.constrain_relu,
            protect_bos=self.protect_bos,
            protect_self=self.protect_self,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order fixes initialisation."""
    D, H, dh, Fh = config.model_dim, config.heads, config.head_dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, D),
        "pos_emb": (config.context_size, D),
    }
    for l in range(config.layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (D,)
        shapes[p + "wq"] = (D, D)
        shapes[p + "wk"] = (D, D)
        shapes[p + "wv"] = (D, D)
        if config.qk_norm:
            shapes[p + "q_norm"] = (H, 1, dh)
            shapes[p + "k_norm"] = (H, 1, dh)
        if config.selective and config.selection_source == "separate_bilinear":
            shapes[p + "sel_wq"] = (D, dh)
            shapes[p + "sel_wk"] = (D, dh)
        shapes[p + "wo"] = (D, D)
        shapes[p + "ffn_norm"] = (D,)
        shapes[p + "w_gate"] = (D, Fh)
        shapes[p + "w_up"] = (D, Fh)
        shapes[p + "w_down"] = (Fh, D)
    shapes["final_norm"] = (D,)
    shapes["unembed"] = (D, config.vocab_size)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count."""
    D, V, N, L, Fh = config.model_dim, config.vocab_size, config.context_size, config.layers, config.hidden_dim
    per_layer = 4 * D * D + 3 * D * Fh + 2 * D
    if config.qk_norm:
        per_layer += 2 * D
    if config.selective and config.selection_source == "separate_bilinear":
        per_layer += 2 * D * config.head_dim
    return V * D + N * D + L * per_layer + D + D * V


class TransformerLM:
    """Parameters plus a functional forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ValueError(f"parameter set mismatch (missing={sorted(missing)}, unexpected={sorted(extra)})")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"parameter {k!r} has shape {params[k].shape}, config expects {shape}")
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "TransformerLM":
        rng = np.random.default_rng(seed)
        std = config.init_std
        resid_std = std / math.sqrt(2 * config.layers)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                data = np.ones(shape)
            elif leaf in ("wo", "w_down"):
                data = rng.normal(0.0, resid_std, shape)
            else:
                data = rng.normal(0.0, std, shape)
            params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    # -- introspection ------------------------------------------------------
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "TransformerLM":
        return TransformerLM(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- forward ------------------------------------------------------------
    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be [batch, n], got shape {tokens.shape}")
        if tokens.dtype.kind not in "iu":
            raise ValueError("tokens must be integer ids")
        n = tokens.shape[1]
        if n == 0:
            raise ValueError("empty sequence")
        if n > self.config.context_size:
            raise ValueError(f"sequence length {n} exceeds context size {self.config.context_size}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return tokens

    def forward(self, tokens, keep_fns=None, positions=None) -> tuple[Tensor, list[SelectionState]]:
        """Next-token logits ``[b, n, vocab]`` and one selection state per layer.

        ``keep_fns``, if given, holds per-layer callables mapping that layer's
        ``F`` (``[b, n, n]``) to a boolean keep mask applied before softmax.
        ``positions`` (an index tuple such as ``np.nonzero(mask)``) restricts
        the output to ``[m, vocab]`` rows at those positions.
        """
        tokens = self.check_tokens(tokens)
        cfg = self.config
        att = cfg.attention
        p = self.params
        b, n = tokens.shape
        x = T.embedding(p["tok_emb"], tokens) + T.getitem(p["pos_emb"], slice(0, n))
        states = []
        for l in range(cfg.layers):
            pre = f"layers.{l}."
            h = T.rmsnorm(x, p[pre + "attn_norm"])
            q = split_heads(T.matmul(h, p[pre + "wq"]), cfg.heads)
            k = split_heads(T.matmul(h, p[pre + "wk"]), cfg.heads)
            v = split_heads(T.matmul(h, p[pre + "wv"]), cfg.heads)
            if cfg.qk_norm:
                q = T.rmsnorm(q, p[pre + "q_norm"])
                k = T.rmsnorm(k, p[pre + "k_norm"])
            bilinear = None
            if att.selective and att.selection_source == "separate_bilinear":
                bilinear = (p[pre + "sel_wq"], p[pre + "sel_wk"])
            attn_out, state = selective_attention(
                q, k, v, att,
                w_out=p[pre + "wo"],
                x=h,
                bilinear=bilinear,
                keep_fn=None if keep_fns is None else keep_fns[l],
            )
            states.append(state)
            x = x + attn_out
            h = T.rmsnorm(x, p[pre + "ffn_norm"])
            gated = T.silu(T.matmul(h, p[pre + "w_gate"])) * T.matmul(h, p[pre + "w_up"])
            x = x + T.matmul(gated, p[pre + "w_down"])
        if positions is not None:
            # only project the requested positions: [m, D] instead of [b, n, D]
            x = T.getitem(x, positions)
        logits = T.matmul(T.rmsnorm(x, p["final_norm"]), p["unembed"])
        return logits, states

    __call__ = forward

    # -- persistence --------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None, extra_tensors: dict[str, np.ndarray] | None = None) -> None:
        meta = {"config": self.config.to_dict(), **(extra_meta or {})}
        tensors = {f"param/{k}": v for k, v in self.state_dict().items()}
        tensors.update(extra_tensors or {})
        T.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["TransformerLM", dict, dict[str, np.ndarray]]:
        tensors, meta = T.load_tensors(path)
        config = ModelConfig.from_dict(meta["config"])
        params = {}
        for name in param_shapes(config):
            key = f"param/{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            params[name] = Tensor(tensors[key], requires_grad=True, name=name)
        others = {k: v for k, v in tensors.items() if not k.startswith("param/")}
        return cls(config, params), meta, others


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps({"version": CONFIG_FILE_VERSION, "model": config.to_dict()}, indent=2, sort_keys=True))


def load_config(path) -> ModelConfig:
    data = json.loads(Path(path).read_text())
    return ModelConfig.from_dict(data.get("model", data))
