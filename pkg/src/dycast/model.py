"""Per-target network: channel weighting, dilated-conv / sparse-attention blocks, read-out.

Block computation, for an ``N x T`` input ``x``::

    c = conv1d_depthwise_causal(x, kernels, dilation)
    a = relu(layerscale(norm(c)))           # norm across channels, per time step
    y = x + c + sparse_causal_attention(a)

The convolution output joins the skip path so that lagged inputs reach the
read-out linearly; the attention branch adds non-linear context on top.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .config import LAYERSCALE_INIT, ConfigError, RunConfig
from .tensor import (
    ShapeError,
    Tensor,
    add,
    apply_op,
    as_tensor,
    conv1d_depthwise_causal,
    layernorm,
    mul_along,
    readout,
    relu,
    rmsnorm,
    softmax,
    transpose,
)

MODEL_FORMAT = "dycast-model"
MODEL_VERSION = 1


class InsufficientLengthError(ValueError):
    """The series is too short for next-step prediction."""


@dataclass
class BlockParams:
    kernels: Any  # (N, k)
    dilation: int
    norm_kind: str
    norm_gain: Any  # (N,)
    norm_bias: Any | None  # (N,) for layernorm, None for rmsnorm
    layerscale_gamma: Any | None  # (N,) or None
    attn_proj_q: Any  # (N, N)
    attn_proj_k: Any
    attn_proj_v: Any
    attn_proj_o: Any
    sparsity_threshold: float
    heads: int
    norm_eps: float = 1e-5

    @property
    def kernel_size(self) -> int:
        return int(np.shape(_raw(self.kernels))[1])


_BLOCK_ARRAYS = (
    "kernels",
    "norm_gain",
    "norm_bias",
    "layerscale_gamma",
    "attn_proj_q",
    "attn_proj_k",
    "attn_proj_v",
    "attn_proj_o",
)


@dataclass
class ModelParams:
    channel_alpha: Any  # (N,)
    blocks: list[BlockParams]
    head_weights: Any  # (N,)
    head_bias: Any  # (1,)

    @property
    def n_series(self) -> int:
        return int(np.shape(_raw(self.channel_alpha))[0])

    def arrays(self) -> dict[str, Any]:
        """Learnable arrays keyed by dotted name (absent optional fields skipped)."""
        out = {"channel_alpha": self.channel_alpha}
        for i, b in enumerate(self.blocks):
            for name in _BLOCK_ARRAYS:
                val = getattr(b, name)
                if val is not None:
                    out[f"blocks.{i}.{name}"] = val
        out["head_weights"] = self.head_weights
        out["head_bias"] = self.head_bias
        return out

    def replace_arrays(self, values: dict[str, Any]) -> "ModelParams":
        blocks = []
        for i, b in enumerate(self.blocks):
            upd = {n: values[f"blocks.{i}.{n}"] for n in _BLOCK_ARRAYS if f"blocks.{i}.{n}" in values}
            blocks.append(dataclasses.replace(b, **upd))
        return ModelParams(
            channel_alpha=values.get("channel_alpha", self.channel_alpha),
            blocks=blocks,
            head_weights=values.get("head_weights", self.head_weights),
            head_bias=values.get("head_bias", self.head_bias),
        )

    def map_arrays(self, fn: Callable[[str, Any], Any]) -> "ModelParams":
        return self.replace_arrays({k: fn(k, v) for k, v in self.arrays().items()})

    def copy(self) -> "ModelParams":
        return self.map_arrays(lambda _, v: np.array(_raw(v), dtype=np.float64, copy=True))

    def receptive_field(self) -> int:
        return sum((b.kernel_size - 1) * b.dilation for b in self.blocks)

    # -- serialisation --

    def to_dict(self) -> dict[str, Any]:
        def lst(v):
            return None if v is None else np.asarray(_raw(v), dtype=np.float64).tolist()

        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "channel_alpha": lst(self.channel_alpha),
            "blocks": [
                {
                    "kernels": lst(b.kernels),
                    "dilation": int(b.dilation),
                    "norm_kind": b.norm_kind,
                    "norm_gain": lst(b.norm_gain),
                    "norm_bias": lst(b.norm_bias),
                    "layerscale_gamma": lst(b.layerscale_gamma),
                    "attn_proj_q": lst(b.attn_proj_q),
                    "attn_proj_k": lst(b.attn_proj_k),
                    "attn_proj_v": lst(b.attn_proj_v),
                    "attn_proj_o": lst(b.attn_proj_o),
                    "sparsity_threshold": float(b.sparsity_threshold),
                    "heads": int(b.heads),
                    "norm_eps": float(b.norm_eps),
                }
                for b in self.blocks
            ],
            "head_weights": lst(self.head_weights),
            "head_bias": float(np.asarray(_raw(self.head_bias)).reshape(-1)[0]),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a model document (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")

        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        blocks = [
            BlockParams(
                kernels=arr(b["kernels"]),
                dilation=int(b["dilation"]),
                norm_kind=b["norm_kind"],
                norm_gain=arr(b["norm_gain"]),
                norm_bias=arr(b["norm_bias"]),
                layerscale_gamma=arr(b["layerscale_gamma"]),
                attn_proj_q=arr(b["attn_proj_q"]),
                attn_proj_k=arr(b["attn_proj_k"]),
                attn_proj_v=arr(b["attn_proj_v"]),
                attn_proj_o=arr(b["attn_proj_o"]),
                sparsity_threshold=float(b["sparsity_threshold"]),
                heads=int(b["heads"]),
                norm_eps=float(b.get("norm_eps", 1e-5)),
            )
            for b in d["blocks"]
        ]
        return cls(
            channel_alpha=arr(d["channel_alpha"]),
            blocks=blocks,
            head_weights=arr(d["head_weights"]),
            head_bias=np.array([float(d["head_bias"])]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


def _raw(v):
    return v.data if isinstance(v, Tensor) else v


@dataclass
class AttentionRecord:
    block: int
    matrices: np.ndarray  # (heads, T, T), after pruning


@dataclass
class ForwardResult:
    prediction: Tensor  # (T-1,)
    attention: list[AttentionRecord]
    channel_weights: np.ndarray  # softmax(alpha)


def build_model(config: RunConfig, n_series: int, rng_seed: int) -> ModelParams:
    """Fresh parameters for one target network, deterministic in ``rng_seed``."""
    if n_series < 2:
        raise ConfigError("need at least two series")
    rng = np.random.default_rng(rng_seed)
    n = n_series
    heads = config.num_heads(n)
    proj_bound = math.sqrt(1.0 / n)
    blocks = []
    for spec in config.layers():
        k = spec.kernel_size
        kernels = rng.uniform(-math.sqrt(1.0 / k), math.sqrt(1.0 / k), size=(n, k))
        q, kk, v, o = (rng.uniform(-proj_bound, proj_bound, size=(n, n)) for _ in range(4))
        blocks.append(
            BlockParams(
                kernels=kernels,
                dilation=spec.dilation,
                norm_kind=spec.norm_kind,
                norm_gain=np.ones(n),
                norm_bias=np.zeros(n) if spec.norm_kind == "layernorm" else None,
                layerscale_gamma=np.full(n, LAYERSCALE_INIT) if spec.layerscale else None,
                attn_proj_q=q,
                attn_proj_k=kk,
                attn_proj_v=v,
                attn_proj_o=o,
                sparsity_threshold=spec.sparsity_threshold,
                heads=heads,
                norm_eps=config.norm_eps,
            )
        )
    return ModelParams(
        channel_alpha=np.zeros(n),
        blocks=blocks,
        head_weights=np.zeros(n),
        head_bias=np.zeros(1),
    )


def channel_attention_apply(X, alpha) -> tuple[Tensor, np.ndarray]:
    """Scale each row of ``X`` by ``softmax(alpha)``; returns the weights too."""
    X, alpha = as_tensor(X), as_tensor(alpha)
    if X.data.ndim != 2 or alpha.shape != (X.shape[0],):
        raise ShapeError(f"channel weights {alpha.shape} do not match input {X.shape}")
    w = softmax(alpha)
    return mul_along(X, w, axis=0), w.data.copy()


@functools.lru_cache(maxsize=16)
def _causal_mask(t: int) -> np.ndarray:
    m = np.tril(np.ones((t, t), dtype=bool))
    m.flags.writeable = False
    return m


@functools.lru_cache(maxsize=16)
def _causal_bias(t: int) -> np.ndarray:
    """0 on and below the diagonal, -inf above: added to scores before softmax."""
    b = np.where(_causal_mask(t), 0.0, -np.inf)
    b.flags.writeable = False
    return b


def sparse_causal_attention(features, proj_q, proj_k, proj_v, proj_o, heads: int, tau: float):
    """Multi-head causal self-attention over time positions with hard pruning.

    ``features`` is ``T x N`` (tokens are time steps, embedding size N). Softmax
    weights below ``tau`` are set to zero without renormalisation; the pruning
    mask is held constant for gradients. Returns the ``T x N`` output and the
    pruned ``(heads, T, T)`` attention matrices.
    """
    F = as_tensor(features)
    Wq, Wk, Wv, Wo = (as_tensor(p) for p in (proj_q, proj_k, proj_v, proj_o))
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"sparsity threshold must lie in [0, 1), got {tau}")
    if F.data.ndim != 2:
        raise ShapeError("attention features must be T x N")
    t, n = F.shape
    for W in (Wq, Wk, Wv, Wo):
        if W.shape != (n, n):
            raise ShapeError(f"projection shape {W.shape} != ({n}, {n})")
    if heads < 1 or n % heads:
        raise ConfigError(f"heads={heads} must divide embedding size {n}")
    dh = n // heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    f = F.data
    q, k, v = f @ Wq.data, f @ Wk.data, f @ Wv.data

    def split(m):  # (T, N) -> (H, T, dh)
        return m.reshape(t, heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    s = np.matmul(qh, kh.transpose(0, 2, 1))
    if dh > 1:
        s *= inv_sqrt
    s += _causal_bias(t)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    A = s
    if tau > 0.0:
        keep = A >= tau
        Ap = A * keep
    else:
        keep, Ap = None, A
    oh = np.matmul(Ap, vh)
    o = oh.transpose(1, 0, 2).reshape(t, n)
    out = o @ Wo.data

    def vjp(g):
        dWo = o.T @ g
        doh = split(g @ Wo.data.T)
        dvh = np.matmul(Ap.transpose(0, 2, 1), doh)
        dA = np.matmul(doh, vh.transpose(0, 2, 1))
        if keep is not None:
            dA *= keep
        dA -= np.einsum("htu,htu->ht", dA, A)[..., None]
        dA *= A
        dS = dA
        if dh > 1:
            dS *= inv_sqrt
        dqh = np.matmul(dS, kh)
        dkh = np.matmul(dS.transpose(0, 2, 1), qh)

        def merge(m):
            return m.transpose(1, 0, 2).reshape(t, n)

        dq, dk, dv = merge(dqh), merge(dkh), merge(dvh)
        dF = dq @ Wq.data.T + dk @ Wk.data.T + dv @ Wv.data.T
        return dF, f.T @ dq, f.T @ dk, f.T @ dv, dWo

    result = apply_op(out, (F, Wq, Wk, Wv, Wo), vjp)
    return result, Ap


def dycast_block_forward(x, p: BlockParams, index: int = 0) -> tuple[Tensor, AttentionRecord]:
    x = as_tensor(x)
    c = conv1d_depthwise_causal(x, p.kernels, p.dilation)
    ct = transpose(c)  # T x N: normalise each time step across channels
    if p.norm_kind == "layernorm":
        h = layernorm(ct, p.norm_gain, p.norm_bias, p.norm_eps)
    elif p.norm_kind == "rmsnorm":
        h = rmsnorm(ct, p.norm_gain, p.norm_eps)
    else:
        raise ConfigError(f"unknown norm kind {p.norm_kind!r}")
    if p.layerscale_gamma is not None:
        h = mul_along(h, p.layerscale_gamma, axis=1)
    h = relu(h)
    att, mats = sparse_causal_attention(
        h, p.attn_proj_q, p.attn_proj_k, p.attn_proj_v, p.attn_proj_o, p.heads, p.sparsity_threshold
    )
    y = add(x, c, transpose(att))
    return y, AttentionRecord(block=index, matrices=mats)


def model_forward(X, params: ModelParams) -> ForwardResult:
    """Next-step predictions: inputs up to ``t`` give the estimate for ``t + 1``.

    Returns ``T - 1`` predictions aligned with ``X[target, 1:]``.
    """
    X = np.asarray(_raw(X), dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("model input must be N x T")
    if X.shape[1] < 2:
        raise InsufficientLengthError(f"need T >= 2 for next-step prediction, got T={X.shape[1]}")
    if X.shape[0] != params.n_series:
        raise ShapeError(f"model expects {params.n_series} series, got {X.shape[0]}")
    h, weights = channel_attention_apply(X[:, :-1], params.channel_alpha)
    records = []
    for i, b in enumerate(params.blocks):
        h, rec = dycast_block_forward(h, b, i)
        records.append(rec)
    pred = readout(h, params.head_weights, params.head_bias)
    return ForwardResult(prediction=pred, attention=records, channel_weights=weights)


def predict(X, params: ModelParams) -> np.ndarray:
    """Prediction vector without gradient recording."""
    return model_forward(X, params).prediction.data
