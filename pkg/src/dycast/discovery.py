"""From trained per-target networks to a validated, delay-labelled causal graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig, derive_seed
from .data import Dataset
from .graph import CausalGraph, Edge
from .model import ModelParams, _raw, predict
from .tensor import _softmax_rows
from .training import TrainReport

__all__ = [
    "CandidateSet",
    "ShuffleResult",
    "TargetDiscovery",
    "channel_weights",
    "select_candidates",
    "shuffle_test",
    "estimate_delay",
    "effective_kernel",
    "receptive_field",
    "discover_target",
    "build_causal_graph",
    "discover_graph",
    "attention_heatmap",
    "heatmap_csv",
    "heatmap_pgm",
]


def channel_weights(params: ModelParams) -> np.ndarray:
    """softmax of the channel logits, exactly as applied in the forward pass."""
    return _softmax_rows(np.asarray(_raw(params.channel_alpha), dtype=np.float64))


@dataclass(frozen=True)
class CandidateSet:
    target: int
    candidates: tuple[tuple[int, float], ...]  # (channel, weight), weight descending

    @property
    def channels(self) -> list[int]:
        return [c for c, _ in self.candidates]


def select_candidates(params: ModelParams, j: int, threshold: float | None = None) -> CandidateSet:
    """Channels whose weight strictly exceeds ``threshold`` (default ``1/N``)."""
    w = channel_weights(params)
    tau = 1.0 / len(w) if threshold is None else threshold
    picked = [(c, float(w[c])) for c in range(len(w)) if w[c] > tau]
    picked.sort(key=lambda cw: (-cw[1], cw[0]))
    return CandidateSet(target=j, candidates=tuple(picked))


@dataclass(frozen=True)
class ShuffleResult:
    target: int
    channel: int
    base_loss: float
    shuffled_losses: tuple[float, ...]
    gain: float  # loss of the untrained model minus base_loss, on the same window
    init_loss: float
    significance: float
    min_gain: float
    accepted: bool

    @property
    def shuffled_mean(self) -> float:
        return float(np.mean(self.shuffled_losses))

    @property
    def delta(self) -> float:
        return self.shuffled_mean - self.base_loss

    @property
    def inconclusive(self) -> bool:
        return not self.gain > 0 or self.gain < self.min_gain * self.init_loss

    @staticmethod
    def decide(delta: float, gain: float, significance: float, init_loss: float = 0.0, min_gain: float = 0.0) -> bool:
        """Accept iff the model learned something and shuffling undoes at least ``s`` of it."""
        if not gain > 0 or gain < min_gain * init_loss:
            return False
        return delta >= significance * gain

    def redecide(self) -> bool:
        return self.decide(self.delta, self.gain, self.significance, self.init_loss, self.min_gain)


def _window_loss(X: np.ndarray, params: ModelParams, j: int, window: tuple[int, int]) -> float:
    start, stop = window
    pred = predict(X[:, :stop], params)[start - 1 :]
    return float(np.mean((pred - X[j, start:stop]) ** 2))


def shuffle_test(
    params: ModelParams,
    X: np.ndarray,
    j: int,
    c: int,
    *,
    window: tuple[int, int],
    init_loss: float,
    n_perm: int = 10,
    significance: float = 0.5,
    rng_seed: int = 0,
    min_gain: float = 0.0,
) -> ShuffleResult:
    """Permutation test of channel ``c`` for target ``j`` on the held-out ``window``.

    Channel ``c`` is permuted over every time step the window's predictions can
    see. ``init_loss`` is the untrained model's loss on the same window.
    """
    X = np.asarray(X, dtype=np.float64)
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    start, stop = window
    if not 1 <= start < stop <= X.shape[1]:
        raise ValueError(f"invalid evaluation window {window} for T={X.shape[1]}")
    base = _window_loss(X, params, j, window)
    rng = np.random.default_rng(rng_seed)
    Xp = X[:, :stop].copy()
    losses = []
    for _ in range(n_perm):
        Xp[c] = X[c, rng.permutation(stop)]
        losses.append(_window_loss(Xp, params, j, window))
    gain = init_loss - base
    delta = float(np.mean(losses)) - base
    return ShuffleResult(
        target=j,
        channel=c,
        base_loss=base,
        shuffled_losses=tuple(losses),
        gain=gain,
        init_loss=init_loss,
        significance=significance,
        min_gain=min_gain,
        accepted=ShuffleResult.decide(delta, gain, significance, init_loss, min_gain),
    )


def receptive_field(params: ModelParams) -> int:
    return params.receptive_field()


def effective_kernel(params: ModelParams, c: int) -> np.ndarray:
    """Impulse response of channel ``c`` along the convolution + skip path.

    Each block contributes its kernel plus one at the current tap (the
    residual). Entry ``i`` is the weight on lag ``i``, up to the receptive field.
    """
    h = np.zeros(params.receptive_field() + 1)
    h[0] = 1.0
    for b in params.blocks:
        w = np.array(_raw(b.kernels)[c], dtype=np.float64)
        w[-1] += 1.0
        k = len(w)
        out = np.zeros_like(h)
        for i, wi in enumerate(w):
            lag = (k - 1 - i) * b.dilation
            if lag < len(h):
                out[lag:] += wi * h[: len(h) - lag]
        h = out
    return h


def estimate_delay(params: ModelParams, c: int, rule: str = "composite", horizon: int = 0) -> int:
    """Dominant lag of channel ``c``, in steps; ties go to the smaller lag.

    ``rule="composite"`` takes the peak of :func:`effective_kernel`;
    ``rule="sum"`` adds the per-block peak offsets of the raw kernels.
    ``horizon`` is added to convert kernel offsets into input-to-target delays.
    """
    if rule == "composite":
        lag = int(np.argmax(np.abs(effective_kernel(params, c))))
    elif rule == "sum":
        lag = 0
        for b in params.blocks:
            w = np.abs(np.asarray(_raw(b.kernels)[c]))
            # reversed so the first maximum found is the one nearest the current tap
            lag += int(np.argmax(w[::-1])) * b.dilation
    else:
        raise ValueError(f"unknown delay rule {rule!r}")
    return lag + horizon


@dataclass
class TargetDiscovery:
    target: int
    candidates: CandidateSet
    tests: list[ShuffleResult] = field(default_factory=list)
    delays: dict[int, int] = field(default_factory=dict)

    def accepted(self) -> list[int]:
        return [r.channel for r in self.tests if r.accepted]


def discover_target(report: TrainReport, X: np.ndarray, config: RunConfig) -> TargetDiscovery:
    """Candidate selection, shuffle validation and delay read-out for one target."""
    j = report.target
    params = report.params
    cands = select_candidates(params, j, config.channel_threshold)
    out = TargetDiscovery(target=j, candidates=cands)
    for c in cands.channels:
        if c == j and not config.allow_self_loops:
            continue
        out.tests.append(
            shuffle_test(
                params,
                X,
                j,
                c,
                window=report.test_window,
                init_loss=report.init_test_loss,
                n_perm=config.n_perm,
                significance=config.significance,
                rng_seed=derive_seed(config.seed, "shuffle", j, c),
                min_gain=config.min_gain,
            )
        )
        # one step is added because the network predicts t+1 from inputs up to t
        out.delays[c] = estimate_delay(params, c, config.delay_rule, horizon=1)
    return out


def build_causal_graph(
    names: Sequence[str],
    results: Sequence[TargetDiscovery],
    weights: dict[int, np.ndarray],
    allow_self_loops: bool = False,
) -> CausalGraph:
    """Edge ``c -> j`` for every channel ``c`` validated for target ``j``."""
    edges = []
    for r in sorted(results, key=lambda r: r.target):
        for c in r.accepted():
            if c == r.target and not allow_self_loops:
                continue
            edges.append(Edge(names[c], names[r.target], int(r.delays[c]), float(weights[r.target][c])))
    return CausalGraph(nodes=list(names), edges=edges)


def discover_graph(
    dataset: Dataset, reports: Sequence[TrainReport], config: RunConfig
) -> tuple[CausalGraph, list[TargetDiscovery]]:
    """Run discovery over every target. ``dataset`` must already be preprocessed."""
    by_target = {r.target: r for r in reports}
    missing = [j for j in range(dataset.n_series) if j not in by_target]
    if missing:
        raise KeyError(f"no trained model for target(s) {missing}")
    results = [discover_target(by_target[j], dataset.values, config) for j in range(dataset.n_series)]
    weights = {j: channel_weights(by_target[j].params) for j in by_target}
    graph = build_causal_graph(dataset.names, results, weights, config.allow_self_loops)
    return graph, results


# -- heatmap -----------------------------------------------------------------


def attention_heatmap(params_by_target: Sequence[ModelParams]) -> np.ndarray:
    """``N x N`` matrix of channel weights: row = target, column = source."""
    return np.vstack([channel_weights(p) for p in params_by_target])


def heatmap_csv(matrix: np.ndarray, names: Sequence[str]) -> str:
    m = np.asarray(matrix, dtype=np.float64)
    lines = [",".join(names)]
    lines += [",".join(repr(float(v)) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def heatmap_pgm(matrix: np.ndarray) -> bytes:
    """Binary 8-bit greyscale image, smallest entry black, largest white."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("heatmap must be a non-empty matrix")
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        pix = np.zeros(m.shape, dtype=np.uint8)
    else:
        pix = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()
