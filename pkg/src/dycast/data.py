"""Datasets: CSV ingestion, z-score / low-pass preprocessing, synthetic ground truth."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import substream
from .graph import CausalGraph, Edge


class DataError(ValueError):
    """Malformed or degenerate input data."""


@dataclass
class Dataset:
    names: list[str]
    values: np.ndarray  # (N, T)
    truth: CausalGraph | None = None
    meta: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("dataset values must be an N x T matrix")
        if len(self.names) != self.values.shape[0]:
            raise DataError(
                f"{len(self.names)} names for {self.values.shape[0]} series"
            )
        seen = set()
        for nm in self.names:
            if nm in seen:
                raise DataError(f"duplicate series name {nm!r}")
            seen.add(nm)

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(list(self.names), values, self.truth, self.meta)


def zscore_normalize(X, names: Sequence[str] | None = None):
    """Standardise each row with its mean and population std.

    Returns ``(X', means, stds)``.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=1)
    std = X.std(axis=1)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        i = int(bad[0])
        label = names[i] if names is not None else f"#{i}"
        raise DataError(f"series {label} is constant; cannot z-score")
    return (X - mean[:, None]) / std[:, None], mean, std


def lowpass_filter(X, window: int = 3) -> np.ndarray:
    """Causal trailing moving average; early steps average what is available."""
    if window < 1 or window % 2 == 0:
        raise DataError(f"low-pass window must be a positive odd integer, got {window}")
    X = np.asarray(X, dtype=np.float64)
    if window == 1:
        return X.copy()
    csum = np.cumsum(X, axis=1)
    out = np.empty_like(X)
    t = X.shape[1]
    head = min(window, t)
    out[:, :head] = csum[:, :head] / np.arange(1, head + 1)
    if t > window:
        out[:, window:] = (csum[:, window:] - csum[:, :-window]) / window
    return out


def preprocess(ds: Dataset, zscore: bool = True, lowpass_window: int = 1) -> Dataset:
    X = ds.values
    if lowpass_window > 1:
        X = lowpass_filter(X, lowpass_window)
    if zscore:
        X, _, _ = zscore_normalize(X, ds.names)
    return ds.with_values(X)


# -- CSV ---------------------------------------------------------------------


def parse_csv(text: str, source: str = "<string>") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    # trailing blank lines are tolerated
    while rows and not any(cell.strip() for cell in rows[-1]):
        rows.pop()
    if not rows:
        raise DataError(f"{source}: empty file")
    names = [h.strip() for h in rows[0]]
    n = len(names)
    if n == 0 or any(not nm for nm in names):
        raise DataError(f"{source}: header row must name every column")
    if len(set(names)) != n:
        dup = next(nm for nm in names if names.count(nm) > 1)
        raise DataError(f"{source}: duplicate series name {dup!r}")
    values = np.empty((len(rows) - 1, n))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n:
            raise DataError(f"{source}: row {r} has {len(row)} fields, expected {n}")
        for c, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{source}: non-numeric cell {cell!r} at (row {r}, col {c})"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{source}: non-finite cell {cell!r} at (row {r}, col {c})")
            values[r - 2, c - 1] = v
    if values.shape[0] < 2:
        raise DataError(f"{source}: need at least 2 time steps, got {values.shape[0]}")
    return Dataset(names, values.T.copy(), meta=f"csv:{source}")


def load_csv(path) -> Dataset:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    return parse_csv(text, str(path))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ds.names)
    for row in ds.values.T:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# -- synthetic generator -----------------------------------------------------------


@dataclass(frozen=True)
class SynthEdge:
    cause: int
    effect: int
    coefficient: float
    lag: int


@dataclass
class SynthSpec:
    n: int
    t: int
    edges: list[SynthEdge] = field(default_factory=list)
    noise_std: float = 0.1
    nonlinearity: str = "none"
    seed: int = 1111
    names: list[str] | None = None

    def __post_init__(self) -> None:
        self.edges = [e if isinstance(e, SynthEdge) else SynthEdge(*e) for e in self.edges]
        self.validate()

    def series_names(self) -> list[str]:
        return list(self.names) if self.names else [f"X{i + 1}" for i in range(self.n)]

    def validate(self) -> None:
        if self.n < 1 or self.t < 1:
            raise DataError("synthetic spec needs n >= 1 and t >= 1")
        if not self.noise_std > 0:
            raise DataError("noise_std must be > 0")
        if self.nonlinearity not in ("none", "tanh"):
            raise DataError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.names is not None and len(self.names) != self.n:
            raise DataError("names must list one entry per series")
        seen = set()
        inflow = np.zeros(self.n)
        for e in self.edges:
            if not (0 <= e.cause < self.n and 0 <= e.effect < self.n):
                raise DataError(f"edge {e} refers to a series outside 0..{self.n - 1}")
            if e.lag < 1:
                raise DataError(f"edge {e} has lag < 1")
            if (e.cause, e.effect) in seen:
                raise DataError(f"duplicate edge {e.cause}->{e.effect}")
            seen.add((e.cause, e.effect))
            inflow[e.effect] += abs(e.coefficient)
        worst = int(np.argmax(inflow)) if self.n else 0
        if self.edges and inflow[worst] > 0.95 + 1e-12:
            raise DataError(
                f"sum of |coefficient| into series {worst} is {inflow[worst]:.3f} > 0.95"
            )

    def to_dict(self) -> dict[str, Any]:
        d = {
            "n": self.n,
            "t": self.t,
            "edges": [
                {"cause": e.cause, "effect": e.effect, "coefficient": e.coefficient, "lag": e.lag}
                for e in self.edges
            ],
            "noise_std": self.noise_std,
            "nonlinearity": self.nonlinearity,
            "seed": self.seed,
        }
        if self.names:
            d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthSpec":
        try:
            edges = [
                SynthEdge(int(e["cause"]), int(e["effect"]), float(e["coefficient"]), int(e["lag"]))
                for e in d.get("edges", [])
            ]
            return cls(
                n=int(d["n"]),
                t=int(d["t"]),
                edges=edges,
                noise_std=float(d.get("noise_std", 0.1)),
                nonlinearity=d.get("nonlinearity", "none"),
                seed=int(d.get("seed", 1111)),
                names=d.get("names"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"invalid synthetic spec: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "SynthSpec":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc


def generate_synthetic(spec: SynthSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Lagged structural model with Gaussian noise and its truth graph.

    ``X[j, t] = f(sum_i beta_ij * X[i, t - d_ij]) + eps`` for ``t >= d_max``; the
    first ``d_max`` steps are pure noise.
    """
    spec.validate()
    if rng is None:
        rng = substream(spec.seed, "synth")
    X = rng.normal(0.0, spec.noise_std, size=(spec.n, spec.t))
    if spec.edges:
        d_max = max(e.lag for e in spec.edges)
        causes = np.array([e.cause for e in spec.edges])
        effects = np.array([e.effect for e in spec.edges])
        coefs = np.array([e.coefficient for e in spec.edges])
        lags = np.array([e.lag for e in spec.edges])
        targets = np.unique(effects)
        for t in range(d_max, spec.t):
            drive = np.zeros(spec.n)
            np.add.at(drive, effects, coefs * X[causes, t - lags])
            if spec.nonlinearity == "tanh":
                drive = np.tanh(drive)
            X[targets, t] += drive[targets]
    names = spec.series_names()
    truth = CausalGraph(
        nodes=names,
        edges=[Edge(names[e.cause], names[e.effect], e.lag, float(e.coefficient)) for e in spec.edges],
    )
    return Dataset(names, X, truth=truth, meta=f"synthetic:seed={spec.seed}")
