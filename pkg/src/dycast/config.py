"""Run configuration, layer profiles and seeded random substreams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Invalid hyperparameter combination."""


# Layer profiles. "table3" (default): 3 blocks, k=4, dilations 2**l, LayerNorm
# on all but the last block, RMSNorm + LayerScale on the last.
# "table2": 2 blocks, k=6, dilations 4**l.
PROFILES: dict[str, dict[str, Any]] = {
    "table3": {"kernel_size": 4, "num_blocks": 3, "dilation_base": 2},
    "table2": {"kernel_size": 6, "num_blocks": 2, "dilation_base": 4},
}

LAYERSCALE_INIT = 1e-4


@dataclass(frozen=True)
class LayerSpec:
    kernel_size: int
    dilation: int
    norm_kind: str  # "layernorm" | "rmsnorm"
    layerscale: bool
    sparsity_threshold: float


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 2000
    learning_rate: float = 0.001
    profile: str = "table3"
    kernel_size: int | None = None
    num_blocks: int | None = None
    dilation_base: int | None = None
    heads: int | None = None  # None -> one head per series
    tau_sparse: float = 0.01
    lambda_k: float = 1e-4
    lambda_m: float = 1e-4
    significance: float = 0.5
    seed: int = 1111
    patience: int = 15
    warmup_epochs: int = 100  # patience is not enforced before this epoch
    log_interval: int = 500
    norm_eps: float = 1e-5
    # training window: index into the expanding-window folds
    fold: int = 0
    folds: int = 5
    # discovery
    n_perm: int = 10
    channel_threshold: float | None = None  # None -> 1/N
    min_gain: float = 0.05
    allow_self_loops: bool = False
    delay_rule: str = "composite"
    # preprocessing
    zscore: bool = True
    lowpass_window: int = 1

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.significance <= 1.0:
            raise ConfigError("significance must lie in [0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0.0 <= self.tau_sparse < 1.0:
            raise ConfigError("tau_sparse must lie in [0, 1)")
        if self.lambda_k < 0 or self.lambda_m < 0:
            raise ConfigError("L1 multipliers must be non-negative")
        if not 0 <= self.fold < self.folds:
            raise ConfigError(f"fold must be in [0, {self.folds})")
        if self.n_perm < 1:
            raise ConfigError("n_perm must be >= 1")
        if self.delay_rule not in ("composite", "sum"):
            raise ConfigError("delay_rule must be 'composite' or 'sum'")
        if self.lowpass_window < 1 or self.lowpass_window % 2 == 0:
            raise ConfigError("lowpass_window must be a positive odd integer")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        k, L, base = self._shape()
        if k < 1 or L < 1 or base < 1:
            raise ConfigError("kernel_size, num_blocks and dilation_base must be >= 1")

    def _shape(self) -> tuple[int, int, int]:
        prof = PROFILES[self.profile]
        k = self.kernel_size if self.kernel_size is not None else prof["kernel_size"]
        L = self.num_blocks if self.num_blocks is not None else prof["num_blocks"]
        base = self.dilation_base if self.dilation_base is not None else prof["dilation_base"]
        return k, L, base

    def layers(self) -> list[LayerSpec]:
        """Per-block layout: LayerNorm blocks then a final RMSNorm + LayerScale block."""
        k, L, base = self._shape()
        out = []
        for l in range(L):
            last = l == L - 1 and L > 1
            out.append(
                LayerSpec(
                    kernel_size=k,
                    dilation=base**l,
                    norm_kind="rmsnorm" if last else "layernorm",
                    layerscale=last,
                    sparsity_threshold=self.tau_sparse,
                )
            )
        return out

    def num_heads(self, n_series: int) -> int:
        h = self.heads if self.heads is not None else n_series
        if h < 1 or n_series % h:
            raise ConfigError(f"heads={h} must divide the number of series {n_series}")
        return h

    def receptive_field(self) -> int:
        return sum((s.kernel_size - 1) * s.dilation for s in self.layers())

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        try:
            return cls.from_dict(data)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def derive_seed(root: int, stream: str, *keys: int) -> int:
    """Integer seed for a named, reproducible substream of ``root``."""
    entropy = [int(root) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    entropy.extend(int(k) for k in keys)
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def substream(root: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stream, *keys))
