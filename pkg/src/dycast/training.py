"""Full-batch Adam training of one per-target network with early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import ConfigError, RunConfig, derive_seed
from .data import Dataset
from .model import ModelParams, build_model, model_forward, predict
from .tensor import GradTape, ShapeError, Tensor, add, as_tensor, backward, l1_norm, mse, scale, take

__all__ = [
    "RunConfig",
    "TrainReport",
    "TrainingDiverged",
    "SplitError",
    "AdamState",
    "mse_l1_loss",
    "adam_step",
    "expanding_window_splits",
    "train_target",
    "score_config",
    "grid_search",
]

log = logging.getLogger("dycast.training")

REPORT_FORMAT = "dycast-train-report"
REPORT_VERSION = 1
MIN_SERIES_LENGTH = 20


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""

    def __init__(self, epoch: int, target: int | None = None):
        where = f" (target {target})" if target is not None else ""
        super().__init__(f"training diverged at epoch {epoch}{where}: loss is not finite")
        self.epoch = epoch
        self.target = target


class SplitError(ValueError):
    """Series too short for the expanding-window protocol."""


def _is_kernel(name: str) -> bool:
    return name.endswith(".kernels")


def _is_mask(name: str) -> bool:
    return name == "channel_alpha" or ".attn_proj_" in name


def mse_l1_loss(pred, target, params: ModelParams, lambda_k: float, lambda_m: float) -> Tensor:
    """Mean squared error plus L1 penalties on kernels and on the attention parameters.

    ``lambda_m`` covers the channel logits and every attention projection.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.ndim != 1 or pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} must be equal-length vectors")
    terms = [mse(pred, target)]
    arrays = params.arrays()
    if lambda_k:
        terms += [scale(l1_norm(v), lambda_k) for k, v in arrays.items() if _is_kernel(k)]
    if lambda_m:
        terms += [scale(l1_norm(v), lambda_m) for k, v in arrays.items() if _is_mask(k)]
    return terms[0] if len(terms) == 1 else add(*terms)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if state.m[k].shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"adam: shape mismatch for {k}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(step=step, m=new_m, v=new_v)


def expanding_window_splits(T: int, folds: int = 5) -> list[tuple[range, range]]:
    """Fold ``i`` trains on the first ``60 + 5i`` percent and tests on the next 10 percent."""
    if T < MIN_SERIES_LENGTH:
        raise SplitError(f"need T >= {MIN_SERIES_LENGTH} for expanding-window splits, got T={T}")
    if not 1 <= folds <= 5:
        raise SplitError("folds must be between 1 and 5")
    test_len = (T * 10) // 100
    out = []
    for i in range(folds):
        end = (T * (60 + 5 * i)) // 100  # integer arithmetic avoids float floor surprises
        out.append((range(0, end), range(end, end + test_len)))
    return out


@dataclass
class TrainReport:
    target: int
    target_name: str
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    init_loss: float
    init_test_loss: float
    epochs_run: int
    stopped_early: bool
    train_window: tuple[int, int]
    test_window: tuple[int, int]
    params: ModelParams
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch]

    def to_dict(self) -> dict[str, Any]:
        # wall-clock stays out of the document so reruns serialise identically
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "target": self.target,
            "target_name": self.target_name,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "init_loss": self.init_loss,
            "init_test_loss": self.init_test_loss,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "train_window": list(self.train_window),
            "test_window": list(self.test_window),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise ValueError("not a version-1 training report")
        return cls(
            target=int(d["target"]),
            target_name=str(d["target_name"]),
            train_losses=[float(x) for x in d["train_losses"]],
            val_losses=[float(x) for x in d["val_losses"]],
            best_epoch=int(d["best_epoch"]),
            init_loss=float(d["init_loss"]),
            init_test_loss=float(d["init_test_loss"]),
            epochs_run=int(d["epochs_run"]),
            stopped_early=bool(d["stopped_early"]),
            train_window=tuple(d["train_window"]),
            test_window=tuple(d["test_window"]),
            params=ModelParams.from_dict(d["params"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls.from_dict(json.loads(text))


def _check_target(dataset: Dataset, j: int) -> None:
    if dataset.n_series < 2:
        raise ConfigError("need at least two series")
    if dataset.length < MIN_SERIES_LENGTH:
        raise SplitError(f"need T >= {MIN_SERIES_LENGTH}, got T={dataset.length}")
    if not 0 <= j < dataset.n_series:
        raise IndexError(f"target index {j} out of range for {dataset.n_series} series")


def train_target(dataset: Dataset, j: int, config: RunConfig) -> TrainReport:
    """Train the network predicting series ``j`` on the configured fold.

    The last 10% of the training window is held out for early stopping; the
    returned parameters are those of the best validation epoch. Patience is
    only enforced once ``config.warmup_epochs`` epochs have run. The fit loss
    skips the first receptive-field positions.
    """
    _check_target(dataset, j)
    X = dataset.values
    train_rng, test_rng = expanding_window_splits(dataset.length, config.folds)[config.fold]
    t_end, test_end = train_rng.stop, test_rng.stop

    Xw = X[:, :t_end]
    y = X[j, 1:t_end]
    n_val = max(1, len(y) // 10)
    n_fit = len(y) - n_val
    if n_fit < 1:
        raise SplitError(f"training window of {t_end} steps is too short")
    # predictions made before the receptive field is filled see zero padding
    burn_in = min(config.receptive_field(), n_fit - 1)
    y_fit, y_val = y[burn_in:n_fit], y[n_fit:]

    params = build_model(config, dataset.n_series, derive_seed(config.seed, "init", j))
    y_test = X[j, t_end:test_end]
    init_test_loss = float(np.mean((predict(X[:, :test_end], params)[t_end - 1 :] - y_test) ** 2))

    names = list(params.arrays())
    values = {k: np.array(v, dtype=np.float64) for k, v in params.arrays().items()}
    state = AdamState.zeros_like(values)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_epoch, best_val, best_values = 0, math.inf, values
    stopped_early = False
    started = time.perf_counter()

    for epoch in range(config.epochs):
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
        current = params.replace_arrays(tensors)
        try:
            with np.errstate(over="ignore", invalid="ignore"), GradTape() as tape:
                pred = model_forward(Xw, current).prediction
                fit = take(pred, slice(burn_in, n_fit))
                loss = mse_l1_loss(fit, y_fit, current, config.lambda_k, config.lambda_m)
            fit_mse = float(np.mean((pred.data[burn_in:n_fit] - y_fit) ** 2))
            val = float(np.mean((pred.data[n_fit:] - y_val) ** 2))
            if not (math.isfinite(fit_mse) and math.isfinite(val) and math.isfinite(float(loss.data))):
                raise FloatingPointError
            grads = backward(tape, loss, [tensors[k] for k in names])
        except FloatingPointError:
            raise TrainingDiverged(epoch, j) from None

        train_losses.append(fit_mse)
        val_losses.append(val)
        if val < best_val:
            best_epoch, best_val, best_values = epoch, val, values
        if epoch % config.log_interval == 0:
            log.info("target %d epoch %d train %.6f val %.6f", j, epoch, fit_mse, val)
        if epoch - best_epoch >= config.patience and epoch >= config.warmup_epochs:
            stopped_early = True
            break
        values, state = adam_step(values, dict(zip(names, grads)), state, config.learning_rate)

    return TrainReport(
        target=j,
        target_name=dataset.names[j],
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        init_loss=train_losses[0],
        init_test_loss=init_test_loss,
        epochs_run=len(train_losses),
        stopped_early=stopped_early,
        train_window=(0, t_end),
        test_window=(t_end, test_end),
        params=params.replace_arrays(best_values),
        wall_clock=time.perf_counter() - started,
    )


def score_config(dataset: Dataset, j: int, config: RunConfig) -> float:
    """Mean best-validation loss over all expanding-window folds."""
    losses = [train_target(dataset, j, config.replace(fold=i)).best_val_loss for i in range(config.folds)]
    return float(np.mean(losses))


def grid_search(dataset: Dataset, j: int, grid: Sequence[RunConfig]) -> RunConfig:
    """Config with the lowest mean validation loss; ties go to the earliest entry."""
    if not grid:
        raise ConfigError("grid search needs at least one config")
    if len(grid) == 1:
        return grid[0]
    best, best_score = grid[0], math.inf
    for cfg in grid:
        s = score_config(dataset, j, cfg)
        if s < best_score:
            best, best_score = cfg, s
    return best
