"""End-to-end orchestration: preprocess, train every target, discover the graph."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

from .config import RunConfig
from .data import Dataset, preprocess
from .discovery import TargetDiscovery, discover_graph
from .graph import CausalGraph
from .training import TrainReport, train_target


@dataclass
class PipelineResult:
    graph: CausalGraph
    reports: list[TrainReport]
    discoveries: list[TargetDiscovery]


def prepare(dataset: Dataset, config: RunConfig) -> Dataset:
    return preprocess(dataset, zscore=config.zscore, lowpass_window=config.lowpass_window)


def train_all(dataset: Dataset, config: RunConfig, jobs: int = 1) -> list[TrainReport]:
    """One network per target, ordered by target index. ``dataset`` is used as given."""
    targets = range(dataset.n_series)
    if jobs <= 1 or dataset.n_series == 1:
        return [train_target(dataset, j, config) for j in targets]
    with ProcessPoolExecutor(max_workers=min(jobs, dataset.n_series)) as pool:
        return list(pool.map(partial(train_target, dataset, config=config), targets))


def run_pipeline(dataset: Dataset, config: RunConfig, jobs: int = 1) -> PipelineResult:
    ds = prepare(dataset, config)
    reports = train_all(ds, config, jobs)
    graph, found = discover_graph(ds, reports, config)
    return PipelineResult(graph=graph, reports=reports, discoveries=found)
