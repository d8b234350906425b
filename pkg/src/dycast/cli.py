"""Command-line entry point: synth, train, discover, eval, export, heatmap.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence. Logs go to standard error; artifacts go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, RunConfig
from .data import DataError, Dataset, SynthSpec, dataset_to_csv, generate_synthetic, load_csv
from .discovery import attention_heatmap, discover_graph, heatmap_csv, heatmap_pgm
from .evaluation import EvaluationError, evaluate_run, format_table
from .graph import CausalGraph, GraphFormatError, export_graph
from .model import InsufficientLengthError, ModelParams
from .pipeline import prepare, train_all
from .training import SplitError, TrainingDiverged, TrainReport

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_FORMAT = "dycast-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"

log = logging.getLogger("dycast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# -- file helpers -----------------------------------------------------------


def write_atomic(path: str | Path, data: str | bytes) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(path: str | Path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read {what} ({exc.strerror})") from exc


def _read_json(path: str | Path, what: str) -> Any:
    try:
        return json.loads(_read_text(path, what))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON in {what} ({exc})") from exc


def truth_sidecar(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".truth.json")


# -- configuration --------------------------------------------------------------

# flag dest -> RunConfig field
_CONFIG_FLAGS = {
    "seed": "seed",
    "profile": "profile",
    "epochs": "epochs",
    "lr": "learning_rate",
    "patience": "patience",
    "fold": "fold",
    "n_perm": "n_perm",
    "significance": "significance",
}


def _add_config_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    p.add_argument("--profile", help="layer profile name, e.g. table3 or table2")
    if training:
        p.add_argument("--epochs", type=int, help="maximum training epochs")
        p.add_argument("--lr", type=float, help="Adam learning rate")
        p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
        p.add_argument("--fold", type=int, help="expanding-window fold used for training")
    p.add_argument("--n-perm", dest="n_perm", type=int, help="permutations per shuffle test")
    p.add_argument("--significance", type=float, help="shuffle-test significance level s")


def resolve_config(args: argparse.Namespace, base: dict[str, Any] | None = None) -> RunConfig:
    """Profile defaults, then ``base``, then the config file, then flags."""
    values: dict[str, Any] = dict(base or {})
    if getattr(args, "config", None):
        data = _read_json(args.config, "config")
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        values.update(data)
    for dest, name in _CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    try:
        return RunConfig.from_dict(values)
    except (ConfigError, TypeError) as exc:
        where = f"{args.config}: " if getattr(args, "config", None) else ""
        raise ConfigError(f"{where}{exc}") from exc


def _load_dataset(path: str) -> Dataset:
    try:
        return load_csv(path)
    except DataError as exc:
        msg = str(exc)
        raise DataError(msg if str(path) in msg else f"{path}: {msg}") from exc


# -- checkpoints --------------------------------------------------------------


def save_checkpoints(out_dir: str | Path, names: Sequence[str], config: RunConfig, reports: Sequence[TrainReport]) -> None:
    out = Path(out_dir)
    for r in reports:
        write_atomic(out / f"target_{r.target}.model.json", r.params.to_json())
        write_atomic(out / f"target_{r.target}.report.json", r.to_json())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "names": list(names),
        "config": config.to_dict(),
    }
    write_atomic(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(ckpt: str | Path) -> dict[str, Any]:
    path = Path(ckpt) / MANIFEST
    m = _read_json(path, "checkpoint manifest")
    if not isinstance(m, dict) or m.get("format") != CHECKPOINT_FORMAT or m.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint manifest")
    return m


def load_reports(ckpt: str | Path, n: int) -> list[TrainReport]:
    out = []
    for j in range(n):
        path = Path(ckpt) / f"target_{j}.report.json"
        if not path.exists():
            raise DataError(f"{ckpt}: missing checkpoint for target {j} ({path.name})")
        try:
            out.append(TrainReport.from_json(_read_text(path, f"checkpoint for target {j}")))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed checkpoint for target {j} ({exc})") from exc
    return out


def load_models(ckpt: str | Path, n: int) -> list[ModelParams]:
    out = []
    for j in range(n):
        path = Path(ckpt) / f"target_{j}.model.json"
        if not path.exists():
            raise DataError(f"{ckpt}: missing checkpoint for target {j} ({path.name})")
        try:
            out.append(ModelParams.from_json(_read_text(path, f"model for target {j}")))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed model for target {j} ({exc})") from exc
    return out


def _graph_format(out: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    suffix = Path(out).suffix.lower().lstrip(".")
    if suffix not in ("dot", "json"):
        raise UsageError(f"cannot infer graph format from {out!r}; use --format dot|json")
    return suffix


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec)
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    ds = generate_synthetic(spec)
    write_atomic(args.out, dataset_to_csv(ds))
    sidecar = truth_sidecar(args.out)
    write_atomic(sidecar, ds.truth.to_json())
    log.info("wrote %s (%d series x %d steps) and %s", args.out, ds.n_series, ds.length, sidecar)
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    ds = prepare(_load_dataset(args.data), config)
    reports = train_all(ds, config, jobs=args.jobs)
    save_checkpoints(args.out, ds.names, config, reports)
    log.info("wrote %d checkpoints to %s", len(reports), args.out)
    return EXIT_OK


def cmd_discover(args) -> int:
    fmt = _graph_format(args.out, args.format)
    manifest = load_manifest(args.ckpt)
    config = resolve_config(args, manifest["config"])
    ds = prepare(_load_dataset(args.data), config)
    if list(ds.names) != list(manifest["names"]):
        raise DataError(f"{args.data}: series names do not match checkpoint {args.ckpt}")
    reports = load_reports(args.ckpt, ds.n_series)
    graph, _ = discover_graph(ds, reports, config)
    write_atomic(args.out, export_graph(graph, fmt))
    log.info("wrote %s with %d edges", args.out, len(graph.edges))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = resolve_config(args)
    ds = _load_dataset(args.data)
    truth_path = args.truth or truth_sidecar(args.data)
    try:
        truth = CausalGraph.from_json(_read_text(truth_path, "truth graph"))
    except GraphFormatError as exc:
        raise DataError(f"{truth_path}: {exc}") from exc
    ds = Dataset(ds.names, ds.values, truth=truth, meta=ds.meta)
    report = evaluate_run(ds, config, jobs=args.jobs, strict_delay=args.strict_delay)
    write_atomic(args.out, report.to_json())
    sys.stdout.write(format_table([(Path(args.data).stem, report)]))
    return EXIT_OK


def cmd_export(args) -> int:
    fmt = _graph_format(args.out, args.format)
    try:
        graph = CausalGraph.from_json(_read_text(args.graph, "graph"))
    except GraphFormatError as exc:
        raise DataError(f"{args.graph}: {exc}") from exc
    write_atomic(args.out, export_graph(graph, fmt))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    manifest = load_manifest(args.ckpt)
    names = manifest["names"]
    matrix = attention_heatmap(load_models(args.ckpt, len(names)))
    suffix = args.format or Path(args.out).suffix.lower().lstrip(".")
    if suffix == "csv":
        write_atomic(args.out, heatmap_csv(matrix, names))
    elif suffix == "pgm":
        write_atomic(args.out, heatmap_pgm(matrix))
    else:
        raise UsageError(f"cannot infer heatmap format from {args.out!r}; use --format csv|pgm")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dycast", description="Temporal causal discovery with dilated-conv / sparse-attention networks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset with a truth graph")
    p.add_argument("--spec", required=True, metavar="PATH", help="synthetic spec (JSON)")
    p.add_argument("--out", required=True, metavar="PATH", help="output CSV; truth graph goes to <stem>.truth.json")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network per target series")
    p.add_argument("--data", required=True, metavar="PATH", help="input CSV")
    p.add_argument("--out", required=True, metavar="DIR", help="checkpoint directory")
    _add_config_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes (default 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="build the causal graph from checkpoints")
    p.add_argument("--ckpt", required=True, metavar="DIR", help="checkpoint directory from 'train'")
    p.add_argument("--data", required=True, metavar="PATH", help="the CSV used for training")
    p.add_argument("--out", required=True, metavar="PATH", help="graph file (.dot or .json)")
    p.add_argument("--format", choices=("dot", "json"), help="output format (default: from --out suffix)")
    _add_config_flags(p, training=False)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("eval", help="train, discover and score against a truth graph")
    p.add_argument("--data", required=True, metavar="PATH", help="input CSV")
    p.add_argument("--truth", metavar="PATH", help="truth graph JSON (default: <stem>.truth.json)")
    p.add_argument("--out", required=True, metavar="PATH", help="evaluation report (JSON)")
    p.add_argument("--strict-delay", action="store_true", help="count an edge only if its delay is within one step")
    _add_config_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes (default 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="convert a graph JSON document to DOT or JSON")
    p.add_argument("--graph", required=True, metavar="PATH", help="graph JSON")
    p.add_argument("--out", required=True, metavar="PATH", help="output file")
    p.add_argument("--format", choices=("dot", "json"), help="output format (default: from --out suffix)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("heatmap", help="write the target-by-source channel-weight matrix")
    p.add_argument("--ckpt", required=True, metavar="DIR", help="checkpoint directory from 'train'")
    p.add_argument("--out", required=True, metavar="PATH", help="output file (.csv or .pgm)")
    p.add_argument("--format", choices=("csv", "pgm"), help="output format (default: from --out suffix)")
    p.set_defaults(func=cmd_heatmap)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dycast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"dycast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, GraphFormatError, EvaluationError, SplitError, InsufficientLengthError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dycast {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
