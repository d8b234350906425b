"""Delay-labelled directed causal graph and its DOT / JSON renderings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

GRAPH_FORMAT = "dycast-graph"
GRAPH_VERSION = 1


class GraphFormatError(ValueError):
    """Unknown export format or malformed graph document."""


@dataclass(frozen=True)
class Edge:
    cause: str
    effect: str
    delay: int
    score: float = 0.0


@dataclass
class CausalGraph:
    nodes: list[str]
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self) -> None:
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise GraphFormatError("duplicate node names")
        pairs = set()
        for e in self.edges:
            if e.cause not in known or e.effect not in known:
                raise GraphFormatError(f"edge {e.cause}->{e.effect} uses an unknown node")
            if e.delay < 0:
                raise GraphFormatError(f"edge {e.cause}->{e.effect} has a negative delay")
            if (e.cause, e.effect) in pairs:
                raise GraphFormatError(f"edge {e.cause}->{e.effect} appears twice")
            pairs.add((e.cause, e.effect))

    def pairs(self) -> set[tuple[str, str]]:
        return {(e.cause, e.effect) for e in self.edges}

    def edge(self, cause: str, effect: str) -> Edge | None:
        for e in self.edges:
            if e.cause == cause and e.effect == effect:
                return e
        return None

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges, key=lambda e: (e.cause, e.effect))

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "nodes": list(self.nodes),
            "edges": [
                {"cause": e.cause, "effect": e.effect, "delay": int(e.delay), "score": float(e.score)}
                for e in self.sorted_edges()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CausalGraph":
        if d.get("format", GRAPH_FORMAT) != GRAPH_FORMAT:
            raise GraphFormatError(f"not a graph document (format={d.get('format')!r})")
        if d.get("version", GRAPH_VERSION) != GRAPH_VERSION:
            raise GraphFormatError(f"unsupported graph version {d.get('version')!r}")
        try:
            edges = [
                Edge(str(e["cause"]), str(e["effect"]), int(e["delay"]), float(e.get("score", 0.0)))
                for e in d.get("edges", [])
            ]
            return cls(nodes=[str(n) for n in d["nodes"]], edges=edges)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"malformed graph document: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CausalGraph":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"invalid JSON: {exc}") from exc

    def to_dot(self) -> str:
        lines = ["digraph G {"]
        lines.extend(f"{_q(n)};" for n in sorted(self.nodes))
        lines.extend(
            f'{_q(e.cause)} -> {_q(e.effect)} [label="d={int(e.delay)}"];'
            for e in self.sorted_edges()
        )
        lines.append("}")
        return "\n".join(lines) + "\n"


def _q(name: str) -> str:
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_graph(graph: CausalGraph, fmt: str) -> str:
    """Render as ``"dot"`` or ``"json"``."""
    kind = fmt.lower()
    if kind == "dot":
        return graph.to_dot()
    if kind == "json":
        return graph.to_json()
    raise GraphFormatError(f"unknown graph format {fmt!r} (expected 'dot' or 'json')")
