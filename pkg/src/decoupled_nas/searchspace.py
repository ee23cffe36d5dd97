"""Cell search spaces: DAG templates, edge combinations and exact counting.

Node numbering is shared by both cell families. Nodes ``0`` and ``1`` are the
cell inputs. For convolutional cells nodes ``2..N-1`` are searched; node ``i``
may draw from any of its ``i`` predecessors. For recurrent cells node ``2`` is
the first hidden node (sum of both inputs followed by tanh, never searched) and
hidden nodes ``3..N+1`` each pick one predecessor among the earlier hidden
nodes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import yaml

CONV_OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_sep_conv_3x3",
    "dil_sep_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
)
RECURRENT_ACTS = ("sigmoid", "tanh", "relu", "identity")

CONV_KINDS = ("conv_normal", "conv_reduction")
RECURRENT = "recurrent"
KINDS = CONV_KINDS + (RECURRENT,)

Edge = tuple[int, int]


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class CellTemplate:
    kind: str
    num_nodes: int
    op_set: tuple[str, ...]
    num_inputs: int = 2
    fan_in: int = 2
    output_aggregation: str = "channel_concat"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TemplateError(f"unknown cell kind {self.kind!r}")
        if not self.op_set:
            raise TemplateError("op_set must not be empty")
        if len(set(self.op_set)) != len(self.op_set):
            raise TemplateError("op_set contains duplicates")
        object.__setattr__(self, "op_set", tuple(self.op_set))
        if self.num_inputs != 2:
            raise TemplateError("cells have exactly two input nodes")
        if self.is_recurrent:
            if self.num_nodes < 2:
                raise TemplateError("recurrent cells need at least 2 hidden nodes")
            if self.fan_in != 1 or self.output_aggregation != "mean":
                raise TemplateError("recurrent cells use fan_in=1 and mean aggregation")
            unknown = set(self.op_set) - set(RECURRENT_ACTS)
        else:
            if self.num_nodes < 3:
                raise TemplateError("conv cells need num_nodes >= 3 (at least one non-input node)")
            if self.fan_in != 2 or self.output_aggregation != "channel_concat":
                raise TemplateError("conv cells use fan_in=2 and channel_concat aggregation")
            unknown = set(self.op_set) - set(CONV_OPS)
        if unknown:
            raise TemplateError(f"operations not valid for {self.kind}: {sorted(unknown)}")

    @property
    def is_recurrent(self) -> bool:
        return self.kind == RECURRENT

    @property
    def total_nodes(self) -> int:
        return self.num_nodes + 2 if self.is_recurrent else self.num_nodes

    @property
    def fixed_node(self) -> int | None:
        """The first hidden node of a recurrent cell, or ``None``."""
        return 2 if self.is_recurrent else None

    @property
    def searched_nodes(self) -> tuple[int, ...]:
        start = 3 if self.is_recurrent else 2
        return tuple(range(start, self.total_nodes))

    @property
    def hidden_nodes(self) -> tuple[int, ...]:
        return tuple(range(2, self.total_nodes))

    def candidate_sources(self, node: int) -> tuple[int, ...]:
        if node not in self.searched_nodes:
            raise TemplateError(f"node {node} is not a searched node of {self.kind}")
        start = 2 if self.is_recurrent else 0
        return tuple(range(start, node))

    def num_candidates(self, node: int) -> int:
        """e_i: the number of candidate incoming edges of ``node``."""
        return len(self.candidate_sources(node))

    def edges(self) -> tuple[Edge, ...]:
        """All searchable DAG edges, ordered by destination then source."""
        return tuple((s, d) for d in self.searched_nodes for s in self.candidate_sources(d))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_nodes": self.num_nodes,
            "num_inputs": self.num_inputs,
            "fan_in": self.fan_in,
            "op_set": list(self.op_set),
            "output_aggregation": self.output_aggregation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellTemplate":
        try:
            return cls(
                kind=d["kind"],
                num_nodes=int(d["num_nodes"]),
                op_set=tuple(d["op_set"]),
                num_inputs=int(d.get("num_inputs", 2)),
                fan_in=int(d.get("fan_in", 1 if d["kind"] == RECURRENT else 2)),
                output_aggregation=d.get(
                    "output_aggregation", "mean" if d["kind"] == RECURRENT else "channel_concat"
                ),
            )
        except KeyError as e:
            raise TemplateError(f"template is missing field {e.args[0]!r}") from None

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "CellTemplate":
        return cls.from_dict(yaml.safe_load(text))


def make_conv_template(num_nodes: int, op_set: Sequence[str] = CONV_OPS, kind: str = "conv_normal") -> CellTemplate:
    if kind not in CONV_KINDS:
        raise TemplateError(f"{kind!r} is not a convolutional cell kind")
    return CellTemplate(kind=kind, num_nodes=num_nodes, op_set=tuple(op_set))


def make_recurrent_template(num_hidden: int, act_set: Sequence[str] = RECURRENT_ACTS) -> CellTemplate:
    return CellTemplate(
        kind=RECURRENT,
        num_nodes=num_hidden,
        op_set=tuple(act_set),
        fan_in=1,
        output_aggregation="mean",
    )


def enumerate_edge_combinations(template: CellTemplate, node: int) -> list[tuple[Edge, ...]]:
    """Incoming edge combinations of ``node`` in lexicographic source order.

    The list index is the index into the node's policy vector.
    """
    sources = template.candidate_sources(node)
    return [
        tuple((s, node) for s in combo)
        for combo in itertools.combinations(sources, template.fan_in)
    ]


def count_structures(template: CellTemplate) -> int:
    return math.prod(math.comb(template.num_candidates(n), template.fan_in) for n in template.searched_nodes)


def count_architectures(template: CellTemplate) -> int:
    chosen_edges = template.fan_in * len(template.searched_nodes)
    return count_structures(template) * len(template.op_set) ** chosen_edges


@dataclass(frozen=True)
class ArchitectureSample:
    """One concrete cell: ``(edge, op)`` pairs ordered by destination then source."""

    kind: str
    edges: tuple[tuple[Edge, str], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "edges", tuple(((int(s), int(d)), str(op)) for (s, d), op in self.edges)
        )

    @classmethod
    def from_choices(cls, kind: str, structure: dict[int, Sequence[Edge]], ops: dict[Edge, str]):
        pairs = []
        for node in sorted(structure):
            for edge in sorted(structure[node]):
                pairs.append((edge, ops[edge]))
        return cls(kind, tuple(pairs))

    def structure(self) -> dict[int, tuple[Edge, ...]]:
        out: dict[int, list[Edge]] = {}
        for edge, _ in self.edges:
            out.setdefault(edge[1], []).append(edge)
        return {d: tuple(sorted(es)) for d, es in sorted(out.items())}

    def ops(self) -> dict[Edge, str]:
        return dict(self.edges)

    def encode(self) -> str:
        return " ".join(f"{s}>{d}:{op}" for (s, d), op in self.edges)

    @classmethod
    def decode(cls, kind: str, text: str) -> "ArchitectureSample":
        pairs = []
        for tok in text.split():
            try:
                edge, op = tok.split(":")
                s, d = edge.split(">")
                pairs.append(((int(s), int(d)), op))
            except ValueError:
                raise ValueError(f"cannot decode edge token {tok!r}") from None
        return cls(kind, tuple(pairs))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "edges": [[s, d, op] for (s, d), op in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSample":
        return cls(d["kind"], tuple(((s, t), op) for s, t, op in d["edges"]))


@dataclass
class Verdict:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_sample(template: CellTemplate, sample: ArchitectureSample) -> Verdict:
    v = Verdict()
    if sample.kind != template.kind:
        v.violations.append(f"kind mismatch: sample {sample.kind!r} vs template {template.kind!r}")
    searched = set(template.searched_nodes)
    by_node: dict[int, list[Edge]] = {}
    seen: set[Edge] = set()
    for edge, op in sample.edges:
        src, dst = edge
        if dst not in searched or src not in template.candidate_sources(dst):
            v.violations.append(f"unknown edge {src},{dst}")
        if edge in seen:
            v.violations.append(f"duplicate edge {src},{dst}")
        seen.add(edge)
        if op not in template.op_set:
            v.violations.append(f"op {op!r} on edge {src},{dst} outside op_set")
        by_node.setdefault(dst, []).append(edge)
    for node in template.searched_nodes:
        chosen = by_node.get(node, [])
        # r distinct known edges into a node always form a listed combination
        if len(chosen) != template.fan_in:
            v.violations.append(f"node {node} has {len(chosen)} incoming edges, expected {template.fan_in}")
    return v


def combination_index(template: CellTemplate, node: int, edges: Sequence[Edge]) -> int:
    return enumerate_edge_combinations(template, node).index(tuple(sorted(edges)))


def iter_architectures(template: CellTemplate) -> Iterator[ArchitectureSample]:
    """Exhaustive enumeration; only sensible for small spaces."""
    nodes = template.searched_nodes
    per_node = [enumerate_edge_combinations(template, n) for n in nodes]
    for combos in itertools.product(*per_node):
        chosen = [e for combo in combos for e in combo]
        for ops in itertools.product(template.op_set, repeat=len(chosen)):
            yield ArchitectureSample(template.kind, tuple(zip(chosen, ops)))
