"""Observability: policy snapshots, cumulative sampling counts, CSV and DOT exports.

CSV schemas
-----------
heat map (one file per cell kind)
    ``edge,<op_1>,...,<op_k>``; one row per DAG edge labelled ``"src,dst"``,
    softmax probabilities with 6 decimals. Rows are quantized by largest
    remainder, so the printed values of every row add up to exactly 1.
node policy table (one file per cell kind)
    ``node,combination,probability``; combinations as ``"s1,d;s2,d"``.
ledger (nodes)
    ``bucket,kind,node,combination,count``
ledger (edges)
    ``bucket,kind,edge,op,count``
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .policy import PolicySet
from .searchspace import ArchitectureSample, CellTemplate, Edge, enumerate_edge_combinations, validate_sample

Model = Union[ArchitectureSample, Mapping[str, ArchitectureSample]]


def _edge_label(edge: Edge) -> str:
    return f"{edge[0]},{edge[1]}"


def _combo_label(combo) -> str:
    return ";".join(_edge_label(e) for e in combo)


@dataclass
class KindSnapshot:
    ops: list[str]
    edges: list[str]
    probs: np.ndarray  # (edges, ops)
    node_tables: dict[int, tuple[list[str], np.ndarray]]


@dataclass
class Snapshot:
    epoch: int
    kinds: dict[str, KindSnapshot]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "kinds": {
                kind: {
                    "ops": ks.ops,
                    "edges": ks.edges,
                    "probs": ks.probs.tolist(),
                    "nodes": {str(n): {"combinations": c, "probs": p.tolist()} for n, (c, p) in ks.node_tables.items()},
                }
                for kind, ks in self.kinds.items()
            },
        }


def snapshot_policies(policies: PolicySet, epoch: int) -> Snapshot:
    kinds = {}
    for kind, t in policies.templates.items():
        edges = list(policies.edge_slices[kind])
        probs = np.array([policies.edge_probs(kind, e) for e in edges]).reshape(len(edges), len(t.op_set))
        nodes = {
            node: ([_combo_label(c) for c in combos], policies.node_probs(kind, node))
            for node, combos in policies.combos[kind].items()
        }
        kinds[kind] = KindSnapshot(list(t.op_set), [_edge_label(e) for e in edges], probs, nodes)
    return Snapshot(epoch, kinds)


def quantize_row(probs, places: int = 6) -> list[str]:
    """Fixed-point strings for a probability row whose printed digits sum to 1."""
    unit = 10**places
    scaled = np.asarray(probs, dtype=float) * unit
    q = np.floor(scaled).astype(np.int64)
    deficit = int(np.clip(unit - q.sum(), 0, len(q)))
    # stable sort: equal remainders go to the earlier column
    for i in np.argsort(-(scaled - q), kind="stable")[:deficit]:
        q[i] += 1
    return [f"{v // unit}.{v % unit:0{places}d}" for v in q]


def export_heatmap_csv(snapshot: Snapshot) -> dict[str, str]:
    out = {}
    for kind, ks in snapshot.kinds.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge"] + ks.ops)
        for label, row in zip(ks.edges, ks.probs):
            w.writerow([label] + quantize_row(row))
        out[kind] = buf.getvalue()
    return out


def parse_heatmap_csv(text: str) -> tuple[list[str], list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    ops = rows[0][1:]
    edges = [r[0] for r in rows[1:]]
    return ops, edges, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def export_node_csv(snapshot: Snapshot) -> dict[str, str]:
    out = {}
    for kind, ks in snapshot.kinds.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "combination", "probability"])
        for node, (combos, probs) in ks.node_tables.items():
            for c, p in zip(combos, quantize_row(probs)):
                w.writerow([node, c, p])
        out[kind] = buf.getvalue()
    return out


class LedgerError(ValueError):
    pass


@dataclass
class SampleLedger:
    """Sampling counts per ``bucket_width``-epoch bucket (not cumulative across buckets)."""

    templates: dict[str, CellTemplate]
    bucket_width: int = 50
    buckets: dict[int, dict[str, dict]] = field(default_factory=dict)

    def _fresh(self, kind: str) -> dict:
        t = self.templates[kind]
        return {
            "samples": 0,
            "nodes": {n: np.zeros(len(enumerate_edge_combinations(t, n)), dtype=np.int64) for n in t.searched_nodes},
            "edges": {e: np.zeros(len(t.op_set), dtype=np.int64) for e in t.edges()},
        }

    def samples(self, bucket: int, kind: str) -> int:
        return self.buckets.get(bucket, {}).get(kind, {}).get("samples", 0)

    def cumulative(self, upto_bucket: int, kind: str) -> dict:
        """Counts summed over buckets ``0..upto_bucket``."""
        acc = self._fresh(kind)
        for b, kinds in self.buckets.items():
            if b <= upto_bucket and kind in kinds:
                acc["samples"] += kinds[kind]["samples"]
                for n, c in kinds[kind]["nodes"].items():
                    acc["nodes"][n] += c
                for e, c in kinds[kind]["edges"].items():
                    acc["edges"][e] += c
        return acc

    def to_dict(self) -> dict:
        return {
            "bucket_width": self.bucket_width,
            "templates": {k: t.to_dict() for k, t in self.templates.items()},
            "buckets": {
                str(b): {
                    kind: {
                        "samples": body["samples"],
                        "nodes": {str(n): c.tolist() for n, c in body["nodes"].items()},
                        "edges": {_edge_label(e): c.tolist() for e, c in body["edges"].items()},
                    }
                    for kind, body in kinds.items()
                }
                for b, kinds in self.buckets.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleLedger":
        templates = {k: CellTemplate.from_dict(t) for k, t in d["templates"].items()}
        ledger = cls(templates, d["bucket_width"])
        for b, kinds in d["buckets"].items():
            ledger.buckets[int(b)] = {}
            for kind, body in kinds.items():
                ledger.buckets[int(b)][kind] = {
                    "samples": body["samples"],
                    "nodes": {int(n): np.array(c, dtype=np.int64) for n, c in body["nodes"].items()},
                    "edges": {
                        tuple(int(v) for v in e.split(",")): np.array(c, dtype=np.int64)
                        for e, c in body["edges"].items()
                    },
                }
        return ledger


def record_sample(ledger: SampleLedger, epoch: int, sample: Model) -> SampleLedger:
    samples = [sample] if isinstance(sample, ArchitectureSample) else list(sample.values())
    for s in samples:
        if s.kind not in ledger.templates:
            raise LedgerError(f"ledger does not track cell kind {s.kind!r}")
        t = ledger.templates[s.kind]
        verdict = validate_sample(t, s)
        if not verdict:
            raise LedgerError("invalid sample: " + "; ".join(verdict.violations))
    bucket = epoch // ledger.bucket_width
    for s in samples:
        t = ledger.templates[s.kind]
        body = ledger.buckets.setdefault(bucket, {}).setdefault(s.kind, ledger._fresh(s.kind))
        body["samples"] += 1
        for node, edges in s.structure().items():
            body["nodes"][node][enumerate_edge_combinations(t, node).index(edges)] += 1
        for edge, op in s.edges:
            body["edges"][edge][t.op_set.index(op)] += 1
    return ledger


def export_ledger_csv(ledger: SampleLedger) -> tuple[str, str]:
    nodes, edges = io.StringIO(), io.StringIO()
    wn = csv.writer(nodes, lineterminator="\n")
    we = csv.writer(edges, lineterminator="\n")
    wn.writerow(["bucket", "kind", "node", "combination", "count"])
    we.writerow(["bucket", "kind", "edge", "op", "count"])
    for bucket in sorted(ledger.buckets):
        for kind, body in sorted(ledger.buckets[bucket].items()):
            t = ledger.templates[kind]
            for node, counts in body["nodes"].items():
                for combo, c in zip(enumerate_edge_combinations(t, node), counts):
                    wn.writerow([bucket, kind, node, _combo_label(combo), int(c)])
            for edge, counts in body["edges"].items():
                for op, c in zip(t.op_set, counts):
                    we.writerow([bucket, kind, _edge_label(edge), op, int(c)])
    return nodes.getvalue(), edges.getvalue()


def _node_name(template: CellTemplate, node: int) -> str:
    if node < 2:
        return ("x_t", "h_prev")[node] if template.is_recurrent else f"c_k-{2 - node}"
    return f"n{node}"


def export_dot(sample: ArchitectureSample, template: CellTemplate) -> str:
    """Directed graph of one cell; dashed boxes mark nodes that are not searched."""
    verdict = validate_sample(template, sample)
    if not verdict:
        raise ValueError("invalid sample: " + "; ".join(verdict.violations))
    lines = [f'digraph "{template.kind}" {{', "  rankdir=LR;", '  node [shape=box];']
    for n in range(template.total_nodes):
        style = "dashed" if n < 2 or n == template.fixed_node else "solid"
        label = _node_name(template, n)
        if n == template.fixed_node:
            label += " (tanh)"
        lines.append(f'  {n} [label="{label}", style={style}];')
    if template.is_recurrent:
        lines.append(f'  0 -> {template.fixed_node} [label="add"];')
        lines.append(f'  1 -> {template.fixed_node} [label="add"];')
    for (s, d), op in sample.edges:
        lines.append(f'  {s} -> {d} [label="{op}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
