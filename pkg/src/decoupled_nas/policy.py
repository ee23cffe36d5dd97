"""Policy vectors over edge combinations and operations.

All logits of a :class:`PolicySet` live in one flat vector ``logits`` so that
gradients, optimizer moments and checkpoints share one layout. Node and edge
policies are slices of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .searchspace import (
    ArchitectureSample,
    CellTemplate,
    Edge,
    enumerate_edge_combinations,
    validate_sample,
)

Model = Union[ArchitectureSample, Mapping[str, ArchitectureSample]]


class PolicyError(ValueError):
    pass


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise PolicyError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise PolicyError("softmax input must be finite")
    z = z / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


class PolicySet:
    def __init__(self, templates: Sequence[CellTemplate], temperature: float = 1.0):
        self.templates = {t.kind: t for t in templates}
        if len(self.templates) != len(templates):
            raise PolicyError("one template per cell kind")
        self.temperature = temperature
        self.node_slices: dict[str, dict[int, slice]] = {}
        self.edge_slices: dict[str, dict[Edge, slice]] = {}
        self.combos: dict[str, dict[int, list[tuple[Edge, ...]]]] = {}
        offset = 0
        for kind, t in self.templates.items():
            self.node_slices[kind], self.combos[kind] = {}, {}
            for node in t.searched_nodes:
                combos = enumerate_edge_combinations(t, node)
                self.combos[kind][node] = combos
                self.node_slices[kind][node] = slice(offset, offset + len(combos))
                offset += len(combos)
            self.edge_slices[kind] = {}
            for edge in t.edges():
                self.edge_slices[kind][edge] = slice(offset, offset + len(t.op_set))
                offset += len(t.op_set)
        self.logits = np.zeros(offset)

    @property
    def kinds(self) -> list[str]:
        return list(self.templates)

    @property
    def size(self) -> int:
        return self.logits.size

    def node_logits(self, kind: str, node: int) -> np.ndarray:
        return self.logits[self.node_slices[kind][node]]

    def edge_logits(self, kind: str, edge: Edge) -> np.ndarray:
        return self.logits[self.edge_slices[kind][edge]]

    def node_probs(self, kind: str, node: int) -> np.ndarray:
        return softmax(self.node_logits(kind, node), self.temperature)

    def edge_probs(self, kind: str, edge: Edge) -> np.ndarray:
        return softmax(self.edge_logits(kind, edge), self.temperature)

    def copy(self) -> "PolicySet":
        other = PolicySet(list(self.templates.values()), self.temperature)
        other.logits = self.logits.copy()
        return other

    def to_dict(self) -> dict:
        """Raw logits and their softmax for every node and edge policy."""
        out = {}
        for kind, t in self.templates.items():
            nodes = {}
            for node, combos in self.combos[kind].items():
                nodes[str(node)] = {
                    "combinations": [";".join(f"{s},{d}" for s, d in c) for c in combos],
                    "logits": self.node_logits(kind, node).tolist(),
                    "probs": self.node_probs(kind, node).tolist(),
                }
            edges = {}
            for edge in self.edge_slices[kind]:
                edges[f"{edge[0]},{edge[1]}"] = {
                    "logits": self.edge_logits(kind, edge).tolist(),
                    "probs": self.edge_probs(kind, edge).tolist(),
                }
            out[kind] = {"template": t.to_dict(), "ops": list(t.op_set), "nodes": nodes, "edges": edges}
        return {"temperature": self.temperature, "kinds": out}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySet":
        kinds = d["kinds"]
        ps = cls([CellTemplate.from_dict(k["template"]) for k in kinds.values()], d.get("temperature", 1.0))
        for kind, body in kinds.items():
            for node, entry in body["nodes"].items():
                ps.logits[ps.node_slices[kind][int(node)]] = entry["logits"]
            for label, entry in body["edges"].items():
                s, t = label.split(",")
                ps.logits[ps.edge_slices[kind][(int(s), int(t))]] = entry["logits"]
        return ps


def init_policy_set(templates: Sequence[CellTemplate], temperature: float = 1.0) -> PolicySet:
    return PolicySet(templates, temperature)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse CDF; one uniform per draw keeps the random stream easy to reason about
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(idx, probs.size - 1)


def sample_structure(policies: PolicySet, kind: str, rng: np.random.Generator) -> dict[int, int]:
    return {node: _draw(policies.node_probs(kind, node), rng) for node in policies.node_slices[kind]}


def structure_edges(policies: PolicySet, kind: str, structure: Mapping[int, int]) -> dict[int, tuple[Edge, ...]]:
    combos = policies.combos[kind]
    try:
        return {node: combos[node][idx] for node, idx in structure.items()}
    except (KeyError, IndexError):
        raise PolicyError(f"structure {dict(structure)} does not fit {kind} policies") from None


def sample_operations(
    policies: PolicySet, kind: str, structure: Mapping[int, int], rng: np.random.Generator
) -> dict[Edge, str]:
    """Draw an operation for each selected edge only."""
    ops = policies.templates[kind].op_set
    chosen = structure_edges(policies, kind, structure)
    out = {}
    for node in sorted(chosen):
        for edge in chosen[node]:
            out[edge] = ops[_draw(policies.edge_probs(kind, edge), rng)]
    return out


def sample_architecture(policies: PolicySet, kind: str, rng: np.random.Generator) -> ArchitectureSample:
    structure = sample_structure(policies, kind, rng)
    ops = sample_operations(policies, kind, structure, rng)
    return ArchitectureSample.from_choices(kind, structure_edges(policies, kind, structure), ops)


def sample_model(policies: PolicySet, rng: np.random.Generator) -> dict[str, ArchitectureSample]:
    """One architecture per searched cell kind."""
    return {kind: sample_architecture(policies, kind, rng) for kind in policies.kinds}


def _as_samples(sample: Model) -> list[ArchitectureSample]:
    if isinstance(sample, ArchitectureSample):
        return [sample]
    return list(sample.values())


def _factors(policies: PolicySet, sample: ArchitectureSample):
    """Yield ``(slice, chosen index)`` for every categorical factor of the sample."""
    kind = sample.kind
    if kind not in policies.templates:
        raise PolicyError(f"no policies for cell kind {kind!r}")
    t = policies.templates[kind]
    verdict = validate_sample(t, sample)
    if not verdict:
        raise PolicyError("invalid sample: " + "; ".join(verdict.violations))
    for node, edges in sample.structure().items():
        yield policies.node_slices[kind][node], policies.combos[kind][node].index(edges)
    for edge, op in sample.edges:
        yield policies.edge_slices[kind][edge], t.op_set.index(op)


def log_prob(policies: PolicySet, sample: Model) -> float:
    total = 0.0
    for s in _as_samples(sample):
        for sl, idx in _factors(policies, s):
            total += float(log_softmax(policies.logits[sl], policies.temperature)[idx])
    return total


def reinforce_grad(policies: PolicySet, sample: Model, advantage: float) -> np.ndarray:
    """Ascent direction ``advantage * d log P(sample) / d logits``."""
    if not math.isfinite(advantage):
        raise PolicyError("advantage must be finite")
    grad = np.zeros_like(policies.logits)
    for s in _as_samples(sample):
        for sl, idx in _factors(policies, s):
            g = -softmax(policies.logits[sl], policies.temperature)
            g[idx] += 1.0
            grad[sl] += g * (advantage / policies.temperature)
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_policies(cls, policies: PolicySet, **kw) -> "AdamState":
        return cls(np.zeros(policies.size), np.zeros(policies.size), **kw)


def adam_step(policies: PolicySet, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in the ascent direction; mutates both arguments."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != policies.logits.shape or state.m.shape != grad.shape:
        raise PolicyError(f"gradient shape {grad.shape} does not match policies {policies.logits.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    policies.logits = policies.logits + lr * m_hat / (np.sqrt(v_hat) + state.eps)
