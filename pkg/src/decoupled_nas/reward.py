"""Rewards for the policy phase and the moving-average baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .searchspace import (
    ArchitectureSample,
    CellTemplate,
    count_architectures,
    enumerate_edge_combinations,
    iter_architectures,
    validate_sample,
)
from .supernet import ChildView, evaluate_child


@dataclass
class Baseline:
    decay: float = 0.95
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("baseline decay must lie in (0, 1)")


def update_baseline(baseline: Baseline, reward: float) -> float:
    """Fold ``reward`` into the baseline; returns the advantage against the pre-update value."""
    if not math.isfinite(reward):
        raise ValueError(f"reward must be finite, got {reward}")
    if not baseline.initialized:
        baseline.value = reward
        baseline.initialized = True
        return 0.0
    advantage = reward - baseline.value
    baseline.value = baseline.decay * baseline.value + (1 - baseline.decay) * reward
    return advantage


def accuracy_reward(view: ChildView, batch) -> float:
    if len(batch[1]) == 0:
        raise ValueError("empty validation minibatch")
    return evaluate_child(view, batch)


def perplexity_reward(loss: float, scale: float) -> float:
    """``scale / ppl`` with ``ppl = exp(loss)``."""
    if not math.isfinite(loss):
        raise ValueError(f"loss must be finite, got {loss}")
    if scale <= 0:
        raise ValueError("reward scale must be positive")
    return scale * math.exp(-loss)


class OracleError(ValueError):
    pass


@dataclass
class TabularOracle:
    """Lookup table from encoded architecture to a reward in [0, 1]."""

    template: CellTemplate
    table: dict[str, float]
    optimum: ArchitectureSample
    noise: float = 0.0

    def true_reward(self, sample: ArchitectureSample) -> float:
        if sample.kind != self.template.kind:
            raise OracleError(f"oracle covers {self.template.kind}, got a {sample.kind} sample")
        try:
            return self.table[sample.encode()]
        except KeyError:
            verdict = validate_sample(self.template, sample)
            raise OracleError(f"sample not in table ({'; '.join(verdict.violations) or 'missing entry'})") from None

    def dumps(self) -> str:
        lines = [
            "# tabular-oracle v1",
            "# " + self.template.dumps().strip().replace("\n", "\n# "),
            f"# noise: {self.noise!r}",
            f"# optimum: {self.optimum.encode()}",
        ]
        lines += [f"{r!r}\t{enc}" for enc, r in sorted(self.table.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TabularOracle":
        header, rows = [], {}
        for line in text.splitlines():
            if line.startswith("#"):
                header.append(line[2:])
            elif line.strip():
                try:
                    r, enc = line.split("\t")
                    rows[enc] = float(r)
                except ValueError:
                    raise OracleError(f"malformed oracle row {line!r}") from None
        if not header or header[0] != "tabular-oracle v1":
            raise OracleError("not a tabular-oracle v1 document")
        meta = [h for h in header[1:] if h.startswith(("noise:", "optimum:"))]
        template = CellTemplate.loads("\n".join(h for h in header[1:] if h not in meta))
        fields = dict(m.split(": ", 1) for m in meta)
        optimum = ArchitectureSample.decode(template.kind, fields["optimum"])
        return cls(template, rows, optimum, float(fields["noise"]))


def make_planted_oracle(template: CellTemplate, seed: int = 0, noise: float = 0.0,
                        margin: float = 0.3, max_size: int = 2_000_000) -> TabularOracle:
    """Additive reward landscape with a unique planted optimum scoring exactly 1.

    Every node combination and every (edge, op) pair gets a random score in
    ``[0, 1 - margin)``; the planted choices score 1. An architecture's reward
    is the mean score of its choices.
    """
    size = count_architectures(template)
    if size > max_size:
        raise OracleError(f"space of {size} architectures is too large to tabulate")
    rng = np.random.default_rng(seed)
    node_scores, planted_combo = {}, {}
    for node in template.searched_nodes:
        combos = enumerate_edge_combinations(template, node)
        scores = rng.uniform(0, 1 - margin, size=len(combos))
        best = int(rng.integers(len(combos)))
        scores[best] = 1.0
        node_scores[node] = dict(zip(combos, scores))
        planted_combo[node] = combos[best]
    op_scores = {}
    for edge in template.edges():
        scores = rng.uniform(0, 1 - margin, size=len(template.op_set))
        best = int(rng.integers(len(template.op_set)))
        scores[best] = 1.0
        op_scores[edge] = dict(zip(template.op_set, scores))
    optimum_pairs = []
    for node in template.searched_nodes:
        for edge in planted_combo[node]:
            best_op = max(op_scores[edge], key=op_scores[edge].get)
            optimum_pairs.append((edge, best_op))
    optimum = ArchitectureSample(template.kind, tuple(optimum_pairs))

    table = {}
    for arch in iter_architectures(template):
        structure = arch.structure()
        parts = [node_scores[n][structure[n]] for n in template.searched_nodes]
        parts += [op_scores[e][op] for e, op in arch.edges]
        table[arch.encode()] = float(np.mean(parts))
    return TabularOracle(template, table, optimum, noise)


def tabular_reward(oracle: TabularOracle, sample: ArchitectureSample, rng: np.random.Generator | None = None) -> float:
    r = oracle.true_reward(sample)
    if oracle.noise > 0:
        if rng is None:
            raise OracleError("a noisy oracle needs a generator")
        r += oracle.noise * rng.normal()
    return min(1.0, max(0.0, r))
