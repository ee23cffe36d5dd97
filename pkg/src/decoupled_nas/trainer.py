"""Alternating child/policy optimization, derivation, random search and checkpoints.

Run directory layout::

    <out>/config.yaml
    <out>/metrics.csv            epoch,phase,loss,reward,baseline,wall_clock
    <out>/checkpoints/epoch_NNNN.ckpt, latest.ckpt
    <out>/snapshots/epoch_NNNN/{policies.json, heatmap_<kind>.csv, nodes_<kind>.csv}
    <out>/derived/architecture.json, derived/<kind>.dot
    <out>/ledger_nodes.csv, ledger_edges.csv
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from . import analytics, data
from .config import SearchConfig, parse_config
from .policy import AdamState, PolicySet, adam_step, init_policy_set, reinforce_grad, sample_model
from .reward import (
    Baseline,
    TabularOracle,
    accuracy_reward,
    make_planted_oracle,
    perplexity_reward,
    tabular_reward,
    update_baseline,
)
from .searchspace import RECURRENT, ArchitectureSample
from .supernet import (
    ChildView,
    NetworkConfig,
    SharedWeights,
    build_conv_supernet,
    build_recurrent_supernet,
    child_loss,
    child_sgd_step,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "decoupled-nas-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["epoch", "phase", "loss", "reward", "baseline", "wall_clock"]

Model = dict[str, ArchitectureSample]


class SearchAbort(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# ---- reward sources ---------------------------------------------------------


class TabularTask:
    """Policy search against a lookup table; there is no child phase."""

    has_weights = False
    weights = None

    def __init__(self, oracle: TabularOracle):
        self.oracle = oracle
        self.templates = [oracle.template]
        self.kind = oracle.template.kind

    def train_batches(self, rng):
        return []

    def policy_steps(self, config: SearchConfig) -> int:
        return config.policy_steps_per_epoch or 10

    def reward_batch(self, state: "SearchState"):
        return None

    def score(self, model: Model, batch, rng) -> float:
        return tabular_reward(self.oracle, model[self.kind], rng)

    def true_reward(self, model: Model) -> float:
        return self.oracle.true_reward(model[self.kind])

    def is_optimum(self, model: Model) -> bool:
        return model[self.kind] == self.oracle.optimum


class SupernetTask:
    """Child training on shared weights; rewards from validation minibatches."""

    has_weights = True

    def __init__(self, config: SearchConfig, weights: SharedWeights, train, valid):
        self.config = config
        self.weights = weights
        self.templates = list(weights.templates.values())
        self.recurrent = RECURRENT in weights.templates
        self.train = train
        self.valid = valid
        self.reward_c: Optional[float] = config.reward_c

    def _train_windows(self, rng):
        if self.recurrent:
            order = rng.permutation(len(self.train))
            return [self.train[i] for i in order]
        return list(data.minibatches(self.train, self.config.batch_size, rng))

    def train_batches(self, rng):
        batches = self._train_windows(rng)
        n = self.config.child_steps_per_epoch or len(batches)
        if not batches:
            raise SearchAbort("training split is smaller than one minibatch")
        return [batches[i % len(batches)] for i in range(n)]

    def valid_batches(self):
        if self.recurrent:
            return self.valid
        return list(data.minibatches(self.valid, self.config.valid_batch_size))

    def policy_steps(self, config: SearchConfig) -> int:
        return config.policy_steps_per_epoch or len(self.valid_batches())

    def reward_batch(self, state: "SearchState"):
        batches = self.valid_batches()
        if not batches:
            raise SearchAbort("validation split is smaller than one minibatch")
        if self.config.fixed_reward_batch:
            return batches[0]
        batch = batches[state.valid_cursor % len(batches)]
        state.valid_cursor += 1
        return batch

    def view(self, model: Model) -> ChildView:
        return ChildView(self.weights, dict(model))

    def child_step(self, model: Model, batch, rng) -> float:
        c = self.config
        return child_sgd_step(self.view(model), batch, c.child_lr, c.child_momentum, c.nesterov, c.grad_clip,
                              rng=rng if self.recurrent else None)

    def calibrate(self, model: Model) -> float:
        """Pick the reward scale so that the first rewards sit near 0.5 (initial ppl / 2)."""
        loss = child_loss(self.view(model), self.valid_batches()[0]).item()
        self.reward_c = math.exp(loss) / 2
        log.info("perplexity reward scale = %.6g (initial ppl %.6g)", self.reward_c, math.exp(loss))
        return self.reward_c

    def score(self, model: Model, batch, rng=None) -> float:
        view = self.view(model)
        if self.recurrent:
            return perplexity_reward(child_loss(view, batch).item(), self.reward_c)
        return accuracy_reward(view, batch)

    def true_reward(self, model: Model):
        return None

    def is_optimum(self, model: Model) -> bool:
        return False


def build_task(config: SearchConfig):
    templates = config.templates()
    if config.task == "tabular":
        if config.oracle.table:
            oracle = TabularOracle.loads(Path(config.oracle.table).read_text())
        else:
            oracle = make_planted_oracle(templates[0], config.oracle.seed, config.oracle.noise, config.oracle.margin)
        return TabularTask(oracle)
    net, d = config.network, config.data
    if config.task == "conv":
        ncfg = NetworkConfig(net.cells_per_stage, net.num_reduction, net.channels,
                             (d.image_channels, d.image_size, d.image_size), d.num_classes, seed=config.seed)
        weights = build_conv_supernet({t.kind: t for t in templates}, ncfg)
        train = data.textured_images(d.n_train, d.num_classes, d.image_size, d.image_channels, d.noise, d.seed)
        valid = data.textured_images(d.n_valid, d.num_classes, d.image_size, d.image_channels, d.noise, d.seed + 1)
        return SupernetTask(config, weights, train, valid)
    corpus = data.load_corpus(d.corpus) if d.corpus else data.char_corpus(repeats=d.repeats)
    ncfg = NetworkConfig(vocab_size=len(corpus.vocab), embed_size=net.embed_size, hidden_size=net.hidden_size,
                         seq_len=net.seq_len, dropout=net.dropout, seed=config.seed)
    weights = build_recurrent_supernet(templates[0], ncfg)
    train = data.batchify(corpus.train, config.batch_size, net.seq_len)
    valid = data.batchify(corpus.valid, config.valid_batch_size, net.seq_len)
    return SupernetTask(config, weights, train, valid)


# ---- state ------------------------------------------------------------------


@dataclass
class SearchState:
    config: SearchConfig
    policies: PolicySet
    adam: AdamState
    baseline: Baseline
    rng: np.random.Generator
    ledger: analytics.SampleLedger
    epoch: int = 0
    valid_cursor: int = 0
    reward_c: Optional[float] = None
    random_search: bool = False
    metrics: list[dict] = field(default_factory=list)
    reward_trace: list[float] = field(default_factory=list)


def new_state(config: SearchConfig, task, random_search: bool = False) -> SearchState:
    policies = init_policy_set(task.templates, config.temperature)
    return SearchState(
        config=config,
        policies=policies,
        adam=AdamState.for_policies(policies),
        baseline=Baseline(config.baseline_decay),
        rng=np.random.default_rng(config.seed),
        ledger=analytics.SampleLedger({t.kind: t for t in task.templates}, config.ledger_bucket),
        random_search=random_search,
    )


@dataclass
class Derivation:
    best: Model
    best_reward: float
    best_index: int
    candidates: list[Model]
    rewards: list[float]


@dataclass
class SearchResult:
    derived: Model
    derived_reward: float
    derivation: Derivation
    reward_trace: list[float]
    metrics: list[dict]
    snapshots: list[analytics.Snapshot]
    wall_clock: dict[str, float]
    true_reward: Optional[float] = None
    state: Optional[SearchState] = None


# ---- derivation -------------------------------------------------------------


def derive_architecture(policies: PolicySet, task, n: int, rng: np.random.Generator,
                        resample_batch: bool = False, state: Optional[SearchState] = None,
                        workers: int = 1) -> Derivation:
    """Score ``n`` sampled models on validation minibatches and keep the best.

    Everything random is drawn up front in draw order, so scoring may run on a
    thread pool without changing the outcome. Ties go to the earliest draw.
    """
    if n < 1:
        raise ValueError("derivation needs n >= 1")
    holder = state or SimpleNamespace(valid_cursor=0)
    shared = None if resample_batch else task.reward_batch(holder)
    candidates, batches = [], []
    for _ in range(n):
        candidates.append(sample_model(policies, rng))
        batches.append(task.reward_batch(holder) if resample_batch else shared)
    seeds = rng.integers(0, 2**63 - 1, size=n)

    def score(i):
        return task.score(candidates[i], batches[i], np.random.default_rng(int(seeds[i])))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rewards = list(pool.map(score, range(n)))
    else:
        rewards = [score(i) for i in range(n)]
    best = int(np.argmax(rewards))
    return Derivation(candidates[best], rewards[best], best, candidates, rewards)


# ---- main loop ---------------------------------------------------------------

Hook = Callable[[str, SearchState], None]


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def run_search(config: SearchConfig, task=None, run_dir=None, state: Optional[SearchState] = None,
               stop_epoch: Optional[int] = None, random_search: bool = False,
               hooks: Optional[Hook] = None) -> Optional[SearchResult]:
    """Alternate child and policy phases until ``config.epochs``, then derive.

    With ``stop_epoch`` the loop halts early (after checkpointing) and returns
    ``None``; resume by passing the loaded state back in.
    """
    task = task or build_task(config)
    state = state or new_state(config, task, random_search)
    hooks = hooks or (lambda event, st: None)
    rundir = RunDir(run_dir) if run_dir is not None else None
    if rundir and state.epoch == 0:
        rundir.write_config(config)
    snapshots = []
    timer = {"child": 0.0, "policy": 0.0, "derive": 0.0}

    if isinstance(task, SupernetTask) and task.recurrent:
        if state.reward_c is None:
            state.reward_c = task.reward_c or task.calibrate(sample_model(state.policies, np.random.default_rng(config.seed + 1)))
        task.reward_c = state.reward_c

    last = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    while state.epoch < last:
        epoch = state.epoch
        if task.has_weights:
            hooks("child_start", state)
            t0 = time.perf_counter()
            losses = []
            for batch in task.train_batches(state.rng):
                model = sample_model(state.policies, state.rng)
                analytics.record_sample(state.ledger, epoch, model)
                try:
                    losses.append(task.child_step(model, batch, state.rng))
                except FloatingPointError as e:
                    raise SearchAbort(f"epoch {epoch}: {e}") from None
            dt = time.perf_counter() - t0
            timer["child"] += dt
            state.metrics.append({"epoch": epoch, "phase": "child", "loss": _mean(losses), "reward": "",
                                  "baseline": "", "wall_clock": dt})
            hooks("child_end", state)

        hooks("policy_start", state)
        t0 = time.perf_counter()
        rewards = []
        for _ in range(task.policy_steps(config)):
            grad = np.zeros_like(state.policies.logits)
            for _ in range(config.policy_batch):
                model = sample_model(state.policies, state.rng)
                analytics.record_sample(state.ledger, epoch, model)
                r = task.score(model, task.reward_batch(state), state.rng)
                if not math.isfinite(r):
                    raise SearchAbort(f"epoch {epoch}: non-finite reward")
                adv = update_baseline(state.baseline, r)
                rewards.append(r)
                state.reward_trace.append(r)
                if not state.random_search:
                    grad += reinforce_grad(state.policies, model, adv)
            if not state.random_search:
                adam_step(state.policies, grad / config.policy_batch, state.adam, config.policy_lr)
        dt = time.perf_counter() - t0
        timer["policy"] += dt
        state.metrics.append({"epoch": epoch, "phase": "policy", "loss": "", "reward": _mean(rewards),
                              "baseline": state.baseline.value, "wall_clock": dt})
        hooks("policy_end", state)

        state.epoch += 1
        if (epoch + 1) % config.snapshot_every == 0 or epoch == 0:
            snap = analytics.snapshot_policies(state.policies, epoch)
            snapshots.append(snap)
            if rundir:
                rundir.write_snapshot(snap)
        if rundir:
            rundir.write_metrics(state.metrics)
            if state.epoch % config.checkpoint_every == 0 or state.epoch == last:
                save_checkpoint(state, task, rundir.checkpoint_path(state.epoch))
                save_checkpoint(state, task, rundir.checkpoint_path(None))

    if state.epoch < config.epochs:
        return None

    t0 = time.perf_counter()
    d = derive_architecture(state.policies, task, config.derive_samples, state.rng,
                            config.derive_resample_batch, state, config.workers)
    timer["derive"] = time.perf_counter() - t0
    result = SearchResult(d.best, d.best_reward, d, state.reward_trace, state.metrics, snapshots, timer,
                          task.true_reward(d.best), state)
    if rundir:
        rundir.write_derived(result, task)
        rundir.write_ledger(state.ledger)
    return result


def run_random_search(config: SearchConfig, task=None, run_dir=None, **kw) -> Optional[SearchResult]:
    """Same loop and budget with policies frozen at uniform."""
    return run_search(config, task, run_dir, random_search=True, **kw)


# ---- persistence ------------------------------------------------------------


def save_checkpoint(state: SearchState, task, path) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.model_dump(mode="json"),
        "epoch": state.epoch,
        "valid_cursor": state.valid_cursor,
        "reward_c": state.reward_c,
        "random_search": state.random_search,
        "rng": state.rng.bit_generator.state,
        "baseline": {"value": state.baseline.value, "decay": state.baseline.decay,
                     "initialized": state.baseline.initialized},
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "policies": state.policies.to_dict(),
        "ledger": state.ledger.to_dict(),
        "metrics": state.metrics,
        "reward_trace": state.reward_trace,
    }
    arrays = {"policy/logits": state.policies.logits, "adam/m": state.adam.m, "adam/v": state.adam.v}
    if task.has_weights:
        arrays.update(task.weights.state_arrays())
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as z:
        z.writestr("manifest.json", json.dumps(manifest))
        z.writestr("arrays.npz", buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, task=None):
    """Restore ``(state, task)``; the task is rebuilt from the stored config if not given."""
    try:
        with zipfile.ZipFile(path) as z:
            manifest = json.loads(z.read("manifest.json"))
            arrays = dict(np.load(io.BytesIO(z.read("arrays.npz"))))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as e:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({e})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {manifest.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    config = SearchConfig.model_validate(manifest["config"])
    task = task or build_task(config)
    policies = PolicySet.from_dict(manifest["policies"])
    policies.logits = arrays["policy/logits"].copy()
    a = manifest["adam"]
    adam = AdamState(arrays["adam/m"].copy(), arrays["adam/v"].copy(), a["t"], a["beta1"], a["beta2"], a["eps"])
    b = manifest["baseline"]
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    if task.has_weights:
        task.weights.load_arrays(arrays)
    state = SearchState(
        config=config,
        policies=policies,
        adam=adam,
        baseline=Baseline(b["decay"], b["value"], b["initialized"]),
        rng=rng,
        ledger=analytics.SampleLedger.from_dict(manifest["ledger"]),
        epoch=manifest["epoch"],
        valid_cursor=manifest["valid_cursor"],
        reward_c=manifest["reward_c"],
        random_search=manifest["random_search"],
        metrics=manifest["metrics"],
        reward_trace=manifest["reward_trace"],
    )
    return state, task


def resume(path, run_dir=None, hooks=None) -> Optional[SearchResult]:
    state, task = load_checkpoint(path)
    return run_search(state.config, task, run_dir, state=state, hooks=hooks)


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("checkpoints", "snapshots", "derived"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def write_config(self, config: SearchConfig) -> None:
        (self.root / "config.yaml").write_text(config.dumps())

    def read_config(self) -> SearchConfig:
        return parse_config((self.root / "config.yaml").read_text(), str(self.root / "config.yaml"))

    def checkpoint_path(self, epoch: Optional[int]) -> Path:
        name = "latest.ckpt" if epoch is None else f"epoch_{epoch:04d}.ckpt"
        return self.root / "checkpoints" / name

    def write_metrics(self, rows: list[dict]) -> None:
        with open(self.root / "metrics.csv", "w", newline="") as f:
            w = csv.DictWriter(f, METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def write_snapshot(self, snap: analytics.Snapshot) -> None:
        d = self.root / "snapshots" / f"epoch_{snap.epoch:04d}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "policies.json").write_text(json.dumps(snap.to_dict(), indent=1))
        for kind, text in analytics.export_heatmap_csv(snap).items():
            (d / f"heatmap_{kind}.csv").write_text(text)
        for kind, text in analytics.export_node_csv(snap).items():
            (d / f"nodes_{kind}.csv").write_text(text)

    def write_derived(self, result: SearchResult, task) -> None:
        body = {
            "architecture": {k: s.to_dict() for k, s in result.derived.items()},
            "measured_reward": result.derived_reward,
            "candidate_index": result.derivation.best_index,
            "candidates": len(result.derivation.candidates),
        }
        if result.true_reward is not None:
            body["true_reward"] = result.true_reward
        (self.root / "derived" / "architecture.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
        templates = {t.kind: t for t in task.templates}
        for kind, s in result.derived.items():
            (self.root / "derived" / f"{kind}.dot").write_text(analytics.export_dot(s, templates[kind]))

    def write_ledger(self, ledger: analytics.SampleLedger) -> None:
        nodes, edges = analytics.export_ledger_csv(ledger)
        (self.root / "ledger_nodes.csv").write_text(nodes)
        (self.root / "ledger_edges.csv").write_text(edges)


def read_derived(path) -> Model:
    body = json.loads(Path(path).read_text())
    return {k: ArchitectureSample.from_dict(v) for k, v in body["architecture"].items()}
