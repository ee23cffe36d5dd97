"""Weight-shared supernet for convolutional and recurrent cell search.

Every candidate ``(cell kind, edge, operation)`` owns one parameter entry. A
child model is a :class:`ChildView`: the shared store plus one sampled
architecture per cell kind. Training a child touches only the entries its
samples select, plus the position parameters (stem, per-cell preprocessing,
classifier head) that every child uses.

All cells run at the same channel width so that one entry per
``(kind, edge, op)`` is shared by every stacked cell of that kind.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .searchspace import CONV_KINDS, RECURRENT, ArchitectureSample, CellTemplate, Edge, validate_sample
from .tensor import Tape, Tensor

Key = tuple[str, Edge, str]


@dataclass
class NetworkConfig:
    # convolutional stack
    cells_per_stage: int = 2
    num_reduction: int = 2
    channels: int = 8
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    # recurrent cell
    vocab_size: int = 0
    embed_size: int = 32
    hidden_size: int = 32
    seq_len: int = 8
    dropout: float = 0.0
    seed: int = 0
    init_gain: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def cell_layout(config: NetworkConfig) -> list[str]:
    """Normal-cell stages separated by reduction cells."""
    stage = ["conv_normal"] * config.cells_per_stage
    layout = list(stage)
    for _ in range(config.num_reduction):
        layout += ["conv_reduction"] + stage
    return layout


def _edge_stride(kind: str, edge: Edge) -> int:
    # reduction cells downsample on edges leaving the two cell inputs
    return 2 if kind == "conv_reduction" and edge[0] < 2 else 1


def _name(key: Key) -> str:
    kind, (s, d), op = key
    return f"{kind}/{s},{d}/{op}"


class SharedWeights:
    def __init__(self, templates: Mapping[str, CellTemplate], config: NetworkConfig):
        self.templates = dict(templates)
        self.config = config
        self.entries: dict[Key, dict[str, Tensor]] = {}
        self.position: dict[str, dict[str, Tensor]] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.channel_widths: dict[str, int] = {}

    # -- construction helpers
    def _add(self, group: dict, name: str, shapes: dict[str, tuple], rng, fan_in: Mapping[str, int]):
        params = {}
        for pname, shape in shapes.items():
            if pname == "scale":
                data = np.ones(shape)
            elif pname in ("shift",) or pname.startswith("bias"):
                data = np.zeros(shape)
            else:
                bound = self.config.init_gain / math.sqrt(fan_in[pname])
                data = rng.uniform(-bound, bound, size=shape)
            params[pname] = Tensor(data, requires_grad=True, name=f"{name}/{pname}")
        group[name] = params
        return params

    def entry(self, kind: str, edge: Edge, op: str) -> dict[str, Tensor]:
        return self.entries[(kind, tuple(edge), op)]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for key, params in self.entries.items():
            for p in params.values():
                yield p.name, p
        for params in self.position.values():
            for p in params.values():
                yield p.name, p

    def checksum(self, key: Key) -> str:
        h = hashlib.sha256()
        for pname in sorted(self.entries[key]):
            h.update(self.entries[key][pname].data.tobytes())
        return h.hexdigest()

    def checksums(self) -> dict[Key, str]:
        return {k: self.checksum(k) for k in self.entries}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{name}": t.data.copy() for name, t in self.named_tensors()}
        out.update({f"momentum/{name}": buf.copy() for name, buf in self.momentum.items()})
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        tensors = dict(self.named_tensors())
        for name, t in tensors.items():
            data = arrays[f"param/{name}"]
            if data.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {data.shape} vs {t.shape}")
            t.data = np.array(data, dtype=t.data.dtype)
        self.momentum = {
            k[len("momentum/"):]: np.array(v) for k, v in arrays.items() if k.startswith("momentum/")
        }


def _cell_op_fan_in(shapes):
    fan = {}
    for pname, shape in shapes.items():
        if pname == "depthwise":
            fan[pname] = shape[1] * shape[2]
        elif len(shape) == 2:
            fan[pname] = shape[1]
    return fan


def build_conv_supernet(templates: Mapping[str, CellTemplate], config: NetworkConfig) -> SharedWeights:
    missing = set(CONV_KINDS) - set(templates)
    if missing:
        raise ValueError(f"conv supernet needs templates for {sorted(missing)}")
    w = SharedWeights(templates, config)
    rng = np.random.default_rng(config.seed)
    c = config.channels
    for kind in CONV_KINDS:
        t = templates[kind]
        for edge in t.edges():
            for op in t.op_set:
                shapes = T.cell_op_param_shapes(op, c, _edge_stride(kind, edge))
                params = w._add({}, _name((kind, edge, op)), shapes, rng, _cell_op_fan_in(shapes))
                w.entries[(kind, edge, op)] = params

    cin, _, _ = config.input_shape
    w._add(w.position, "stem", {"weight": (c, cin, 3, 3), "scale": (c,), "shift": (c,)}, rng,
           {"weight": cin * 9})
    width = {kind: len(templates[kind].searched_nodes) * c for kind in CONV_KINDS}
    prev_prev, prev, reduced_prev = c, c, False
    for i, kind in enumerate(cell_layout(config)):
        shapes, fan = {}, {}
        if reduced_prev:
            shapes["pre0_even"], shapes["pre0_odd"] = (c // 2, prev_prev), (c - c // 2, prev_prev)
            fan["pre0_even"] = fan["pre0_odd"] = prev_prev
        else:
            shapes["pre0"] = (c, prev_prev)
            fan["pre0"] = prev_prev
        shapes["pre1"] = (c, prev)
        fan["pre1"] = prev
        w._add(w.position, f"cell{i}", shapes, rng, fan)
        w.channel_widths[f"cell{i}"] = width[kind]
        prev_prev, prev = prev, width[kind]
        reduced_prev = kind == "conv_reduction"
    w._add(w.position, "head", {"weight": (prev, config.num_classes), "bias": (config.num_classes,)},
           rng, {"weight": prev})
    return w


def build_recurrent_supernet(template: CellTemplate, config: NetworkConfig) -> SharedWeights:
    if config.vocab_size <= 0:
        raise ValueError("recurrent supernet needs vocab_size > 0")
    w = SharedWeights({RECURRENT: template}, config)
    rng = np.random.default_rng(config.seed)
    h, e, v = config.hidden_size, config.embed_size, config.vocab_size
    for edge in template.edges():
        for act in template.op_set:
            params = w._add({}, _name((RECURRENT, edge, act)), {"weight": (h, h), "bias": (h,)}, rng,
                            {"weight": h})
            w.entries[(RECURRENT, edge, act)] = params
    w._add(w.position, "embed", {"table": (v, e)}, rng, {"table": 1})
    w._add(w.position, "first", {"w_x": (e, h), "w_h": (h, h), "bias": (h,)}, rng, {"w_x": e, "w_h": h})
    w._add(w.position, "decoder", {"weight": (h, v), "bias": (v,)}, rng, {"weight": h})
    return w


@dataclass
class ChildView:
    weights: SharedWeights
    samples: dict[str, ArchitectureSample] = field(default_factory=dict)

    def __post_init__(self):
        for kind, s in self.samples.items():
            verdict = validate_sample(self.weights.templates[kind], s)
            if not verdict:
                raise ValueError(f"invalid {kind} sample: {verdict.violations}")

    def touched_keys(self) -> list[Key]:
        return [(kind, edge, op) for kind, s in self.samples.items() for edge, op in s.edges]

    def parameters(self) -> list[Tensor]:
        out = []
        for key in self.touched_keys():
            out.extend(self.weights.entries[key].values())
        for params in self.weights.position.values():
            out.extend(params.values())
        return out


# ---- convolutional forward --------------------------------------------------


def forward_cell(weights: SharedWeights, sample: ArchitectureSample, s0: Tensor, s1: Tensor) -> Tensor:
    """One cell on two preprocessed inputs of ``channels`` channels each."""
    kind = sample.kind
    t = weights.templates[kind]
    if s0.shape != s1.shape:
        raise T.ShapeError(f"cell inputs disagree: {s0.shape} vs {s1.shape}")
    states = {0: s0, 1: s1}
    ops = sample.ops()
    for node, edges in sample.structure().items():
        outs = [
            T.apply_cell_op(ops[e], states[e[0]], weights.entry(kind, e, ops[e]), _edge_stride(kind, e))
            for e in edges
        ]
        states[node] = T.combine("elementwise_add", outs)
    return T.combine("channel_concat", [states[n] for n in t.searched_nodes])


def _preprocess(params: dict[str, Tensor], s0: Tensor, s1: Tensor) -> tuple[Tensor, Tensor]:
    if "pre0_even" in params:
        p0 = T.factorized_reduce(s0, params["pre0_even"], params["pre0_odd"])
    else:
        p0 = T.pointwise_conv(T.relu(s0), params["pre0"])
    p1 = T.pointwise_conv(T.relu(s1), params["pre1"])
    return p0, p1


def forward_conv_child(view: ChildView, batch) -> Tensor:
    w = view.weights
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != tuple(w.config.input_shape):
        raise T.ShapeError(f"batch shape {x.shape[1:]} does not match config {w.config.input_shape}")
    stem = w.position["stem"]
    s = T.scale_shift(T.conv2d(x, stem["weight"]), stem["scale"], stem["shift"])
    s0 = s1 = s
    for i, kind in enumerate(cell_layout(w.config)):
        p0, p1 = _preprocess(w.position[f"cell{i}"], s0, s1)
        s0, s1 = s1, forward_cell(w, view.samples[kind], p0, p1)
    head = w.position["head"]
    return T.dense(T.global_avg_pool(s1), head["weight"], head["bias"])


# ---- recurrent forward ------------------------------------------------------


def recurrent_cell(weights: SharedWeights, sample: ArchitectureSample, x: Tensor, h: Tensor) -> Tensor:
    first = weights.position["first"]
    zero = Tensor(np.zeros(first["bias"].shape))
    pre = T.add(T.dense(x, first["w_x"], first["bias"]), T.dense(h, first["w_h"], zero))
    t = weights.templates[RECURRENT]
    states = {t.fixed_node: T.tanh(pre)}
    for (src, dst), act in sample.edges:
        p = weights.entry(RECURRENT, (src, dst), act)
        states[dst] = T.activation(act, T.dense(states[src], p["weight"], p["bias"]))
    return T.combine("elementwise_mean", [states[n] for n in t.hidden_nodes])


def forward_recurrent_child(view: ChildView, tokens, hidden=None, rng: np.random.Generator | None = None):
    """Unroll the sampled cell over ``tokens`` (B, T).

    Returns time-major logits of shape (T*B, vocab) and the final hidden state.
    """
    w = view.weights
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise T.ShapeError(f"tokens must be (B, T), got {tokens.shape}")
    b, steps = tokens.shape
    hsize = w.config.hidden_size
    h = hidden if hidden is not None else Tensor(np.zeros((b, hsize)))
    if h.shape != (b, hsize):
        raise T.ShapeError(f"hidden state {h.shape} does not match ({b}, {hsize})")
    sample = view.samples[RECURRENT]
    table = w.position["embed"]["table"]
    dec = w.position["decoder"]
    outs = []
    for step in range(steps):
        h = recurrent_cell(w, sample, T.embedding(table, tokens[:, step]), h)
        outs.append(T.dense(T.dropout(h, w.config.dropout, rng), dec["weight"], dec["bias"]))
    return T.concatenate(outs, axis=0), h


def _is_recurrent(view: ChildView) -> bool:
    return RECURRENT in view.samples


def child_loss(view: ChildView, batch, rng: np.random.Generator | None = None) -> Tensor:
    x, y = batch
    if _is_recurrent(view):
        logits, _ = forward_recurrent_child(view, x, rng=rng)
        return T.softmax_cross_entropy(logits, np.asarray(y).T.reshape(-1))
    return T.softmax_cross_entropy(forward_conv_child(view, x), y)


def child_sgd_step(view: ChildView, batch, lr: float, momentum: float = 0.0, nesterov: bool = True,
                   grad_clip: float | None = None, rng: np.random.Generator | None = None) -> float:
    """One SGD step on the parameters this child uses; returns the training loss."""
    params = view.parameters()
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = child_loss(view, batch, rng)
    if not math.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite training loss {loss.item()}")
    tape.backward(loss)
    grads = [(p, p.grad) for p in params if p.grad is not None]
    if grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for _, g in grads))
        if norm > grad_clip:
            grads = [(p, g * (grad_clip / norm)) for p, g in grads]
    store = view.weights.momentum
    for p, g in grads:
        if momentum > 0:
            buf = store.get(p.name)
            buf = g.copy() if buf is None else momentum * buf + g
            store[p.name] = buf
            g = g + momentum * buf if nesterov else buf
        p.data = p.data - lr * g
        p.zero_grad()
    return loss.item()


def evaluate_child(view: ChildView, batch) -> float:
    """Accuracy for conv children, mean per-token loss for recurrent children."""
    x, y = batch
    if _is_recurrent(view):
        return child_loss(view, batch).item()
    logits = forward_conv_child(view, x).data
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())
