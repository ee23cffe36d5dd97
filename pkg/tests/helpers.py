"""Shared oracles for the test modules."""
import itertools

import numpy as np

from decoupled_nas.tensor import Tape


def grad_check(loss_fn, tensors, rng, coords_per_tensor=None, h=1e-6, rtol=1e-4, atol=1e-8):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    Returns the worst relative error seen. ``coords_per_tensor`` limits the
    checked coordinates per tensor (chosen at random) for large tensors.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = list(range(t.data.size))
        if coords_per_tensor is not None and len(flat) > coords_per_tensor:
            flat = sorted(rng.choice(len(flat), coords_per_tensor, replace=False).tolist())
        for k in flat:
            idx = np.unravel_index(k, t.data.shape)
            keep = t.data[idx]
            t.data[idx] = keep + h
            up = loss_fn().item()
            t.data[idx] = keep - h
            down = loss_fn().item()
            t.data[idx] = keep
            numeric = (up - down) / (2 * h)
            a = analytic[idx]
            err = abs(a - numeric)
            assert err <= atol + rtol * max(abs(a), abs(numeric)), (
                f"{t.name or 'tensor'}{tuple(int(i) for i in idx)}: analytic {a!r} vs numeric {numeric!r}"
            )
            worst = max(worst, err / max(abs(a), abs(numeric), 1e-12))
        t.zero_grad()
    return worst


def brute_force_count(kind: str, num_nodes: int, num_ops: int) -> int:
    """Count cells by trying every on/off/op assignment of every possible edge.

    Conv: nodes 0,1 are inputs; each later node takes 2 distinct earlier nodes.
    Recurrent: ``num_nodes`` hidden nodes, the first (index 2) fixed;
    each takes 1 earlier hidden node (index >= 2).
    """
    if kind == "conv":
        searched = range(2, num_nodes)
        edges = [(s, d) for d in searched for s in range(d)]
        fan = 2
    else:
        searched = range(3, num_nodes + 2)
        edges = [(s, d) for d in searched for s in range(2, d)]
        fan = 1
    total = 0
    for choice in itertools.product(range(num_ops + 1), repeat=len(edges)):
        incoming = dict.fromkeys(searched, 0)
        for (s, d), c in zip(edges, choice):
            if c:
                incoming[d] += 1
        total += all(v == fan for v in incoming.values())
    return total
