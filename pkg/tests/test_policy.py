import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoupled_nas.policy import (
    AdamState,
    PolicyError,
    PolicySet,
    adam_step,
    init_policy_set,
    log_prob,
    log_softmax,
    reinforce_grad,
    sample_architecture,
    sample_model,
    sample_operations,
    sample_structure,
    softmax,
)
from decoupled_nas.searchspace import (
    CONV_OPS,
    RECURRENT_ACTS,
    ArchitectureSample,
    count_architectures,
    iter_architectures,
    make_conv_template,
    make_recurrent_template,
    validate_sample,
)

finite = st.floats(-800, 800, allow_nan=False)


def _pair(n=6, ops=CONV_OPS):
    return [make_conv_template(n, ops, k) for k in ("conv_normal", "conv_reduction")]


def test_policy_shapes_for_reference_spaces():
    ps = init_policy_set(_pair())
    for kind in ("conv_normal", "conv_reduction"):
        assert [len(ps.node_logits(kind, n)) for n in (2, 3, 4, 5)] == [1, 3, 6, 10]
        assert len(ps.edge_slices[kind]) == 14
        assert all(len(ps.edge_logits(kind, e)) == 7 for e in ps.edge_slices[kind])
    rec = init_policy_set([make_recurrent_template(9)])
    assert [len(rec.node_logits("recurrent", n)) for n in range(3, 11)] == list(range(1, 9))
    assert not ps.logits.any() and not rec.logits.any()


def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=1e-15)
    np.testing.assert_allclose(softmax([math.log(2), 0]), [2 / 3, 1 / 3], rtol=1e-15)
    p = softmax([1000, 0])
    assert p[0] == 1.0 and 0 <= p[1] < 1e-300
    with pytest.raises(PolicyError):
        softmax([])
    with pytest.raises(PolicyError):
        softmax([0, np.inf])


@given(st.lists(finite, min_size=1, max_size=8), st.floats(0.25, 4))
@settings(max_examples=100, deadline=None)
def test_softmax_matches_arbitrary_precision(logits, temperature):
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(z) / temperature) for z in logits]
        exact = [float(v / mpmath.fsum(e)) for v in e]
    np.testing.assert_allclose(softmax(logits, temperature), exact, rtol=1e-12, atol=1e-300)
    assert abs(softmax(logits, temperature).sum() - 1) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3))
@settings(max_examples=100, deadline=None)
def test_shift_invariance(logits, c):
    a, b = softmax(logits), softmax(np.array(logits) + c)
    assert np.max(np.abs(a - b)) <= 1e-12
    np.testing.assert_allclose(np.exp(log_softmax(logits)), a, rtol=1e-9, atol=1e-300)


def test_sampling_frequencies_monte_carlo():
    ps = init_policy_set([make_conv_template(4)])
    rng = np.random.default_rng(0)
    draws = np.array([sample_structure(ps, "conv_normal", rng)[3] for _ in range(30000)])
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.all(np.abs(freq - 1 / 3) <= 0.02)


def test_edge_sampling_frequencies_monte_carlo():
    t = make_conv_template(3)
    ps = init_policy_set([t])
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(CONV_OPS, 0)
    for _ in range(35000):
        for op in sample_operations(ps, t.kind, {2: 0}, rng).values():
            counts[op] += 1
    freq = np.array(list(counts.values())) / 70000
    assert np.all(np.abs(freq - 1 / 7) <= 0.01)


def test_shifted_logits_give_identical_samples():
    ps = init_policy_set(_pair(5))
    rng = np.random.default_rng(2)
    ps.logits[:] = rng.normal(size=ps.logits.shape)
    shifted = ps.copy()
    for kind in shifted.kinds:
        for sl in list(shifted.node_slices[kind].values()) + list(shifted.edge_slices[kind].values()):
            shifted.logits[sl] += 3.0
    a = [sample_model(ps, np.random.default_rng(s)) for s in range(50)]
    b = [sample_model(shifted, np.random.default_rng(s)) for s in range(50)]
    assert a == b


def test_forced_logit_always_chosen():
    ps = init_policy_set([make_conv_template(4)])
    ps.logits[ps.node_slices["conv_normal"][3]] = [0, 50, 0]
    rng = np.random.default_rng(3)
    assert all(sample_structure(ps, "conv_normal", rng)[3] == 1 for _ in range(1000))


def test_same_seed_same_sequence():
    ps = init_policy_set(_pair())
    a = [sample_model(ps, r) for r in [np.random.default_rng(9)] for _ in range(20)]
    b = [sample_model(ps, r) for r in [np.random.default_rng(9)] for _ in range(20)]
    assert a == b


def test_decoupled_operation_sampling():
    t = make_conv_template(6)
    ps = init_policy_set([t])
    rng = np.random.default_rng(4)
    structure = sample_structure(ps, t.kind, rng)
    ops = sample_operations(ps, t.kind, structure, rng)
    assert len(ops) == 8
    chosen = {e for n, idx in structure.items() for e in ps.combos[t.kind][n][idx]}
    assert set(ops) == chosen
    rec = make_recurrent_template(9)
    s = sample_architecture(init_policy_set([rec]), "recurrent", rng)
    assert len(s.edges) == 8 and validate_sample(rec, s)


def test_reproduce_a_forced_cell():
    t = make_conv_template(5, CONV_OPS[:3])
    ps = init_policy_set([t])
    target = ArchitectureSample.decode(
        "conv_normal", "0>2:sep_conv_5x5 1>2:sep_conv_3x3 0>3:sep_conv_3x3 2>3:dil_sep_conv_3x3 2>4:sep_conv_5x5 3>4:sep_conv_3x3"
    )
    for node, edges in target.structure().items():
        ps.logits[ps.node_slices[t.kind][node]][ps.combos[t.kind][node].index(edges)] = 60
    for edge, op in target.edges:
        ps.logits[ps.edge_slices[t.kind][edge]][t.op_set.index(op)] = 60
    assert sample_architecture(ps, t.kind, np.random.default_rng(0)) == target
    assert abs(log_prob(ps, target)) < 1e-20


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_any_seed_gives_valid_samples(seed):
    templates = _pair(6) + [make_recurrent_template(9)]
    ps = init_policy_set(templates)
    rng = np.random.default_rng(seed)
    ps.logits[:] = rng.normal(0, 3, ps.logits.shape)
    model = sample_model(ps, rng)
    assert all(validate_sample(t, model[t.kind]) for t in templates)


def test_tiny_space_coverage_and_uniform_log_prob():
    t = make_conv_template(3, CONV_OPS[:2])
    ps = init_policy_set([t])
    rng = np.random.default_rng(5)
    seen = {sample_architecture(ps, t.kind, rng).encode() for _ in range(10_000)}
    assert len(seen) == 4
    for a in iter_architectures(t):
        assert log_prob(ps, a) == pytest.approx(math.log(1 / 4), abs=1e-15)


@given(st.one_of(
    st.builds(make_conv_template, st.integers(3, 5), st.integers(1, 3).map(lambda k: CONV_OPS[:k])),
    st.builds(make_recurrent_template, st.integers(2, 5), st.integers(1, 4).map(lambda k: RECURRENT_ACTS[:k])),
), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_exhaustive_normalization(t, seed):
    if count_architectures(t) > 10_000:
        return
    rng = np.random.default_rng(seed)
    ps = init_policy_set([t], temperature=float(rng.uniform(0.5, 2)))
    ps.logits[:] = rng.normal(0, 2, ps.logits.shape)
    total = math.fsum(math.exp(log_prob(ps, a)) for a in iter_architectures(t))
    assert abs(total - 1) <= 1e-9


def test_reinforce_closed_forms():
    t = make_recurrent_template(2, ["tanh", "relu"])
    ps = init_policy_set([t])
    s = ArchitectureSample("recurrent", (((2, 3), "tanh"),))
    g = reinforce_grad(ps, s, 1.0)
    assert g[ps.edge_slices["recurrent"][(2, 3)]].tolist() == [0.5, -0.5]
    assert not reinforce_grad(ps, s, 0.0).any()
    with pytest.raises(PolicyError):
        reinforce_grad(ps, s, float("nan"))
    with pytest.raises(PolicyError):
        log_prob(ps, ArchitectureSample("recurrent", (((2, 3), "sigmoid"),)))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_unselected_edges_get_zero_gradient(seed):
    rng = np.random.default_rng(seed)
    t = make_conv_template(6)
    ps = init_policy_set([t])
    ps.logits[:] = rng.normal(size=ps.logits.shape)
    s = sample_architecture(ps, t.kind, rng)
    g = reinforce_grad(ps, s, float(rng.normal()))
    selected = set(s.ops())
    for edge, sl in ps.edge_slices[t.kind].items():
        if edge not in selected:
            assert not g[sl].any()


def test_adam_null_and_first_steps():
    ps = init_policy_set([make_conv_template(4)])
    state = AdamState.for_policies(ps)
    adam_step(ps, np.zeros(ps.size), state, 0.1)
    assert state.t == 1 and not ps.logits.any()
    state = AdamState.for_policies(ps)
    g = np.random.default_rng(0).normal(size=ps.size)
    before = ps.logits.copy()
    adam_step(ps, g, state, 0.01)
    np.testing.assert_allclose(ps.logits - before, 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    with pytest.raises(PolicyError):
        adam_step(ps, np.zeros(3), state, 0.01)


def test_two_arm_bandit_converges():
    t = make_recurrent_template(2, ["tanh", "relu"])
    ps = init_policy_set([t])
    state = AdamState.for_policies(ps)
    rng = np.random.default_rng(0)
    sl = ps.edge_slices["recurrent"][(2, 3)]
    baseline = None
    for step in range(500):
        s = sample_model(ps, rng)
        r = 1.0 if s["recurrent"].edges[0][1] == "tanh" else 0.0
        adv = 0.0 if baseline is None else r - baseline
        baseline = r if baseline is None else 0.95 * baseline + 0.05 * r
        adam_step(ps, reinforce_grad(ps, s, adv), state, 0.1)
        if softmax(ps.logits[sl])[0] > 0.99:
            break
    assert softmax(ps.logits[sl])[0] > 0.99
    assert step < 500


def test_policy_set_round_trip():
    ps = init_policy_set(_pair(5) + [make_recurrent_template(4)], temperature=1.5)
    ps.logits[:] = np.random.default_rng(0).normal(size=ps.size)
    back = PolicySet.from_dict(ps.to_dict())
    assert np.array_equal(back.logits, ps.logits)
    assert back.temperature == 1.5 and back.kinds == ps.kinds
