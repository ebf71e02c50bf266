import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import all_valid_samples, random_net
from catexpand._binio import ContainerError
from catexpand.categorical import CategorySpec, LabeledDataset, encode_batch, make_probe
from catexpand.expansion import (
    ExpansionCoefficients,
    ExpansionError,
    MobiusTable,
    closed_form_expand,
    load_coefficients,
    mobius_coefficient,
    network_evaluator,
    probe_count,
    probe_expand,
    save_coefficients,
    truncated_logits,
    truncated_logits_batch,
    truncation_report,
)
from catexpand.kernels import available_backends
from catexpand.network import NetworkParams, forward_logits


def square_net(spec, W1):
    return NetworkParams(np.atleast_2d(W1).astype(float), np.zeros(1), np.ones((1, 1)), np.zeros(1),
                         "square", spec)


def naive_pair_block(net, i, j):
    """Inclusion-exclusion for one pair by explicit probes, feature by feature."""
    spec = net.spec
    n = spec.category_counts
    z = lambda entries: forward_logits(net, make_probe(spec, entries))
    out = np.zeros((net.class_count, n[i], n[j]))
    for a in range(n[i]):
        for b in range(n[j]):
            out[:, a, b] = z({(i, a), (j, b)}) - z({(i, a)}) - z({(j, b)}) + z(set())
    return out


def test_probe_square_single_feature():
    spec = CategorySpec([2])
    c = probe_expand(network_evaluator(square_net(spec, [[1, 1]])), spec, 2)
    assert c.order0.tolist() == [0.0]
    assert c.order1.tolist() == [[1.0, 1.0]]
    assert c.layout.n_pairs == 0


def test_probe_square_pair_value():
    spec = CategorySpec([2, 2])
    c = probe_expand(network_evaluator(square_net(spec, [[1, 1, 1, 1]])), spec, 2)
    assert np.array_equal(c.block(0, 1), np.full((1, 2, 2), 2.0))


def test_probe_constant_evaluator():
    spec = CategorySpec([2, 3])
    c = probe_expand(lambda x: np.full((x.shape[0], 2), 4.5), spec, 2)
    assert c.order0.tolist() == [4.5, 4.5]
    assert not c.order1.any() and not c.order2.any()


def test_probe_count_exact():
    spec = CategorySpec([2, 3, 1, 2])
    calls = []

    def ev(x):
        calls.append(x.shape[0])
        return x.sum(axis=1, keepdims=True)

    probe_expand(ev, spec, 2, batch_size=3)
    expected = 1 + 8 + (2 * 3 + 2 * 1 + 2 * 2 + 3 * 1 + 3 * 2 + 1 * 2)
    assert sum(calls) == expected == probe_count(spec, 2)


def test_probe_names_bad_probe():
    spec = CategorySpec([2, 2])

    def ev(x):
        out = np.zeros((x.shape[0], 1))
        out[(x[:, 1] == 1) & (x[:, 3] == 1)] = np.nan
        return out

    with pytest.raises(ExpansionError, match=r"\(0, 1\), \(1, 1\)"):
        probe_expand(ev, spec, 2)


def test_closed_form_scalar_oracle():
    spec = CategorySpec([1])
    net = NetworkParams(np.array([[1.0]]), np.array([0.5]), np.array([[2.0]]), np.array([0.1]), "tanh", spec)
    for backend in available_backends():
        c = closed_form_expand(net, 2, backend=backend)
        assert c.order0[0] == pytest.approx(2 * np.tanh(0.5) + 0.1, abs=1e-15)
        assert c.order1[0, 0] == pytest.approx(2 * (np.tanh(1.5) - np.tanh(0.5)), abs=1e-15)


def test_closed_form_zero_output_weights():
    net = random_net(11)
    net.W2[:] = 0
    c = closed_form_expand(net, 2)
    assert np.array_equal(c.order0, net.b2)
    assert not c.order1.any() and not c.order2.any()


@pytest.mark.parametrize("seed", range(12))
def test_both_methods_match_naive_oracle(seed):
    net = random_net(seed)
    oracle = {(i, j): naive_pair_block(net, i, j)
              for i, j in itertools.combinations(range(net.spec.feature_count), 2)}
    methods = [probe_expand(network_evaluator(net), net.spec, 2)]
    methods += [closed_form_expand(net, 2, backend=b) for b in available_backends()]
    for c in methods:
        assert np.allclose(c.order0, forward_logits(net, np.zeros(net.spec.dim)), atol=1e-12)
        for (i, j), block in oracle.items():
            assert np.max(np.abs(c.block(i, j) - block)) < 1e-10


def test_closed_form_thread_count_does_not_change_result():
    rng = np.random.default_rng(1)
    spec = CategorySpec(rng.integers(1, 4, 30))
    net = NetworkParams.initialize(spec, 6, 3, "tanh", seed=2, init_scale=1.0)
    a = closed_form_expand(net, 2, threads=1)
    b = closed_form_expand(net, 2, threads=4)
    assert np.array_equal(a.order2, b.order2)


def test_closed_form_orders_0_and_1():
    net = random_net(4)
    full = closed_form_expand(net, 2)
    c1 = closed_form_expand(net, 1)
    c0 = closed_form_expand(net, 0)
    assert c1.max_order == 1 and c0.max_order == 0
    assert np.array_equal(c1.order1, full.order1)
    assert np.array_equal(c0.order0, full.order0)


def test_mobius_examples():
    spec = CategorySpec([2, 2])
    a, b = spec.index(0, 1), spec.index(1, 0)
    ev = lambda x: (x[:, a] * x[:, b])[:, None]
    assert mobius_coefficient(ev, spec, {(0, 1), (1, 0)})[0] == 1.0
    assert mobius_coefficient(ev, spec, {(0, 1)})[0] == 0.0
    net = random_net(2)
    assert np.allclose(mobius_coefficient(network_evaluator(net), net.spec, []),
                       forward_logits(net, np.zeros(net.spec.dim)))
    with pytest.raises(ExpansionError):
        mobius_coefficient(ev, spec, {(0, 0), (0, 1), (1, 0)}, max_subsets=4)


@pytest.mark.parametrize("seed", range(6))
def test_square_third_order_vanishes(seed):
    rng = np.random.default_rng(seed)
    spec = CategorySpec([2, 3, 2, 2])
    net = NetworkParams(rng.normal(size=(5, spec.dim)), rng.normal(size=5), rng.normal(size=(3, 5)),
                        rng.normal(size=3), "square", spec)
    ev = network_evaluator(net)
    for feats in itertools.combinations(range(4), 3):
        entries = {(f, int(rng.integers(spec.category_counts[f]))) for f in feats}
        assert np.max(np.abs(mobius_coefficient(ev, spec, entries))) < 1e-9


def test_mobius_agrees_with_probe_for_small_sets():
    net = random_net(8)
    ev = network_evaluator(net)
    c = probe_expand(ev, net.spec, 2)
    spec = net.spec
    for a in range(spec.dim):
        f, k = spec.entry_feature[a], spec.entry_category[a]
        assert np.allclose(mobius_coefficient(ev, spec, {(f, k)}), c.order1[:, a], atol=1e-12)
    for i, j in itertools.combinations(range(spec.feature_count), 2):
        blk = c.block(i, j)
        for x, y in itertools.product(range(spec.category_counts[i]), range(spec.category_counts[j])):
            assert np.allclose(mobius_coefficient(ev, spec, {(i, x), (j, y)}), blk[:, x, y], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_mobius_table_matches_direct_coefficients(seed):
    net = random_net(seed)
    ev = network_evaluator(net)
    table = MobiusTable.from_evaluator(ev, net.spec)
    rng = np.random.default_rng(seed)
    feats = [f for f in range(net.spec.feature_count) if rng.random() < 0.6]
    entries = {(f, int(rng.integers(net.spec.category_counts[f]))) for f in feats}
    assert np.allclose(table.coefficient(entries), mobius_coefficient(ev, net.spec, entries), atol=1e-12)


def test_multilinear_witness():
    rng = np.random.default_rng(3)
    spec = CategorySpec([2, 3, 2])
    w0 = rng.normal(size=2)
    w1 = rng.normal(size=(2, spec.dim))
    A = np.zeros((2, spec.dim, spec.dim))
    feat = spec.entry_feature
    mask = feat[:, None] < feat[None, :]
    A[:, mask] = rng.normal(size=(2, mask.sum()))
    ev = lambda x: w0 + x @ w1.T + np.einsum("bd,kde,be->bk", x, A, x)
    c = probe_expand(ev, spec, 2)
    assert np.allclose(c.order0, w0, atol=1e-13)
    assert np.allclose(c.order1, w1, atol=1e-13)
    lay = c.layout
    assert np.allclose(c.order2, A[:, lay.entry_a, lay.entry_b], atol=1e-13)


def naive_truncation(c, sample, order):
    spec = c.spec
    z = c.order0.copy()
    if order >= 1:
        for i, s in enumerate(sample):
            z += c.order1[:, spec.offsets[i] + s]
    if order >= 2:
        for i, j in itertools.combinations(range(spec.feature_count), 2):
            z += c.block(i, j)[:, sample[i], sample[j]]
    return z


@pytest.mark.parametrize("counts", [[2, 2, 3], [5, 6, 5, 4], [1, 1, 1]])
def test_truncated_logits_matches_naive_sum(counts):
    spec = CategorySpec(counts)
    rng = np.random.default_rng(len(counts))
    net = NetworkParams.initialize(spec, 4, 2, "tanh", seed=0, init_scale=1.0)
    c = closed_form_expand(net, 2)
    samples = all_valid_samples(spec)[: 60]
    for order in (0, 1, 2):
        batch = truncated_logits_batch(c, samples, order)
        for s, row in zip(samples, batch):
            assert np.allclose(row, naive_truncation(c, s, order), atol=1e-12)
    assert np.array_equal(truncated_logits(c, samples[0], 0), c.order0)
    with pytest.raises(ExpansionError):
        truncated_logits(closed_form_expand(net, 1), samples[0], 2)
    del rng


@pytest.mark.parametrize("seed", range(8))
def test_square_truncation_is_exact(seed):
    net = random_net(seed, "square")
    c = closed_form_expand(net, 2)
    samples = all_valid_samples(net.spec)
    full = forward_logits(net, encode_batch(samples, net.spec))
    assert np.max(np.abs(truncated_logits_batch(c, samples, 2) - full)) < 1e-8


def test_square_two_feature_example_at_origin_sample():
    spec = CategorySpec([2, 2])
    net = square_net(spec, [[1, 1, 1, 1]])
    c = probe_expand(network_evaluator(net), spec, 2)
    assert truncated_logits(c, [0, 0], 2)[0] == forward_logits(net, encode_batch(np.array([[0, 0]]), spec))[0, 0]


def test_truncation_report_properties():
    rng = np.random.default_rng(0)
    spec = CategorySpec([3, 2, 3])
    samples = all_valid_samples(spec)
    labels = rng.integers(0, 3, len(samples))
    data = LabeledDataset(samples, labels, spec, 3)
    net = NetworkParams.initialize(spec, 5, 3, "square", seed=1, init_scale=1.0)
    rep = truncation_report(net, closed_form_expand(net, 2), data)
    assert rep.full == rep.order2
    net.W2[:] = 0
    net.b2[:] = [0.0, 1.0, 0.5]
    rep = truncation_report(net, closed_form_expand(net, 2), data)
    assert rep.order1 == pytest.approx(np.mean(labels == 1))


def test_coefficient_container_round_trip(tmp_path):
    net = random_net(5)
    c = closed_form_expand(net, 2)
    path = save_coefficients(c, tmp_path / "c.cexp", {"extraction_method": "closed-form"})
    back = load_coefficients(path)
    assert np.array_equal(back.order0, c.order0)
    assert np.array_equal(back.order1, c.order1)
    assert np.array_equal(back.order2, c.order2.astype(np.float32).astype(np.float64))
    assert back.gauge_fixed is False and back.spec == c.spec


def test_coefficient_container_block_layout(tmp_path):
    spec = CategorySpec([2, 3, 2])
    k = 2
    rng = np.random.default_rng(0)
    c = ExpansionCoefficients(spec, rng.normal(size=k), rng.normal(size=(k, spec.dim)),
                              rng.normal(size=(k, 2 * 3 + 2 * 2 + 3 * 2)))
    raw = save_coefficients(c, tmp_path / "c.cexp").read_bytes()
    expected = np.concatenate([c.block(i, j).ravel() for i, j in [(0, 1), (0, 2), (1, 2)]]).astype("<f4")
    assert raw.endswith(expected.tobytes())


def test_coefficient_container_orders(tmp_path):
    net = random_net(6)
    for order in (0, 1):
        c = closed_form_expand(net, order)
        back = load_coefficients(save_coefficients(c, tmp_path / f"c{order}.cexp"))
        assert back.max_order == order


def test_coefficient_container_errors(tmp_path):
    raw = save_coefficients(closed_form_expand(random_net(7), 2), tmp_path / "c.cexp").read_bytes()
    (tmp_path / "t.cexp").write_bytes(raw[:-2])
    with pytest.raises(ContainerError) as info:
        load_coefficients(tmp_path / "t.cexp")
    assert info.value.offset is not None
    (tmp_path / "v.cexp").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ContainerError, match="version"):
        load_coefficients(tmp_path / "v.cexp")
    (tmp_path / "m.cexp").write_bytes(b"CNET" + raw[4:])
    with pytest.raises(ContainerError):
        load_coefficients(tmp_path / "m.cexp")
