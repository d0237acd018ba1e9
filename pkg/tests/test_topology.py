import numpy as np
import pytest

from hetero_fdl import topology as tp


def power_iteration_lambda(W, iters=20000, seed=0):
    """Independent oracle: dominant eigenvalue magnitude of W - J/m via
    power iteration with Rayleigh quotients (the all-ones mode deflated)."""
    W = np.asarray(W, dtype=np.float64)
    m = W.shape[0]
    if m == 1:
        return 0.0
    B = W - np.ones((m, m)) / m
    rng = np.random.default_rng(seed)
    v = rng.normal(size=m)
    v -= v.mean()
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = B @ v
        nrm = np.linalg.norm(w)
        if nrm < 1e-300:
            return 0.0
        v = w / nrm
        lam = abs(v @ (B @ v))
    return lam


def six_region():
    return tp.six_region_topology()


def test_six_region_matrix_validates_and_lambda_matches_oracle():
    W = six_region()
    edges = [(0, 1), (0, 4), (1, 5), (2, 3), (3, 5)]
    cm = tp.validate(W, declared_edges=edges)
    assert cm.m == 6
    assert 0.0 < cm.lam < 1.0
    assert cm.lam == pytest.approx(power_iteration_lambda(W), abs=1e-10)


def test_identity_is_disconnected():
    with pytest.raises(tp.Disconnected):
        tp.validate(np.eye(3))


def test_bad_row_sum():
    W = np.eye(2) * 0.9
    with pytest.raises(tp.NotDoublyStochastic):
        tp.validate(W)


def test_not_symmetric():
    W = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    with pytest.raises(tp.NotSymmetric):
        tp.validate(W)


def test_sparsity_violation():
    W = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(tp.SparsityViolation):
        tp.validate(W, declared_edges=[])  # weight on a non-edge
    W4 = tp.metropolis_weights(tp.ring_edges(4), 4).entries
    with pytest.raises(tp.SparsityViolation):
        tp.validate(W4, declared_edges=tp.complete_edges(4))  # declared edge with zero weight


def test_spectral_gap_small_cases():
    assert tp.spectral_gap_lambda(np.array([[0.5, 0.5], [0.5, 0.5]])) == pytest.approx(0.0, abs=1e-12)
    assert tp.spectral_gap_lambda(np.full((4, 4), 0.25)) == pytest.approx(0.0, abs=1e-12)
    assert tp.spectral_gap_lambda(np.array([[1.0]])) == 0.0


def test_ring6_metropolis_lambda():
    cm = tp.metropolis_weights(tp.ring_edges(6), 6)
    assert 0.0 < cm.lam < 1.0
    assert cm.lam == pytest.approx(power_iteration_lambda(cm.entries), abs=1e-10)
    assert cm.lam == pytest.approx(2.0 / 3.0, abs=1e-12)  # 1 - (2/3)(1 - cos 60deg)


def test_metropolis_examples():
    pair = tp.metropolis_weights([(0, 1)], 2)
    np.testing.assert_allclose(pair.entries, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    star = tp.metropolis_weights(tp.star_edges(4), 4)
    np.testing.assert_allclose(star.entries[0, 1:], 0.25, atol=1e-15)
    assert star.entries[0, 0] == pytest.approx(0.25, abs=1e-15)
    for leaf in range(1, 4):
        assert star.entries[leaf, leaf] == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(tp.DisconnectedGraph):
        tp.metropolis_weights([(0, 1), (2, 3)], 4)


def test_metropolis_random_graphs_always_validate():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = int(rng.integers(2, 12))
        edges = set(tp.ring_edges(m)) if m > 1 else set()
        for i in range(m):
            for j in range(i + 1, m):
                if rng.random() < 0.3:
                    edges.add((i, j))
        cm = tp.metropolis_weights(edges, m)
        assert cm.lam < 1.0
        assert cm.lam == pytest.approx(tp.spectral_gap_lambda(cm.entries))


def test_mixing_preserves_mean_and_contracts():
    rng = np.random.default_rng(4)
    cm = tp.validate(six_region())
    for _ in range(100):
        x = rng.normal(size=(6, 5))
        mixed = cm.mix(x)
        np.testing.assert_allclose(mixed.mean(axis=0), x.mean(axis=0), atol=1e-12)
        dev = x - x.mean(axis=0)
        dev_mixed = mixed - mixed.mean(axis=0)
        assert np.linalg.norm(dev_mixed) <= cm.lam * np.linalg.norm(dev) + 1e-10


def test_step_size_bound_examples():
    assert tp.step_size_bound(1.0, 0.0, 1) == pytest.approx(1.0 / 120.0, abs=1e-15)
    assert tp.step_size_bound(1.0, 0.5, 6) == pytest.approx(0.5 / 120.0, abs=1e-15)
    # all nine terms evaluated independently
    L, lam, m = 2.0, 0.3, 4
    one = 1 - lam
    terms = [
        1 / (3 * L),
        np.sqrt(one / (72 * m * L**2)),
        np.sqrt(1 / (24 * m * L**2)),
        0.2,
        1 / (40 * L**2),
        one / (120 * L**2),
        one**2 / 3,
        one / (6 * L),
        np.sqrt(one / (12 * L**2)),
    ]
    assert tp.step_size_bound(L, lam, m) == pytest.approx(min(terms), abs=1e-15)


def test_step_size_bound_vanishes_as_lambda_approaches_one():
    bounds = [tp.step_size_bound(1.0, lam, 6) for lam in (0.0, 0.5, 0.9, 0.99, 0.999999)]
    assert all(b > 0 for b in bounds)
    assert all(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:]))
    assert bounds[-1] < 1e-5
    with pytest.raises(tp.InvalidLambda):
        tp.step_size_bound(1.0, 1.0, 6)
    with pytest.raises(tp.InvalidLambda):
        tp.step_size_bound(0.0, 0.5, 6)


def test_topology_file_round_trip(tmp_path):
    W = six_region()
    path = tmp_path / "w.topo"
    tp.save_topology(W, path)
    np.testing.assert_array_equal(tp.load_topology(path), W)
    bad = tmp_path / "bad.topo"
    bad.write_text("2\n0.5 0.5\n", encoding="utf-8")
    with pytest.raises(tp.BadTopologyFile):
        tp.load_topology(bad)
    bad.write_text("x\n", encoding="utf-8")
    with pytest.raises(tp.BadTopologyFile):
        tp.load_topology(bad)
