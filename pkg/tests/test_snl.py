import json

import numpy as np
import pytest

from cando.canonical import gamma_residual, xi_value
from cando.numerics import finite_difference_jacobian
from cando.snl import (
    GeneratorConfig,
    SnlInstance,
    apply_noise,
    assemble_f,
    assemble_g,
    cross_hessian,
    export_positions_csv,
    generate_instance,
    load_instance,
    rmsd,
    save_instance,
    snl_primal,
    to_canonical,
    to_canonical_fused,
    vstar_value_grad,
)

from conftest import snl_canonical_by_hand


def hand_instance(anchors, e_edges, h_edges=(), truth=None, dim=1):
    anchors = np.asarray(anchors, dtype=float).reshape(-1, dim)
    n_sensors = 1 + max([i for i, _, _ in list(h_edges) + list(e_edges)]
                        + [j for _, j, _ in h_edges] + [0])
    return SnlInstance(
        dim=dim, n_sensors=n_sensors, anchors=anchors,
        h_pairs=np.array([[i, j] for i, j, _ in h_edges], dtype=np.int64).reshape(-1, 2),
        h_dist=np.array([d for _, _, d in h_edges], dtype=float),
        e_pairs=np.array([[i, k] for i, k, _ in e_edges], dtype=np.int64).reshape(-1, 2),
        e_dist=np.array([d for _, _, d in e_edges], dtype=float),
        truth=None if truth is None else np.asarray(truth, dtype=float).reshape(-1, dim))


def one_sensor_1d():
    # Anchor at the origin, measured distance 0.5.
    return hand_instance([[0.0]], e_edges=[(0, 0, 0.5)], truth=[[0.5]])


def xi_snl(inst, x, sigma):
    # Plain sum form of the saddle function, independent of the canonical path.
    lam = inst.kernel.lambda_of(np.asarray(x, dtype=float))
    value, _ = vstar_value_grad(inst, sigma)
    return float(np.asarray(sigma) @ lam - value)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_generate_single_sensor_covers_all_anchors():
    inst = generate_instance(GeneratorConfig(n_sensors=1, dim=2, radio_range=2.0, seed=3))
    assert inst.h_dist.size == 0
    assert inst.e_dist.size == 4
    assert inst.truth.shape == (1, 2)


def test_generate_deterministic_per_seed():
    cfg = GeneratorConfig(n_sensors=40, dim=2, radio_range=0.5, seed=7, max_degree=5)
    assert generate_instance(cfg) == generate_instance(cfg)
    other = generate_instance(GeneratorConfig(n_sensors=40, dim=2, radio_range=0.5, seed=8,
                                              max_degree=5))
    assert other != generate_instance(cfg)


def test_generate_distances_are_true_distances():
    inst = generate_instance(GeneratorConfig(n_sensors=200, dim=2, radio_range=0.3, seed=1))
    d = np.linalg.norm(inst.truth[inst.h_pairs[:, 0]] - inst.truth[inst.h_pairs[:, 1]], axis=1)
    np.testing.assert_array_equal(inst.h_dist, d)
    assert inst.h_dist.max() <= 0.3
    de = np.linalg.norm(inst.truth[inst.e_pairs[:, 0]] - inst.anchors[inst.e_pairs[:, 1]], axis=1)
    np.testing.assert_array_equal(inst.e_dist, de)
    assert snl_primal(inst, inst.truth.ravel()) <= 1e-20


def test_generate_degree_cap_thins_edges():
    base = GeneratorConfig(n_sensors=120, dim=2, radio_range=0.5, seed=2)
    full = generate_instance(base)
    capped = generate_instance(GeneratorConfig(n_sensors=120, dim=2, radio_range=0.5,
                                               seed=2, max_degree=6))
    assert capped.h_dist.size < full.h_dist.size
    full_set = {tuple(p) for p in full.h_pairs}
    assert all(tuple(p) in full_set for p in capped.h_pairs)


def test_generate_paper_scale_edge_count():
    inst = generate_instance(GeneratorConfig(n_sensors=500, dim=2, radio_range=0.5,
                                             seed=0, max_degree=17))
    assert 7000 <= inst.m <= 10500  # calibrated against the reported sizes


def test_instance_validation():
    with pytest.raises(ValueError):
        hand_instance([[0.0]], e_edges=[(0, 0, 0.5), (0, 0, 0.6)])  # duplicate
    with pytest.raises(ValueError):
        hand_instance([[0.0]], e_edges=[(0, 0, -0.5)])  # nonpositive distance
    with pytest.raises(ValueError):
        hand_instance([[0.0]], e_edges=[(0, 0, 0.5)], h_edges=[(1, 0, 0.3)])  # i >= j


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def test_noise_zero_alpha_is_identity():
    inst = generate_instance(GeneratorConfig(n_sensors=10, dim=2, radio_range=1.0, seed=5))
    assert apply_noise(inst, 0.0, seed=1) is inst


def test_noise_clamp_at_one_tenth():
    class ForcedNu:
        def standard_normal(self, size):
            return np.full(size, -2000.0)

    inst = one_sensor_1d()
    noisy = apply_noise(inst, 0.001, seed=ForcedNu())
    assert noisy.e_dist[0] == pytest.approx(0.05)  # factor max(-1, 0.1) = 0.1


def test_noise_factors_within_bounds():
    inst = generate_instance(GeneratorConfig(n_sensors=100, dim=2, radio_range=0.6, seed=9))
    noisy = apply_noise(inst, 0.001, seed=123)
    ratio_h = noisy.h_dist / inst.h_dist
    ratio_e = noisy.e_dist / inst.e_dist
    for r in (ratio_h, ratio_e):
        assert np.all(r >= 0.1) and np.all(r <= 1.1)


def test_noise_requires_truth():
    inst = hand_instance([[0.0]], e_edges=[(0, 0, 0.5)])
    with pytest.raises(ValueError):
        apply_noise(inst, 0.01, seed=0)


# ---------------------------------------------------------------------------
# primal / assemblies
# ---------------------------------------------------------------------------

def test_primal_hand_value_and_nonnegativity():
    inst = one_sensor_1d()
    assert snl_primal(inst, [1.0]) == pytest.approx(0.28125)
    rng = np.random.default_rng(0)
    assert all(snl_primal(inst, rng.standard_normal(1)) >= 0 for _ in range(20))


def test_assemble_g_zero_sigma():
    inst = generate_instance(GeneratorConfig(n_sensors=5, dim=2, radio_range=1.0, seed=1))
    g = assemble_g(inst, np.zeros(inst.m))
    assert g.to_dense() == pytest.approx(np.zeros((inst.n, inst.n)))
    g.validate()


def test_assemble_g_two_sensor_block():
    inst = hand_instance([[0.0]], e_edges=[], h_edges=[(0, 1, 0.5)])
    s = 1.7
    g = assemble_g(inst, [s]).to_dense()
    np.testing.assert_allclose(g, 2.0 * np.array([[s, -s], [-s, s]]))


def test_quadratic_form_identity():
    # 0.5 x^T G x - F^T x + sum_e s_e ||a_k||^2 equals the weighted sum of
    # squared edge lengths, for random x and sigma.
    rng = np.random.default_rng(4)
    inst = generate_instance(GeneratorConfig(n_sensors=8, dim=2, radio_range=1.2, seed=6))
    k = inst.kernel
    anchor_sq = np.einsum("ij,ij->i", k.edge_anchor, k.edge_anchor)
    for _ in range(100):
        x = rng.standard_normal(inst.n)
        sigma = rng.standard_normal(inst.m)
        se = sigma[k.mh:]
        lhs = (0.5 * x @ assemble_g(inst, sigma).matvec(x)
               - assemble_f(inst, se) @ x + se @ anchor_sq)
        lam = k.lambda_of(x)
        rhs = sigma @ lam
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_assemble_f_cases():
    inst = hand_instance([[1.0]], e_edges=[(0, 0, 0.5)])
    np.testing.assert_array_equal(assemble_f(inst, [0.0]), [0.0])
    np.testing.assert_allclose(assemble_f(inst, [3.0]), [6.0])
    origin = hand_instance([[0.0]], e_edges=[(0, 0, 0.5)])
    assert assemble_f(origin, [13.0]) == pytest.approx([0.0])


def test_cross_hessian_columns():
    inst = hand_instance([[0.0]], e_edges=[], h_edges=[(0, 1, 0.5)])
    b = cross_hessian(inst, [0.2, 0.7]).to_dense()
    np.testing.assert_allclose(b[:, 0], [-1.0, 1.0])
    b0 = cross_hessian(inst, [0.4, 0.4]).to_dense()
    np.testing.assert_array_equal(b0[:, 0], [0.0, 0.0])


def test_cross_hessian_matches_fd_of_gradient():
    rng = np.random.default_rng(8)
    inst = generate_instance(GeneratorConfig(n_sensors=6, dim=2, radio_range=1.0, seed=2))
    k = inst.kernel
    for _ in range(5):
        x = rng.standard_normal(inst.n)
        fd = finite_difference_jacobian(lambda s: k.grad_x_xi(x, s), np.zeros(inst.m))
        b = cross_hessian(inst, x).to_dense()
        assert np.abs(b - fd).max() <= 1e-6 * (1 + np.abs(b).max())


def test_vstar_value_grad():
    inst = one_sensor_1d()
    value, grad = vstar_value_grad(inst, [0.0])
    assert value == 0.0
    np.testing.assert_allclose(grad, [0.25])
    value, _ = vstar_value_grad(inst, [1.0])
    assert value == pytest.approx(0.75)
    rng = np.random.default_rng(1)
    for _ in range(20):  # quadratic with identity Hessian: midpoint convexity
        s1, s2 = rng.standard_normal((2, inst.m))
        vm = vstar_value_grad(inst, (s1 + s2) / 2)[0]
        v1 = vstar_value_grad(inst, s1)[0]
        v2 = vstar_value_grad(inst, s2)[0]
        assert vm <= 0.5 * (v1 + v2) + 1e-12


# ---------------------------------------------------------------------------
# gradients of the saddle function (fused path vs finite differences)
# ---------------------------------------------------------------------------

def test_grad_x_matches_fd():
    rng = np.random.default_rng(11)
    inst = generate_instance(GeneratorConfig(n_sensors=5, dim=2, radio_range=1.0, seed=4))
    k = inst.kernel
    for _ in range(5):
        x = rng.standard_normal(inst.n)
        sigma = rng.standard_normal(inst.m)
        analytic = assemble_g(inst, sigma).matvec(x) - assemble_f(inst, sigma[k.mh:])
        np.testing.assert_allclose(analytic, k.grad_x_xi(x, sigma), atol=1e-12)
        fd = finite_difference_jacobian(
            lambda xv: np.array([xi_snl(inst, xv, sigma)]), x)[0]
        assert np.linalg.norm(analytic - fd) <= 1e-6 * (1 + np.linalg.norm(analytic))


def test_grad_sigma_matches_fd():
    rng = np.random.default_rng(12)
    inst = generate_instance(GeneratorConfig(n_sensors=5, dim=2, radio_range=1.0, seed=4))
    for _ in range(5):
        x = rng.standard_normal(inst.n)
        sigma = rng.standard_normal(inst.m)
        _, vgrad = vstar_value_grad(inst, sigma)
        analytic = vgrad - inst.kernel.lambda_of(x)  # -d Xi / d sigma
        fd = finite_difference_jacobian(
            lambda sv: np.array([xi_snl(inst, x, sv)]), sigma)[0]
        assert np.linalg.norm(analytic + fd) <= 1e-6 * (1 + np.linalg.norm(analytic))


# ---------------------------------------------------------------------------
# rmsd
# ---------------------------------------------------------------------------

def test_rmsd_cases():
    truth = np.array([[0.1, 0.2], [0.6, 0.9]])
    assert rmsd(truth.ravel(), truth) == 0.0
    shifted = truth + 0.1
    assert rmsd(shifted.ravel(), truth) == pytest.approx(np.sqrt(0.02))
    swapped = truth[::-1]
    assert rmsd(swapped.ravel(), truth) > 0
    with pytest.raises(ValueError):
        rmsd(truth.ravel(), None)


# ---------------------------------------------------------------------------
# canonical embeddings
# ---------------------------------------------------------------------------

def test_to_canonical_scalar_reduction():
    inst = one_sensor_1d()
    p = to_canonical(inst)
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, s = rng.standard_normal(2)
        # Hand formula for this reduction: s x^2 - s^2/2 - 0.25 s.
        assert xi_value(p, [x], [s]) == pytest.approx(
            s * x * x - 0.5 * s * s - 0.25 * s, abs=1e-12)
    assert xi_value(p, [0.7], [0.0]) == 0.0  # -V*(0)


def test_to_canonical_matches_hand_oracle_and_fused():
    inst = generate_instance(GeneratorConfig(n_sensors=4, dim=2, radio_range=1.5, seed=13))
    dense = to_canonical(inst)
    fused = to_canonical_fused(inst)
    oracle = snl_canonical_by_hand(
        inst.truth, inst.anchors,
        [tuple(p) for p in inst.h_pairs], [tuple(p) for p in inst.e_pairs],
        distances=(list(inst.h_dist), list(inst.e_dist)))
    np.testing.assert_allclose(dense.C, oracle.C, atol=1e-14)
    np.testing.assert_allclose(dense.b, oracle.b, atol=1e-14)
    np.testing.assert_allclose(dense.vstar.q, oracle.vstar.q, atol=1e-14)
    rng = np.random.default_rng(14)
    for _ in range(25):
        x = rng.standard_normal(inst.n)
        s = rng.standard_normal(inst.m)
        gd = gamma_residual(dense, x, s)
        gf = gamma_residual(fused, x, s)
        assert np.abs(gd - gf).max() <= 1e-10 * (1 + np.abs(gd).max())
        assert xi_value(dense, x, s) == pytest.approx(xi_snl(inst, x, s), abs=1e-9)
        assert xi_value(fused, x, s) == pytest.approx(xi_snl(inst, x, s), abs=1e-9)


def test_to_canonical_size_guard():
    inst = generate_instance(GeneratorConfig(n_sensors=40, dim=2, radio_range=0.9, seed=1))
    with pytest.raises(ValueError):
        to_canonical(inst)
    to_canonical_fused(inst)  # fused path has no guard


# ---------------------------------------------------------------------------
# file round trips
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    inst = generate_instance(GeneratorConfig(n_sensors=12, dim=3, radio_range=1.0,
                                             seed=21, noise_factor=0.001, max_degree=9))
    path = tmp_path / "inst.json"
    save_instance(inst, path)
    assert load_instance(path) == inst
    save_instance(inst, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_load_rejects_duplicate_edge(tmp_path):
    inst = one_sensor_1d()
    doc = json.loads((lambda p: (save_instance(inst, p), p.read_text())[1])(tmp_path / "i.json"))
    doc["edges_e"].append(doc["edges_e"][0])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="duplicate"):
        load_instance(bad)


def test_load_without_truth_then_rmsd_errors(tmp_path):
    inst = hand_instance([[0.0]], e_edges=[(0, 0, 0.5)])
    path = tmp_path / "np.json"
    save_instance(inst, path)
    loaded = load_instance(path)
    assert loaded.truth is None
    with pytest.raises(ValueError):
        rmsd(np.zeros(1), loaded.truth)


def test_load_rejects_bad_version_and_garbage(tmp_path):
    p = tmp_path / "v.json"
    p.write_text('{"version": "snl-99"}')
    with pytest.raises(ValueError, match="version"):
        load_instance(p)
    g = tmp_path / "g.json"
    g.write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        load_instance(g)


def test_positions_csv(tmp_path):
    path = tmp_path / "pos.csv"
    export_positions_csv(path, np.array([[0.25, 0.5], [1.0, 2.0]]))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "index,x,y"
    assert lines[1].startswith("0,0.25,0.5")
