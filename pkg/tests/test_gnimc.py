import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imc.baselines import _block_map
from imc.gnimc import (
    GnimcConfig,
    Termination,
    balance,
    factored_map,
    gnimc_step,
    kernel_basis,
    least_squares_map,
    least_squares_matrix,
    observed_entries,
    preconditioned_condition_number,
    remove_kernel_component,
    solve,
)
from imc.initialization import balanced_split, spectral_init
from imc.linops import adjoint_mismatch, qr_thin
from imc.problem import FactorPair, RecoveryMetric, generate, observe, sample_omega, samples_for_ratio, with_samples
from oracles import dense_gn_operator, pinv_solve


def _instance(n1, n2, d1, d2, r, kappa, m, seed, sigma=0.0):
    p = generate(n1, n2, d1, d2, r, kappa, seed=seed)
    p = with_samples(p, sample_omega(n1, n2, m, seed + 1))
    return observe(p, sigma, seed + 2)


def _truth_factors(p):
    return balanced_split(p.m_star, p.r)


def _perturbed(p, scale, seed):
    rng = np.random.default_rng(seed)
    f = _truth_factors(p)
    return FactorPair(f.u + scale * rng.standard_normal(f.u.shape), f.v + scale * rng.standard_normal(f.v.shape))


def _true_kernel(u, v):
    # orthonormal basis of {(u R, -v R^T)} as columns in [dU.ravel(), dV.ravel()] order
    r = u.shape[1]
    cols = []
    for i in range(r):
        for j in range(r):
            e = np.zeros((r, r))
            e[i, j] = 1.0
            cols.append(np.concatenate([(u @ e).ravel(), (-v @ e.T).ravel()]))
    return np.linalg.qr(np.column_stack(cols))[0]


def test_fixed_point_at_truth():
    p = _instance(100, 80, 8, 6, 3, 5.0, 300, 0)
    f = _truth_factors(p)
    new, _ = gnimc_step(p, f)
    np.testing.assert_allclose(new.u, f.u, atol=1e-10)
    np.testing.assert_allclose(new.v, f.v, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_kernel_is_annihilated(seed):
    p = _instance(60, 50, 6, 5, 3, 4.0, 400, seed % 1000)
    f = _perturbed(p, 0.3, seed)
    q_u, _ = qr_thin(f.u)
    q_v, _ = qr_thin(f.v)
    rng = np.random.default_rng(seed)
    r = p.r
    rot = rng.standard_normal((r, r))
    pre = factored_map(p.a_rows, p.b_rows, q_u, q_v)
    direction = np.concatenate([(q_u @ rot).ravel(), (-q_v @ rot.T).ravel()])
    assert np.linalg.norm(pre(direction)) <= 1e-12 * np.linalg.norm(direction)
    raw = factored_map(p.a_rows, p.b_rows, f.u, f.v)
    direction = np.concatenate([(f.u @ rot).ravel(), (-f.v @ rot.T).ravel()])
    assert np.linalg.norm(raw(direction)) <= 1e-12 * np.linalg.norm(direction) * np.linalg.norm(f.u) ** 2
    basis = kernel_basis(q_u, q_v)
    gram = np.array([[np.sum(a[0] * b[0]) + np.sum(a[1] * b[1]) for b in basis] for a in basis])
    np.testing.assert_allclose(gram, np.eye(r * r), atol=1e-12)
    for ku, kv in basis:
        assert np.linalg.norm(pre(np.concatenate([ku.ravel(), kv.ravel()]))) <= 1e-12


def test_operators_agree_and_are_adjoint():
    p = _instance(30, 25, 5, 4, 2, 3.0, 200, 3)
    f = _perturbed(p, 0.5, 3)
    rng = np.random.default_rng(3)
    dense = least_squares_matrix(p.a_rows, p.b_rows, f.u, f.v)
    oracle = dense_gn_operator(p.side.A, p.side.B, p.samples.rows, p.samples.cols, f.u, f.v)
    np.testing.assert_allclose(dense, oracle, atol=1e-12)
    op = factored_map(p.a_rows, p.b_rows, f.u, f.v)
    np.testing.assert_allclose(op.to_matrix(), oracle, atol=1e-12)
    np.testing.assert_allclose(least_squares_map(p, f.u, f.v).to_matrix(), oracle / np.sqrt(p.samples.p), atol=1e-10)
    for lin in (op, least_squares_map(p, f.u, f.v), _block_map(p.a_rows, p.b_rows, qr_thin(f.u)[0]),
                _block_map(p.b_rows, p.a_rows, qr_thin(f.v)[0])):
        assert adjoint_mismatch(lin, rng, 20) <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_tiny_step_matches_dense_pseudoinverse(seed):
    p = _instance(12, 12, 4, 4, 2, 2.0, 144, 100 + seed)
    f = _perturbed(p, 0.2, seed)
    new, _ = gnimc_step(p, f, max_inner=1000)
    mat = dense_gn_operator(p.side.A, p.side.B, p.samples.rows, p.samples.cols, f.u, f.v)
    residual = p.y - observed_entries(p.a_rows, p.b_rows, f.u, f.v)
    z = pinv_solve(mat, residual)
    du_ref = z[:8].reshape(4, 2)
    dv_ref = z[8:].reshape(4, 2)
    np.testing.assert_allclose(new.u - f.u, du_ref, atol=1e-8)
    np.testing.assert_allclose(new.v - f.v, dv_ref, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_update_orthogonal_to_kernel(seed):
    p = _instance(80, 60, 6, 5, 3, 3.0, 300, seed % 997)
    f = _perturbed(p, 0.3, seed)
    new, _ = gnimc_step(p, f, max_inner=1000)
    step = np.concatenate([(new.u - f.u).ravel(), (new.v - f.v).ravel()])
    kern = _true_kernel(f.u, f.v)
    assert np.linalg.norm(kern.T @ step) <= 1e-8 * max(1.0, np.linalg.norm(step))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_update_orthogonal_to_kernel_basis_for_orthonormal_factors(seed):
    # with orthonormal factors Q_U = U, Q_V = V and both kernel descriptions coincide
    p = _instance(80, 60, 6, 5, 3, 3.0, 300, seed % 991)
    rng = np.random.default_rng(seed)
    f = FactorPair(qr_thin(rng.standard_normal((6, 3)))[0], qr_thin(rng.standard_normal((5, 3)))[0])
    new, _ = gnimc_step(p, f, max_inner=1000)
    du, dv = new.u - f.u, new.v - f.v
    norm = np.sqrt(np.sum(du**2) + np.sum(dv**2))
    for ku, kv in kernel_basis(f.u, f.v):
        assert abs(np.sum(du * ku) + np.sum(dv * kv)) <= 1e-8 * max(1.0, norm)


def test_remove_kernel_component_is_projection():
    rng = np.random.default_rng(7)
    u, v = rng.standard_normal((6, 2)), rng.standard_normal((5, 2))
    du, dv = rng.standard_normal((6, 2)), rng.standard_normal((5, 2))
    pu, pv = remove_kernel_component(u, v, du, dv)
    qu, qv = remove_kernel_component(u, v, pu, pv)
    np.testing.assert_allclose(qu, pu, atol=1e-12)
    np.testing.assert_allclose(qv, pv, atol=1e-12)
    kern = _true_kernel(u, v)
    assert np.linalg.norm(kern.T @ np.concatenate([pu.ravel(), pv.ravel()])) <= 1e-12


def test_balance_examples():
    rng = np.random.default_rng(8)
    f = balanced_split(rng.standard_normal((6, 5)), 3)
    g = balance(f)
    np.testing.assert_allclose(g.product(), f.product(), atol=1e-12)
    # outputs agree up to an orthogonal r x r rotation
    rot = np.linalg.lstsq(f.u, g.u, rcond=None)[0]
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-10)
    scaled = FactorPair(10 * f.u, f.v / 10)
    h = balance(scaled)
    np.testing.assert_allclose(h.product(), scaled.product(), atol=1e-10)
    assert h.imbalance() <= 1e-10
    raw = FactorPair(rng.standard_normal((7, 2)), 5 * rng.standard_normal((4, 2)))
    k = balance(raw)
    direct = np.array([[sum(raw.u[i, a] * raw.v[j, a] for a in range(2)) for j in range(4)] for i in range(7)])
    np.testing.assert_allclose(k.product(), direct, atol=1e-10)
    assert k.imbalance() <= 1e-10 * np.linalg.norm(direct)


def test_solve_standard_setting():
    p = _instance(1000, 1000, 20, 20, 10, 10.0, samples_for_ratio(20, 20, 10, 1.5), 11)
    x, rep = solve(p, spectral_init(p), truth=RecoveryMetric(p))
    assert rep.final_rel_rmse <= 1e-4
    assert rep.iterations <= 100
    assert rep.termination in (Termination.OBSERVED_RESIDUAL_SMALL, Termination.ESTIMATE_CHANGE_SMALL)
    idx = [rec.index for rec in rep.records]
    assert idx == list(range(len(idx)))


def test_init_at_truth_stops_after_one_iteration():
    p = _instance(200, 150, 8, 6, 3, 2.0, 500, 12)
    _, rep = solve(p, _truth_factors(p), truth=RecoveryMetric(p))
    assert rep.iterations == 1
    assert rep.termination is Termination.OBSERVED_RESIDUAL_SMALL


def test_noisy_run_with_balancing():
    sigma = 1e-2
    p = _instance(1000, 1000, 20, 20, 10, 10.0, 2 * samples_for_ratio(20, 20, 10, 1.0), 13, sigma)
    cfg = GnimcConfig(max_outer_iters=30)
    assert cfg.balancing_for(p)
    _, rep = solve(p, spectral_init(p), cfg, RecoveryMetric(p))
    errs = [rec.rel_rmse for rec in rep.records]
    assert np.isfinite(errs).all()
    floor = sigma * np.sqrt(p.samples.size / p.samples.p) / np.linalg.norm(p.m_star)
    assert rep.final_rel_rmse <= 10 * floor


def test_iterates_keep_full_rank():
    p = _instance(1000, 1000, 20, 20, 10, 10.0, samples_for_ratio(20, 20, 10, 1.5), 14)
    f = spectral_init(p)
    for _ in range(10):
        for m in (f.u, f.v):
            s = np.linalg.svd(m, compute_uv=False)
            assert s[-1] > 1e-10 * s[0]
        f, _ = gnimc_step(p, f, GnimcConfig(inner_iters_low_error=1000))
        if RecoveryMetric(p).rel_rmse(f.u, f.v) < 1e-13:
            break


def test_rank_loss_is_reported():
    p = _instance(50, 40, 5, 4, 2, 1.0, 200, 15)
    bad = FactorPair(np.ones((5, 2)), np.ones((4, 2)))
    x, rep = solve(p, bad)
    assert rep.termination is Termination.INNER_FAILURE
    assert "RankDeficient" in rep.message
    np.testing.assert_array_equal(x.u, bad.u)


def test_limits():
    p = _instance(300, 300, 10, 10, 4, 5.0, 200, 16)
    _, rep = solve(p, spectral_init(p), GnimcConfig(max_outer_iters=2))
    assert rep.iterations <= 2
    _, rep = solve(p, spectral_init(p), GnimcConfig(time_limit=1e-9, max_outer_iters=50))
    assert rep.termination is Termination.TIME_LIMIT and rep.iterations == 1
    _, rep = solve(p, spectral_init(p), GnimcConfig(target_rel_rmse=0.99), RecoveryMetric(p))
    assert rep.termination is Termination.TARGET_REACHED


def test_config_validation():
    for bad in ({"max_outer_iters": 0}, {"inner_iters_low_error": 0}, {"stop_eps": 0.0},
                {"lsqr_tol": -1.0}, {"time_limit": 0.0}):
        with pytest.raises(ValueError):
            GnimcConfig(**bad)
    cfg = GnimcConfig()
    assert cfg.inner_cap(1e-5) == 10 and cfg.inner_cap(1e-3) == 1000


def test_preconditioned_condition_number_full_sampling():
    p = _instance(15, 15, 5, 5, 2, 3.0, 225, 17)
    f = _perturbed(p, 0.3, 17)
    kappa = preconditioned_condition_number(p, f)
    assert 1.0 <= kappa <= np.sqrt(2) + 1e-8
