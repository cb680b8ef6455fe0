import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unifed.linalg import eigenvalues, smallest_eigenvalue
from unifed.nn import two_layer_init
from unifed.ntk import (DynamicsTrace, arccos_kernel, compare_min_eigenvalues, finite_width_grams,
                        finite_width_limit, gram_infinity, mc_gram, mc_pair_expectations, ntk_instance,
                        same_client_mask, track_dynamics, width_soft_check)


def test_kernel_at_zero_and_pi():
    x = np.array([[0.6, 0.8, 0.0]])
    assert arccos_kernel(x, x)[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert arccos_kernel(x, -x)[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_kernel_orthogonal_and_scaling(rng):
    X = np.eye(2)
    assert arccos_kernel(X)[0, 1] == pytest.approx(1 / (2 * np.pi))
    Y = rng.standard_normal((4, 3))
    assert np.allclose(arccos_kernel(Y, alpha=3.0), 9.0 * arccos_kernel(Y))
    assert np.allclose(arccos_kernel(2 * Y), 4 * arccos_kernel(Y))


def test_kernel_matches_monte_carlo(rng):
    A = rng.standard_normal((10, 8))
    B = rng.standard_normal((10, 8))
    exact = np.array([arccos_kernel(a, b)[0, 0] for a, b in zip(A, B)])
    mean, se = mc_pair_expectations(A, B, samples=200_000, seed=1)
    assert np.all(np.abs(mean - exact) <= 4 * se)


def test_mc_gram_threads_and_chunks_do_not_matter(rng):
    X = rng.standard_normal((5, 3))
    a = mc_gram(X, samples=30_000, seed=2, chunk=10_000, threads=1)
    b = mc_gram(X, samples=30_000, seed=2, chunk=10_000, threads=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_single_client_degeneracy():
    X, cids, _, _ = ntk_instance(1, 6, 5, 0)
    rep = gram_infinity(X, cids)
    assert np.array_equal(rep.G_inf, rep.G_star_inf)
    assert rep.e0 == rep.e0_star


def test_positive_definite_and_ordering():
    for seed in range(10):
        X, cids, _, _ = ntk_instance(3, 4, 5, seed)
        rep = gram_infinity(X, cids)
        assert rep.e0 > 0 and rep.e0_star > 0
        verdict = compare_min_eigenvalues(rep)
        assert verdict.passed


def test_collinear_points_rejected():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        gram_infinity(X, [0, 0, 1])
    with pytest.raises(ValueError):
        gram_infinity(np.zeros((2, 2)), [0, 1], check_collinear=False)


def test_monte_carlo_report_tolerance():
    X, cids, _, _ = ntk_instance(2, 3, 4, 0)
    rep = gram_infinity(X, cids, estimator="monte-carlo", samples=50_000, seed=0)
    assert rep.stderr is not None and rep.numerical_error() > 0
    exact = gram_infinity(X, cids)
    assert np.all(np.abs(rep.G_inf - exact.G_inf) <= 5 * rep.stderr + 1e-12)


def test_instance_is_unit_norm_and_labeled():
    X, cids, covs, y = ntk_instance(3, 4, 6, 2)
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0)
    assert list(np.bincount(cids)) == [4, 4, 4] and len(covs) == 3 and y.shape == (12,)


def test_finite_grams_symmetric_psd():
    X, cids, covs, _ = ntk_instance(2, 3, 4, 0)
    model = two_layer_init(64, 4, 2, 1.0, 0, covs)
    V, G = finite_width_grams(model, X, cids)
    for A in (V, G):
        assert np.allclose(A, A.T)
        assert eigenvalues(A)[0] >= -1e-12
    assert np.all(G[same_client_mask(cids) == 0] == 0)


def test_gamma_scaling():
    X, cids, covs, _ = ntk_instance(2, 3, 4, 1)
    model = two_layer_init(32, 4, 2, 1.0, 1, covs, shared=True)
    V, G = finite_width_grams(model, X, cids)
    scaled = model.copy()
    scaled.gamma = 1.7 * scaled.gamma
    V2, G2 = finite_width_grams(scaled, X, cids)
    assert np.allclose(V2, 1.7**2 * V, rtol=1e-12)
    assert np.array_equal(G2, G)


def test_grams_match_jacobian_products():
    X, cids, covs, _ = ntk_instance(2, 2, 3, 0, shift="anisotropic")
    model = two_layer_init(5, 3, 2, 1.3, 0, covs)
    model.gamma = model.gamma * np.linspace(0.5, 1.5, 10).reshape(5, 2)
    h = 1e-6
    from unifed.nn import two_layer_predict
    cols = []
    for name in ("V", "gamma"):
        A = getattr(model, name)
        for idx in np.ndindex(A.shape):
            keep = A[idx]
            A[idx] = keep + h
            up = two_layer_predict(model, X, cids)
            A[idx] = keep - h
            down = two_layer_predict(model, X, cids)
            A[idx] = keep
            cols.append((up - down) / (2 * h))
    J = np.array(cols).T
    nv = model.V.size
    V, G = finite_width_grams(model, X, cids)
    assert np.max(np.abs(J[:, :nv] @ J[:, :nv].T - V / model.alpha**2)) < 1e-8
    assert np.max(np.abs(J[:, nv:] @ J[:, nv:].T - G)) < 1e-8


def test_limit_closed_form_vs_monte_carlo():
    X, cids, covs, _ = ntk_instance(2, 3, 4, 0)
    exact, _ = finite_width_limit(X, cids, covs)
    mc, se = finite_width_limit(X, cids, covs, samples=200_000, estimator="monte-carlo")
    assert np.all(np.abs(mc - exact) <= 4 * se + 1e-15)


def test_limit_is_independent_of_alpha():
    X, cids, covs, _ = ntk_instance(2, 3, 4, 3)
    limit, _ = finite_width_limit(X, cids, covs)
    for alpha in (0.5, 2.0):
        model = two_layer_init(20_000, 4, 2, alpha, 3, covs, shared=True)
        _, G, se = finite_width_grams(model, X, cids, return_stderr=True)
        assert np.all(np.abs(G - limit) <= 4.5 * se)


def test_dynamics_invariants():
    X, cids, covs, y = ntk_instance(3, 4, 8, 0, severity=2.0)
    model = two_layer_init(256, 8, 3, 1.0, 0, covs)
    trace, final = track_dynamics(model, X, cids, y, 20, 0.5)
    assert len(trace) == 21
    lam = np.array(trace.lambda_min_Lambda)
    bound = np.maximum(trace.lambda_min_V_over_alpha2, trace.lambda_min_G)
    assert np.all(lam >= bound - 1e-10)
    assert np.all(np.diff(trace.loss) <= 1e-12)
    assert not np.array_equal(final.V, model.V)
    csv = trace.to_csv().splitlines()
    assert csv[0] == "step,lambda_min_Lambda,lambda_min_V_over_alpha2,lambda_min_G,loss" and len(csv) == 22


def test_trace_helpers():
    tr = DynamicsTrace(variant="aggregated")
    for t, (lam, loss) in enumerate([(1.0, 4.0), (0.4, 1.0), (0.1, 0.005)]):
        tr.append(t, lam, lam, lam, loss)
    assert tr.fraction_at_least(0.4) == pytest.approx(2 / 3)
    assert tr.first_step_below(0.01) == 2
    assert tr.first_step_below(1e-9) is None
    assert width_soft_check(tr, 0.8) == (pytest.approx(2 / 3), True)
    with pytest.raises(FloatingPointError):
        tr.append(3, float("nan"), 0.0, 0.0, 1.0)


def test_client_specific_training_is_not_slower():
    wins = 0
    for seed in range(5):
        X, cids, covs, y = ntk_instance(3, 4, 8, seed, severity=2.0)
        hits = []
        for shared in (True, False):
            model = two_layer_init(512, 8, 3, 1.0, seed, covs, shared=shared)
            hits.append(track_dynamics(model, X, cids, y, 300, 1.0)[0].first_step_below(0.01))
        agg, spec = hits
        wins += spec is not None and (agg is None or spec <= agg)
    assert wins >= 4


@given(st.integers(2, 4), st.sampled_from([4, 8]), st.sampled_from([5, 10]), st.integers(0, 10**6))
def test_ordering_property(N, M, d, seed):
    X, cids, _, _ = ntk_instance(N, M, d, seed)
    verdict = compare_min_eigenvalues(gram_infinity(X, cids))
    assert verdict.ordering_holds and verdict.block_identity_holds
    assert verdict.block_min == pytest.approx(smallest_eigenvalue(gram_infinity(X, cids).G_star_inf), abs=1e-9)
