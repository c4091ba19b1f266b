import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from seizurenet import dimred
from seizurenet.dimred import (
    DimredConfig, IicaConfig, RankDeficientError, activation_log_ratio, fit_dimred, fit_iica, fit_pca,
    gibbs_sweep, init_state, pipeline_from_bytes, pipeline_to_bytes, sample_two_piece, transform,
    two_piece_params, whiten,
)

from oracles import best_abs_corr, jacobi_eigenvalues, sample_covariance


def mixed_data(seed, d=5, n=300):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    return a @ rng.standard_normal((d, n)) + rng.standard_normal((d, 1))


def sparse_problem(seed, p=4, k=2, n=500, noise=0.05, active=0.3):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((p, k))
    x = rng.laplace(size=(k, n)) * (rng.random((k, n)) < active)
    return x, g @ x + noise * rng.standard_normal((p, n))


# ---- PCA whitening ----

@pytest.mark.parametrize("seed", range(5))
def test_eigenvalues_match_jacobi(seed):
    x = mixed_data(seed, d=4, n=60)
    model = fit_pca(x, 4)
    oracle = jacobi_eigenvalues(sample_covariance(x))
    assert np.max(np.abs(model.eigenvalues - oracle)) < 1e-8


@given(st.integers(0, 10_000), st.integers(2, 6))
@settings(max_examples=30)
def test_whitened_covariance_is_identity(seed, d):
    x = mixed_data(seed, d=d, n=200)
    y = whiten(fit_pca(x, d), x)
    assert np.max(np.abs(np.cov(y) - np.eye(d))) < 1e-8
    assert np.max(np.abs(y.mean(axis=1))) < 1e-8


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_whitening_ignores_channel_offsets(seed):
    x = mixed_data(seed, d=3)
    shift = np.random.default_rng(seed).standard_normal((3, 1)) * 100
    a = whiten(fit_pca(x, 3), x)
    b = whiten(fit_pca(x + shift, 3), x + shift)
    assert np.allclose(a, b, atol=1e-8)


def test_truncated_projection_keeps_leading_axes():
    x = mixed_data(1, d=5)
    full, part = fit_pca(x, 5), fit_pca(x, 2)
    assert np.allclose(part.eigenvalues, full.eigenvalues[:2])
    assert np.allclose(part.projection_w, full.projection_w[:2])
    assert np.all(np.diff(full.eigenvalues) <= 0)


def test_eigenvector_sign_convention():
    model = fit_pca(mixed_data(2), 5)
    w = model.projection_w
    pivots = w[np.arange(5), np.argmax(np.abs(w), axis=1)]
    assert np.all(pivots > 0)


def test_rank_deficient_raises():
    x = mixed_data(0, d=3)
    x = np.vstack([x, x[0]])
    with pytest.raises(RankDeficientError) as info:
        fit_pca(x, 4)
    assert info.value.component == 3


def test_pca_argument_errors():
    with pytest.raises(ValueError):
        fit_pca(np.zeros((3, 1)), 1)
    with pytest.raises(ValueError):
        fit_pca(mixed_data(0, d=3), 4)
    with pytest.raises(ValueError):
        fit_pca(np.full((2, 5), np.nan), 1)


# ---- two-piece conditional ----

def _posterior(proj, gg, sigma_e2):
    """Unnormalized conditional density of one active amplitude: Gaussian likelihood times Laplace(0, 1)."""
    def dens(x):
        return math.exp(-(gg * x * x - 2 * proj * x) / (2 * sigma_e2) - abs(x))
    return dens


CASES = [(0.3, 1.0, 0.01), (-0.05, 2.0, 0.2), (0.0, 1.0, 1.0), (4.0, 0.5, 0.5), (-2.0, 3.0, 0.05)]


@pytest.mark.parametrize("proj,gg,sigma_e2", CASES)
def test_two_piece_mean_matches_quadrature(proj, gg, sigma_e2):
    dens = _posterior(proj, gg, sigma_e2)
    span = 12 * math.sqrt(sigma_e2 / gg) + abs(proj / gg) + 2
    opts = dict(points=[0.0], limit=200)
    z = integrate.quad(dens, -span, span, **opts)[0]
    mean = integrate.quad(lambda x: x * dens(x), -span, span, **opts)[0] / z
    var = integrate.quad(lambda x: x * x * dens(x), -span, span, **opts)[0] / z - mean**2
    mu_p, mu_m, s2, lw_pos, lw_neg = two_piece_params(np.full(100_000, proj), gg, sigma_e2)
    draws = sample_two_piece(mu_p, mu_m, s2, np.random.default_rng(7), lw_pos, lw_neg)
    se = math.sqrt(var / draws.size)
    assert abs(draws.mean() - mean) < 3 * se + 1e-12
    p_pos = integrate.quad(dens, 0, span, limit=200)[0] / z
    assert np.mean(draws > 0) == pytest.approx(p_pos, abs=4 * math.sqrt(p_pos * (1 - p_pos) / draws.size) + 1e-9)


@pytest.mark.parametrize("proj,gg,sigma_e2", CASES)
def test_activation_ratio_matches_quadrature(proj, gg, sigma_e2):
    # ratio of marginal likelihoods z=1 vs z=0: integral of exp(-(gg x^2 - 2 proj x) / (2 s)) * 0.5 exp(-|x|)
    dens = _posterior(proj, gg, sigma_e2)
    span = 12 * math.sqrt(sigma_e2 / gg) + abs(proj / gg) + 2
    ratio = 0.5 * integrate.quad(dens, -span, span, points=[0.0], limit=200)[0]
    _, _, s2, lw_pos, lw_neg = two_piece_params(proj, gg, sigma_e2)
    assert float(activation_log_ratio(lw_pos, lw_neg, s2)) == pytest.approx(math.log(ratio), abs=1e-7)


def test_two_piece_extreme_means_stay_finite():
    mu_p, mu_m, s2, lw_pos, lw_neg = two_piece_params(np.array([-1e4, 1e4, 0.0]), 1.0, 1e-4)
    draws = sample_two_piece(mu_p, mu_m, s2, np.random.default_rng(0), lw_pos, lw_neg)
    assert np.all(np.isfinite(draws))
    assert draws[0] < 0 < draws[1]


# ---- sampler ----

def test_sweep_preserves_state_invariants():
    _, y = sparse_problem(0)
    rng = np.random.default_rng(0)
    state = init_state(4, 500, 3, rng)
    for _ in range(5):
        state = gibbs_sweep(state, y, rng)
        assert set(np.unique(state.z)) <= {0, 1}
        assert np.all(state.x_src[state.z == 0] == 0)
        assert np.all((state.pi > 0) & (state.pi < 1))
        assert state.g.shape == (4, 3)


def test_degenerate_column_is_reinitialized():
    _, y = sparse_problem(1)
    rng = np.random.default_rng(1)
    state = init_state(4, 500, 2, rng)
    g = state.g.copy()
    g[:, 1] = 0.0
    out = gibbs_sweep(replace(state, g=g), y, rng)
    assert out.reinit_count == 1
    assert np.all(np.isfinite(out.g))


def test_fit_is_seed_deterministic():
    _, y = sparse_problem(2)
    cfg = IicaConfig(sweeps=20, burn_in=5, seed=3)
    a, b = fit_iica(y, 2, cfg), fit_iica(y, 2, cfg)
    assert np.array_equal(a.g, b.g) and np.array_equal(a.z, b.z)
    assert len(a.loglik_trace) == 20


def test_sampler_config_errors():
    with pytest.raises(ValueError):
        fit_iica(np.zeros((2, 10)), 1, IicaConfig(sweeps=5, burn_in=5))
    with pytest.raises(ValueError):
        fit_iica(np.zeros((2, 10)), 0)


def test_recovery_single_problem():
    x, y = sparse_problem(0)
    state = fit_iica(y, 2, IicaConfig(sweeps=1000, burn_in=200, sigma_e2=0.01, seed=99))  # seed independent of data
    assert best_abs_corr(x, state.sources()) >= 0.9


@pytest.mark.parametrize("seed", range(3))
def test_dense_gaussian_mixing_matches_least_squares(seed):
    # with every source on, G given the sources is a linear regression; compare per column
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 500)) + 0.05 * rng.standard_normal((4, 500))
    state = fit_iica(y, 2, IicaConfig(sweeps=200, burn_in=50, sigma_e2=0.01, seed=seed + 7))
    x = state.sources()
    g_ls = np.linalg.lstsq(x.T, y.T, rcond=None)[0].T
    err = np.linalg.norm(state.g - g_ls, axis=0) / np.linalg.norm(g_ls, axis=0)
    assert np.all(err < 0.1)


def test_single_sample_runs():
    state = fit_iica(np.array([[0.3], [-1.2], [0.5]]), 2, IicaConfig(sweeps=10, burn_in=2))
    assert set(state.active_counts.tolist()) <= {0, 1}


# ---- full pipeline ----

def make_pipeline(seed=0, d=6, p=4, m=2):
    rng = np.random.default_rng(seed)
    x = rng.laplace(size=(p, 800)) * (rng.random((p, 800)) < 0.4)
    data = rng.standard_normal((d, p)) @ x + 0.05 * rng.standard_normal((d, 800))
    return data, fit_dimred(data, DimredConfig(p=p, m=m, sweeps=30, burn_in=10, seed=seed))


def test_transform_shape_and_order():
    data, pipe = make_pipeline()
    out = transform(pipe, data)
    assert out.shape == (2, data.shape[1])
    counts = pipe.iica.active_counts[pipe.source_order]
    assert np.all(np.diff(counts) <= 0)
    assert np.allclose(transform(pipe, data, m=4)[:2], out)
    with pytest.raises(ValueError):
        transform(pipe, data, m=5)


def test_fit_dimred_rejects_m_above_k():
    with pytest.raises(ValueError):
        fit_dimred(mixed_data(0), DimredConfig(p=3, k=2, m=3))


def test_pipeline_bytes_round_trip(tmp_path):
    data, pipe = make_pipeline()
    raw = pipeline_to_bytes(pipe)
    back = pipeline_from_bytes(raw)
    assert pipeline_to_bytes(back) == raw
    assert np.array_equal(transform(back, data), transform(pipe, data))
    dimred.save_pipeline(pipe, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").read_bytes() == raw


def test_pipeline_bytes_errors():
    _, pipe = make_pipeline()
    raw = pipeline_to_bytes(pipe)
    with pytest.raises(ValueError):
        pipeline_from_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        pipeline_from_bytes(raw[:-1])
    with pytest.raises(ValueError):
        pipeline_from_bytes(b"XXXX" + raw[4:])


def test_transform_of_training_data_tracks_sampler_sources():
    rng = np.random.default_rng(4)
    x = rng.laplace(size=(2, 600)) * (rng.random((2, 600)) < 0.5)
    data = rng.standard_normal((5, 2)) @ x + 0.05 * rng.standard_normal((5, 600))
    pipe = fit_dimred(data, DimredConfig(p=2, m=2, sweeps=300, burn_in=50, seed=11))
    out = transform(pipe, data)
    stored = pipe.iica.sources()[pipe.source_order]
    for a, b in zip(out, stored):
        assert abs(np.corrcoef(a, b)[0, 1]) >= 0.95
