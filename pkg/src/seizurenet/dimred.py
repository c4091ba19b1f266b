"""Channel-space dimensionality reduction: PCA whitening followed by a
K-truncated infinite ICA fitted with Gibbs sampling.

Generative model on whitened data ``y`` (P x N)::

    y_i = G (x_i * z_i) + e_i,   e_i ~ N(0, sigma_e2 I)
    x_ki ~ Laplace(0, 1),  z_ki ~ Bernoulli(pi_k),  pi_k ~ Beta(alpha/K, 1)
    G[p, k] ~ N(0, 1)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_ndtr, ndtri_exp

EIG_FLOOR = 1e-12
DEGENERATE_GG = 1e-12
PI_EPS = 1e-12

MAGIC = b"DRED"
VERSION = 1


class RankDeficientError(ValueError):
    def __init__(self, component: int, eigenvalue: float):
        super().__init__(f"principal component {component} has eigenvalue {eigenvalue:.3e} below {EIG_FLOOR:g}")
        self.component = component
        self.eigenvalue = eigenvalue


def _as_matrix(data, name="data") -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name} contains non-finite values")
    return data


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray          # (D,)
    eigenvalues: np.ndarray   # (P,), descending
    projection_w: np.ndarray  # (P, D), rows are eigenvectors / sqrt(eigenvalue)

    @property
    def d_in(self) -> int:
        return self.mean.shape[0]

    @property
    def p_out(self) -> int:
        return self.eigenvalues.shape[0]


def fit_pca(data, p: int) -> PcaModel:
    """Fit a whitening projection onto the ``p`` leading principal axes of a D x N matrix."""
    data = _as_matrix(data)
    d, n = data.shape
    if n < 2:
        raise ValueError("need at least two samples to estimate a covariance")
    if not 1 <= p <= d:
        raise ValueError(f"cannot keep {p} components of {d}-dimensional data")
    mean = data.mean(axis=1)
    centered = data - mean[:, None]
    cov = centered @ centered.T / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:p]
    vals, vecs = vals[order], vecs[:, order]
    for j, v in enumerate(vals):
        if v < EIG_FLOOR:
            raise RankDeficientError(j, float(v))
    # fix eigenvector signs so the largest-magnitude entry is positive
    pivots = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(p)]
    vecs = vecs * np.sign(pivots)
    w = vecs.T / np.sqrt(vals)[:, None]
    return PcaModel(mean=mean, eigenvalues=vals.copy(), projection_w=np.ascontiguousarray(w))


def whiten(model: PcaModel, data) -> np.ndarray:
    data = _as_matrix(data)
    if data.shape[0] != model.d_in:
        raise ValueError(f"data has {data.shape[0]} rows, model expects {model.d_in}")
    return model.projection_w @ (data - model.mean[:, None])


# --------------------------------------------------------------------------
# Infinite ICA
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IicaConfig:
    sweeps: int = 200
    burn_in: int = 50
    alpha: float = 1.0
    sigma_e2: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if not self.sweeps > self.burn_in >= 0:
            raise ValueError(f"need sweeps > burn_in >= 0, got sweeps={self.sweeps} burn_in={self.burn_in}")
        if self.alpha <= 0 or self.sigma_e2 <= 0:
            raise ValueError("alpha and sigma_e2 must be positive")


@dataclass(frozen=True, eq=False)
class IicaState:
    g: np.ndarray       # (P, K) mixing matrix
    x_src: np.ndarray   # (K, N) source amplitudes, zero where inactive
    z: np.ndarray       # (K, N) binary activity mask, uint8
    pi: np.ndarray      # (K,) activity rates
    sigma_e2: float
    alpha: float
    reinit_count: int = 0
    loglik_trace: tuple = ()
    g_mean: np.ndarray | None = field(default=None, repr=False)

    @property
    def k_trunc(self) -> int:
        return self.g.shape[1]

    @property
    def n(self) -> int:
        return self.x_src.shape[1]

    @property
    def active_counts(self) -> np.ndarray:
        """m_k: number of samples in which source k is switched on."""
        return self.z.sum(axis=1, dtype=np.int64)

    def sources(self) -> np.ndarray:
        return self.x_src * self.z

    def reconstruction(self) -> np.ndarray:
        return self.g @ self.sources()


def init_state(p: int, n: int, k: int, rng: np.random.Generator, alpha=1.0, sigma_e2=0.01) -> IicaState:
    g = rng.standard_normal((p, k))
    z = (rng.random((k, n)) < 0.5).astype(np.uint8)
    x = rng.standard_normal((k, n)) * z
    return IicaState(g=g, x_src=x, z=z, pi=np.full(k, 0.5), sigma_e2=float(sigma_e2), alpha=float(alpha))


def two_piece_params(proj, gg: float, sigma_e2: float):
    """Parameters of the conditional posterior of an active source amplitude.

    ``proj`` is g_k' e_ki with e_ki the residual excluding source k. Returns
    (mu_plus, mu_minus, sigma2, log_w_pos, log_w_neg) where the log weights
    are the unnormalized masses of the x > 0 and x < 0 pieces, dropping the
    shared factor sqrt(2 pi sigma2).
    """
    proj = np.asarray(proj, dtype=np.float64)
    mu_plus = (proj + sigma_e2) / gg
    mu_minus = (proj - sigma_e2) / gg
    sigma2 = sigma_e2 / gg
    log_w_pos, log_w_neg = _piece_log_weights(mu_plus, mu_minus, math.sqrt(sigma2))
    return mu_plus, mu_minus, sigma2, log_w_pos, log_w_neg


def _piece_log_weights(mu_plus, mu_minus, s):
    pos_tail = log_ndtr(mu_minus / s)   # log P(N(mu_minus, s^2) > 0)
    neg_tail = log_ndtr(-mu_plus / s)   # log P(N(mu_plus, s^2) < 0)
    return mu_minus**2 / (2 * s * s) + pos_tail, mu_plus**2 / (2 * s * s) + neg_tail


def activation_log_ratio(log_w_pos, log_w_neg, sigma2: float):
    """log p(e | z=1) - log p(e | z=0) with the Laplace(0, 1) amplitude integrated out."""
    return np.logaddexp(log_w_pos, log_w_neg) + math.log(0.5) + 0.5 * math.log(2 * math.pi * sigma2)


def sample_two_piece(mu_plus, mu_minus, sigma2, rng: np.random.Generator, log_w_pos=None, log_w_neg=None):
    """Draw from the density proportional to N(x; mu_minus, sigma2) on x > 0
    and N(x; mu_plus, sigma2) on x < 0."""
    mu_plus, mu_minus = np.broadcast_arrays(np.asarray(mu_plus, float), np.asarray(mu_minus, float))
    s = math.sqrt(sigma2)
    if log_w_pos is None:
        log_w_pos, log_w_neg = _piece_log_weights(mu_plus, mu_minus, s)
    choose_pos = rng.random(mu_plus.shape) < expit(log_w_pos - log_w_neg)
    log_v = np.log1p(-rng.random(mu_plus.shape))  # log of a uniform on (0, 1]
    # inverse CDF in log space: the tail mass beyond zero times v, mapped back
    pos = mu_minus - s * ndtri_exp(log_ndtr(mu_minus / s) + log_v)
    neg = mu_plus + s * ndtri_exp(log_ndtr(-mu_plus / s) + log_v)
    return np.where(choose_pos, np.maximum(pos, 0.0), np.minimum(neg, 0.0))


def log_likelihood(state: IicaState, y) -> float:
    r = y - state.reconstruction()
    n_el = r.size
    return float(-0.5 * np.sum(r * r) / state.sigma_e2 - 0.5 * n_el * math.log(2 * math.pi * state.sigma_e2))


def gibbs_sweep(state: IicaState, y, rng: np.random.Generator) -> IicaState:
    """One full sweep over (z, x) for every source and sample, then G and pi."""
    y = np.asarray(y, dtype=np.float64)
    p, k_trunc = state.g.shape
    if y.shape != (p, state.n):
        raise ValueError(f"y has shape {y.shape}, state expects {(p, state.n)}")
    n = state.n
    sigma_e2 = state.sigma_e2
    g = state.g.copy()
    s = state.x_src * state.z
    z = state.z.copy()
    pi = state.pi.copy()
    reinit = state.reinit_count

    resid = y - g @ s
    for k in range(k_trunc):
        gg = g[:, k] @ g[:, k]
        if gg < DEGENERATE_GG:
            resid += np.outer(g[:, k], s[k])
            g[:, k] = rng.standard_normal(p)
            resid -= np.outer(g[:, k], s[k])
            gg = g[:, k] @ g[:, k]
            reinit += 1
        gk = g[:, k]
        e_off = resid + np.outer(gk, s[k])  # residual with source k switched off
        proj = gk @ e_off
        mu_plus, mu_minus, sigma2, lw_pos, lw_neg = two_piece_params(proj, gg, sigma_e2)
        logit = math.log(pi[k]) - math.log1p(-pi[k]) + activation_log_ratio(lw_pos, lw_neg, sigma2)
        on = rng.random(n) < expit(logit)
        x_new = sample_two_piece(mu_plus, mu_minus, sigma2, rng, lw_pos, lw_neg)
        s[k] = np.where(on, x_new, 0.0)
        z[k] = on
        resid = e_off - np.outer(gk, s[k])

    for k in range(k_trunc):
        sk = s[k]
        e_off = resid + np.outer(g[:, k], sk)
        prec = (sk @ sk) / sigma_e2 + 1.0
        mean = (e_off @ sk) / sigma_e2 / prec
        g[:, k] = mean + rng.standard_normal(p) / math.sqrt(prec)
        resid = e_off - np.outer(g[:, k], sk)

    m = z.sum(axis=1, dtype=np.int64)
    pi = rng.beta(m + state.alpha / k_trunc, n - m + 1)
    pi = np.clip(pi, PI_EPS, 1 - PI_EPS)
    return replace(state, g=g, x_src=s, z=z, pi=pi, reinit_count=reinit)


def fit_iica(y, k_trunc: int, config: IicaConfig = IicaConfig()) -> IicaState:
    config.validate()
    y = _as_matrix(y, "y")
    if k_trunc < 1:
        raise ValueError("k_trunc must be >= 1")
    rng = np.random.default_rng(config.seed)
    p, n = y.shape
    state = init_state(p, n, k_trunc, rng, config.alpha, config.sigma_e2)
    trace = []
    g_sum = np.zeros_like(state.g)
    for sweep in range(config.sweeps):
        state = gibbs_sweep(state, y, rng)
        trace.append(log_likelihood(state, y))
        if sweep >= config.burn_in:
            g_sum += state.g
    return replace(state, loglik_trace=tuple(trace), g_mean=g_sum / (config.sweeps - config.burn_in))


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DimredConfig:
    p: int = 8
    k: int | None = None  # defaults to p
    m: int = 5
    sweeps: int = 200
    burn_in: int = 50
    alpha: float = 1.0
    sigma_e2: float = 0.01
    seed: int = 0
    fit_samples: int = 4000  # I-ICA runs on at most this many evenly spaced samples

    @property
    def k_trunc(self) -> int:
        return self.p if self.k is None else self.k

    def iica(self) -> IicaConfig:
        return IicaConfig(self.sweeps, self.burn_in, self.alpha, self.sigma_e2, self.seed)


@dataclass(frozen=True, eq=False)
class DimredPipeline:
    pca: PcaModel
    iica: IicaState
    m_out: int
    source_order: np.ndarray  # sources ranked by descending activity

    def __post_init__(self):
        k = self.iica.k_trunc
        if not self.m_out <= k <= self.pca.p_out <= self.pca.d_in:
            raise ValueError(f"need M <= K <= P <= D, got {self.m_out}, {k}, {self.pca.p_out}, {self.pca.d_in}")


def rank_sources(state: IicaState) -> np.ndarray:
    return np.argsort(-state.active_counts, kind="stable")


def fit_dimred(data, config: DimredConfig = DimredConfig()) -> DimredPipeline:
    """Fit PCA whitening and I-ICA on a D x N matrix of channel samples."""
    data = _as_matrix(data)
    if config.m > config.k_trunc:
        raise ValueError(f"M={config.m} exceeds K={config.k_trunc}")
    pca = fit_pca(data, config.p)
    y = whiten(pca, data)
    if y.shape[1] > config.fit_samples:
        idx = np.linspace(0, y.shape[1] - 1, config.fit_samples).round().astype(np.int64)
        y = y[:, idx]
    state = fit_iica(y, config.k_trunc, config.iica())
    return DimredPipeline(pca, state, config.m, rank_sources(state))


def unmix(pipeline: DimredPipeline, y) -> np.ndarray:
    """Ridge (MAP under a Gaussian surrogate) source estimate for whitened data, all K rows."""
    g = pipeline.iica.g
    a = g.T @ g + pipeline.iica.sigma_e2 * np.eye(g.shape[1])
    return np.linalg.solve(a, g.T @ y)


def transform(pipeline: DimredPipeline, data, m: int | None = None) -> np.ndarray:
    """Map D x N channel data to the M most active sources (M x N)."""
    m = pipeline.m_out if m is None else m
    if m > pipeline.iica.k_trunc:
        raise ValueError(f"M={m} exceeds K={pipeline.iica.k_trunc}")
    y = whiten(pipeline.pca, data)
    return unmix(pipeline, y)[pipeline.source_order[:m]]


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def pipeline_to_bytes(pipeline: DimredPipeline) -> bytes:
    pca, st = pipeline.pca, pipeline.iica
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<QQ", pca.d_in, pca.p_out),
        _f64(pca.mean), _f64(pca.eigenvalues), _f64(pca.projection_w),
        struct.pack("<QQ", st.k_trunc, st.n),
        _f64(st.g), _f64(st.x_src),
        np.ascontiguousarray(st.z, dtype=np.uint8).tobytes(),
        _f64(st.pi),
        struct.pack("<dd", st.sigma_e2, st.alpha),
        struct.pack("<Q", pipeline.m_out),
        np.ascontiguousarray(pipeline.source_order, dtype="<u8").tobytes(),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ValueError("truncated dimred file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).reshape(shape).copy()


def pipeline_from_bytes(buf: bytes) -> DimredPipeline:
    r = _Reader(buf)
    if bytes(r.take(4)) != MAGIC:
        raise ValueError("not a dimred file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise ValueError(f"unsupported dimred file version {version}")
    d, p = r.unpack("<QQ")
    pca = PcaModel(mean=r.array("<f8", d), eigenvalues=r.array("<f8", p), projection_w=r.array("<f8", p, d))
    k, n = r.unpack("<QQ")
    g = r.array("<f8", p, k)
    x = r.array("<f8", k, n)
    z = r.array("u1", k, n)
    pi = r.array("<f8", k)
    sigma_e2, alpha = r.unpack("<dd")
    (m,) = r.unpack("<Q")
    order = r.array("<u8", k).astype(np.int64)
    if r.pos != len(r.buf):
        raise ValueError("trailing bytes after dimred payload")
    state = IicaState(g=g, x_src=x, z=z, pi=pi, sigma_e2=sigma_e2, alpha=alpha)
    return DimredPipeline(pca, state, int(m), order)


def save_pipeline(pipeline: DimredPipeline, path) -> None:
    Path(path).write_bytes(pipeline_to_bytes(pipeline))


def load_pipeline(path) -> DimredPipeline:
    return pipeline_from_bytes(Path(path).read_bytes())
