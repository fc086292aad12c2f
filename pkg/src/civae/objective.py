"""The mixture-ELBO family and the samplewise optimal mixture weight.

For a sample (x, u) the variational distribution is the mixture
``alpha * q(z|x) + (1 - alpha) * q(z|x,u)``.  Its ELBO is assembled from the
two endpoint ELBOs plus two skew-divergence terms, so the whole curve over
alpha costs two extra density evaluations per draw once the endpoints are
known.

Models are duck-typed: anything with ``posterior(x, u, params)`` returning
``(q_enc, q_post, prior)`` and ``recon_log_prob(x, z, params)`` works.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import gauss, kernels
from .gauss import DiagGaussian

EPS_MIN, EPS_MAX = 1e-6, 1e6
TIE_RTOL = 1e-12


@dataclass
class ElboBreakdown:
    recon_enc: Any
    recon_post: Any
    kl_enc: Any
    kl_post: Any
    skew_enc: Any
    skew_post: Any
    alpha: Any
    total: Any

    @property
    def elbo_enc(self):
        return self.recon_enc - self.kl_enc

    @property
    def elbo_post(self):
        return self.recon_post - self.kl_post


@dataclass
class AlphaRecord:
    sample_id: int
    delta_1_0: float
    epsilon: float
    alpha_grid: float
    alpha_formula: float
    elbo_0: float
    elbo_1: float
    elbo_star: float

    FIELDS = ("sample_id", "delta_1_0", "epsilon", "alpha_grid", "alpha_formula",
              "elbo_0", "elbo_1", "elbo_star")


def draw_noise(rng: np.random.Generator, K, n, d):
    return rng.standard_normal((K, n, d))


def _noise(noise, K, n, d):
    if noise is None:
        raise ValueError("noise must be supplied (shape (K, n, d_z))")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[1:] != (n, d):
        raise ad.ShapeError(f"noise shape {noise.shape} does not match (K, {n}, {d})")
    if K is not None and noise.shape[0] != K:
        raise ad.ShapeError(f"noise carries {noise.shape[0]} draws, K={K}")
    if noise.shape[0] < 1:
        raise ValueError("K must be >= 1")
    return noise


def _check_finite(name, **parts):
    bad = {k: v for k, v in parts.items() if not np.all(np.isfinite(ad.value_of(v)))}
    if bad:
        summary = ", ".join(f"{k}={np.asarray(ad.value_of(v)).ravel()[:4]}" for k, v in parts.items())
        raise FloatingPointError(f"{name}: non-finite components {sorted(bad)} ({summary})")


def elbo_endpoint(model, x, u, which, K=None, noise=None, params=None):
    """ELBO with the fused posterior (``which="post"``) or the encoder (``"enc"``).

    Monte-Carlo reconstruction over the K draws in ``noise`` minus the
    closed-form KL to the label prior.  Returns one value per row.
    """
    if which not in ("post", "enc"):
        raise ValueError(f"which must be 'post' or 'enc', got {which!r}")
    q_enc, q_post, prior = model.posterior(x, u, params)
    q = q_post if which == "post" else q_enc
    n = np.shape(ad.value_of(q.mean))[0]
    noise = _noise(noise, K, n, q.dim)
    recon = ad.mean(model.recon_log_prob(x, gauss.sample(q, noise), params), axis=0)
    klv = gauss.kl(q, prior)
    _check_finite("elbo_endpoint", recon=recon, kl=klv)
    return recon - klv


def skew_divergence(p: DiagGaussian, q: DiagGaussian, a, K=None, noise=None, return_se=False):
    """Monte-Carlo ``KL(p || (1 - a) p + a q)`` with reparameterised draws from ``p``."""
    a = np.asarray(a, dtype=np.float64)
    if np.any((a < 0) | (a > 1)):
        raise ValueError(f"skew weight must lie in [0, 1], got {a}")
    if p.dim != q.dim:
        raise ad.ShapeError(f"skew_divergence: dimension {p.dim} vs {q.dim}")
    lead = np.shape(ad.value_of(p.mean))[:-1]
    noise = np.asarray(noise, dtype=np.float64)
    if K is not None and noise.shape[0] != K:
        raise ad.ShapeError(f"noise carries {noise.shape[0]} draws, K={K}")
    if noise.shape[1:] != lead + (p.dim,):
        raise ad.ShapeError(f"noise shape {noise.shape} does not match (K,)+{lead + (p.dim,)}")
    z = gauss.sample(p, noise)
    lp = gauss.log_pdf(p, z)
    terms = lp - ad.log_mix(lp, gauss.log_pdf(q, z), a)
    est = ad.mean(terms, axis=0)
    if return_se:
        tv = ad.value_of(terms)
        return est, tv.std(axis=0, ddof=1) / np.sqrt(tv.shape[0])
    return est


def elbo_alpha(model, x, u, alpha, K=None, noise=None, params=None) -> ElboBreakdown:
    """ELBO of the alpha-mixture, decomposed into endpoints plus skew terms.

    ``alpha`` is a scalar or one weight per row and is treated as a constant.
    """
    q_enc, q_post, prior = model.posterior(x, u, params)
    n = np.shape(ad.value_of(q_enc.mean))[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)).copy()
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    noise = _noise(noise, K, n, q_enc.dim)

    z_p = gauss.sample(q_post, noise)
    recon_post = ad.mean(model.recon_log_prob(x, z_p, params), axis=0)
    kl_post = gauss.kl(q_post, prior)
    z_e = gauss.sample(q_enc, noise)
    recon_enc = ad.mean(model.recon_log_prob(x, z_e, params), axis=0)
    kl_enc = gauss.kl(q_enc, prior)

    # both skew terms measure divergence to the same mixture density
    lp_p = gauss.log_pdf(q_post, z_p)
    skew_post = ad.mean(lp_p - ad.log_mix(lp_p, gauss.log_pdf(q_enc, z_p), alpha), axis=0)
    le_e = gauss.log_pdf(q_enc, z_e)
    skew_enc = ad.mean(le_e - ad.log_mix(gauss.log_pdf(q_post, z_e), le_e, alpha), axis=0)

    total = (alpha * (recon_enc - kl_enc) + (1.0 - alpha) * (recon_post - kl_post)
             + alpha * skew_enc + (1.0 - alpha) * skew_post)
    _check_finite("elbo_alpha", recon_enc=recon_enc, recon_post=recon_post, kl_enc=kl_enc,
                  kl_post=kl_post, skew_enc=skew_enc, skew_post=skew_post)
    return ElboBreakdown(recon_enc, recon_post, kl_enc, kl_post, skew_enc, skew_post, alpha, total)


def estimate_epsilon(q_enc: DiagGaussian, q_post: DiagGaussian):
    """Reciprocal of the largest SNR over the test statistics z_j and z_j**2."""
    if q_enc.dim != q_post.dim:
        raise ad.ShapeError(f"estimate_epsilon: dimension {q_enc.dim} vs {q_post.dim}")
    best = 0.0
    for j in range(q_enc.dim):
        for kind in ("linear", "square"):
            m1, v1 = gauss.coord_moments(q_enc, j, kind)
            m2, v2 = gauss.coord_moments(q_post, j, kind)
            best = np.maximum(best, (m1 - m2) ** 2 / np.maximum(v1, v2))
    with np.errstate(divide="ignore"):
        eps = 1.0 / best
    return np.clip(eps, EPS_MIN, EPS_MAX)


def alpha_star_formula(epsilon, delta):
    """Closed-form maximiser of the concave lower bound, clamped to [0, 1]."""
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if np.any(epsilon <= 0):
        raise ValueError("epsilon must be positive")
    s = np.sqrt(1.0 + 4.0 * epsilon)
    return np.clip((1.0 - s) / 2.0 + s * expit(s * np.asarray(delta, dtype=np.float64)), 0.0, 1.0)


def alpha_grid(grid_size):
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    return np.linspace(0.0, 1.0, grid_size)


def select_alpha(values, alphas, rtol=TIE_RTOL):
    """Row-wise argmax over the grid; near-ties go to the smallest alpha."""
    values = np.atleast_2d(values)
    best = values.max(axis=1, keepdims=True)
    ok = values >= best - rtol * (1.0 + np.abs(best))
    idx = ok.argmax(axis=1)
    rows = np.arange(values.shape[0])
    return alphas[idx], values[rows, idx]


@dataclass
class GridTerms:
    """Per-row quantities feeding the grid search and the closed-form alpha."""
    elbo_0: np.ndarray
    elbo_1: np.ndarray
    le_e: np.ndarray
    lp_e: np.ndarray
    le_p: np.ndarray
    lp_p: np.ndarray
    epsilon: np.ndarray

    @property
    def delta(self):
        return self.elbo_1 - self.elbo_0

    def values(self, alphas, backend=None):
        return kernels.alpha_grid_values(self.elbo_0, self.elbo_1, self.le_e, self.lp_e,
                                         self.le_p, self.lp_p, alphas, backend=backend)


def grid_terms(model, x, u, K=None, noise=None, params=None) -> GridTerms:
    params = None if params is None else {k: ad.value_of(v) for k, v in params.items()}
    q_enc, q_post, prior = model.posterior(x, u, params)
    q_enc, q_post, prior = q_enc.detach(), q_post.detach(), prior.detach()
    n = q_enc.mean.shape[0]
    noise = _noise(noise, K, n, q_enc.dim)
    z_p = gauss.sample(q_post, noise)
    z_e = gauss.sample(q_enc, noise)
    e0 = model.recon_log_prob(x, z_p, params).mean(axis=0) - gauss.kl(q_post, prior)
    e1 = model.recon_log_prob(x, z_e, params).mean(axis=0) - gauss.kl(q_enc, prior)
    _check_finite("grid_terms", elbo_0=e0, elbo_1=e1)
    return GridTerms(
        e0, e1,
        gauss.log_pdf(q_enc, z_e).T, gauss.log_pdf(q_post, z_e).T,
        gauss.log_pdf(q_enc, z_p).T, gauss.log_pdf(q_post, z_p).T,
        estimate_epsilon(q_enc, q_post),
    )


def alpha_star_grid(model, x, u, grid_size, K=None, noise=None, params=None, backend=None):
    """Grid-search maximiser of ELBO(alpha) with common random numbers across the grid.

    Returns ``(alpha, elbo_at_alpha)`` with one entry per row.
    """
    alphas = alpha_grid(grid_size)
    terms = grid_terms(model, x, u, K, noise, params)
    return select_alpha(terms.values(alphas, backend=backend), alphas)


def alpha_records(model, x, u, grid_size, K=None, noise=None, params=None, ids=None):
    alphas = alpha_grid(grid_size)
    t = grid_terms(model, x, u, K, noise, params)
    a_grid, e_star = select_alpha(t.values(alphas), alphas)
    a_formula = alpha_star_formula(t.epsilon, t.delta)
    ids = np.arange(len(a_grid)) if ids is None else ids
    return [AlphaRecord(int(i), float(d), float(e), float(ag), float(af), float(e0), float(e1), float(es))
            for i, d, e, ag, af, e0, e1, es in zip(ids, t.delta, t.epsilon, a_grid, a_formula,
                                                    t.elbo_0, t.elbo_1, e_star)]


# lower-bound analysis ------------------------------------------------------

def _roots(epsilon):
    s = np.sqrt(1.0 + 4.0 * np.asarray(epsilon, dtype=np.float64))
    return (1.0 + s) / 2.0, (1.0 - s) / 2.0, s


def _xlogabs(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0.0, 0.0, x * np.log(np.abs(x)))


def _check_lb_args(alpha, epsilon):
    if np.any(np.asarray(epsilon) <= 0):
        raise ValueError("epsilon must be positive")
    a = np.asarray(alpha)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("alpha must lie in [0, 1]")


def lb_value(alpha, epsilon, delta):
    """Closed form of the SNR-based lower bound on ELBO(alpha) - ELBO(0)."""
    _check_lb_args(alpha, epsilon)
    alpha = np.asarray(alpha, dtype=np.float64)
    tp, tm, s = _roots(epsilon)
    inner = _xlogabs(alpha - tp) - _xlogabs(alpha - tm) + _xlogabs(tp) - _xlogabs(tm)
    return alpha * np.asarray(delta, dtype=np.float64) + inner / s


def lb_derivative(alpha, epsilon, delta):
    """First and second derivatives of :func:`lb_value` in alpha."""
    _check_lb_args(alpha, epsilon)
    alpha = np.asarray(alpha, dtype=np.float64)
    tp, tm, s = _roots(epsilon)
    first = np.asarray(delta, dtype=np.float64) + np.log(np.abs((alpha - tp) / (alpha - tm))) / s
    second = -1.0 / (alpha * (1.0 - alpha) + np.asarray(epsilon, dtype=np.float64))
    return first, second


def formula_is_interior(epsilon, delta):
    """Whether the unclamped closed-form maximiser lies inside [0, 1]."""
    _, _, s = _roots(epsilon)
    bound = np.log((s + 1.0) ** 2 / (4.0 * np.asarray(epsilon, dtype=np.float64))) / s
    return np.abs(np.asarray(delta, dtype=np.float64)) <= bound
