"""Latent-recovery and model-fit metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import gauss
from .flows import make_rng

RIDGE = 1e-8


def _check_pair(z_true, z_est, min_rows):
    z_true = np.asarray(z_true, dtype=np.float64)
    z_est = np.asarray(z_est, dtype=np.float64)
    if z_true.ndim != 2 or z_true.shape != z_est.shape:
        raise ValueError(f"latent arrays must share an (n, d) shape, got {z_true.shape} and {z_est.shape}")
    if len(z_true) < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {len(z_true)}")
    return z_true, z_est


def abs_corr(a, b):
    """|Pearson correlation| between columns of a and columns of b; flat columns give 0."""
    a = a - a.mean(0)
    b = b - b.mean(0)
    na, nb = np.sqrt((a ** 2).sum(0)), np.sqrt((b ** 2).sum(0))
    flat = np.concatenate([na == 0, nb == 0])
    if flat.any():
        warnings.warn("zero-variance column; its correlations are set to 0", RuntimeWarning, stacklevel=3)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = (a.T @ b) / np.outer(na, nb)
    return np.clip(np.nan_to_num(np.abs(c), nan=0.0, posinf=0.0), 0.0, 1.0)


def matched_mean(c) -> float:
    """Mean entry of ``c`` under the one-to-one row/column matching with the largest total."""
    c = np.asarray(c, dtype=np.float64)
    rows, cols = linear_sum_assignment(c, maximize=True)
    return float(c[rows, cols].mean())


def mcc(z_true, z_est) -> float:
    """Mean |correlation| under the best one-to-one matching of coordinates."""
    z_true, z_est = _check_pair(z_true, z_est, 3)
    return matched_mean(abs_corr(z_true, z_est))


def cod(z_true, z_est) -> float:
    """Mean R^2 of affine regressions of each true coordinate on all estimated ones."""
    z_true, z_est = _check_pair(z_true, z_est, 3)
    n, d = z_est.shape
    if n <= d + 1:
        raise ValueError(f"affine fit needs more than {d + 1} rows, got {n}")
    A = np.column_stack([z_est, np.ones(n)])
    if np.linalg.matrix_rank(A) < d + 1:
        warnings.warn("rank-deficient design; using a ridge fit", RuntimeWarning, stacklevel=2)
        reg = RIDGE * np.eye(d + 1)
        reg[-1, -1] = 0.0
        coef = np.linalg.solve(A.T @ A + reg, A.T @ z_true)
    else:
        coef = np.linalg.lstsq(A, z_true, rcond=None)[0]
    sse = ((z_true - A @ coef) ** 2).sum(0)
    sst = ((z_true - z_true.mean(0)) ** 2).sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - sse / sst, 0.0)
    return float(np.clip(r2, 0.0, 1.0).mean())


def ssw_sst(reps, labels) -> float:
    """Within-class over total sum of squares of representations."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim == 1:
        reps = reps[:, None]
    labels = np.asarray(labels)
    if len(labels) != len(reps):
        raise ValueError(f"{len(labels)} labels for {len(reps)} rows")
    classes, inv = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("ssw_sst needs at least two classes")
    sst = ((reps - reps.mean(0)) ** 2).sum()
    if sst == 0:
        return 0.0
    sums = np.zeros((len(classes), reps.shape[1]))
    np.add.at(sums, inv, reps)
    means = sums / np.bincount(inv)[:, None]
    ssw = ((reps - means[inv]) ** 2).sum()
    return float(min(max(ssw / sst, 0.0), 1.0))


def quantile_labels(u, n_bins=10):
    """Class ids from equal-count bins of a scalar covariate."""
    u = np.asarray(u, dtype=np.float64).ravel()
    edges = np.quantile(u, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, u, side="right")


def logmeanexp(a, axis=0):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise FloatingPointError("every summand is -inf for some row")
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


@dataclass
class LoglikEstimate:
    value: float
    mc_se: float
    rows: np.ndarray
    row_se: np.ndarray

    @property
    def sample_se(self):
        return float(self.rows.std(ddof=1) / math.sqrt(len(self.rows))) if len(self.rows) > 1 else math.nan


def mc_loglik(model, x, u, S, seed, chunk=None) -> LoglikEstimate:
    """log p(x|u) by averaging the likelihood over S draws from the label prior.

    Per-row standard errors use the delta method on the log of the sample mean.
    """
    if S < 2:
        raise ValueError("S must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = len(x)
    rng = make_rng([seed, 0x11])
    chunk = chunk or max(1, 2_000_000 // (S * max(model.d_x, 1)))
    rows, ses = np.empty(n), np.empty(n)
    for lo in range(0, n, chunk):
        xb, ub = x[lo:lo + chunk], u[lo:lo + chunk]
        _, _, prior = model.posterior(xb, ub)
        noise = rng.standard_normal((S, len(xb), model.d_z))
        lp = model.recon_log_prob(xb, gauss.sample(prior, noise))
        rows[lo:lo + chunk] = logmeanexp(lp, axis=0)
        w = np.exp(lp - lp.max(0))
        ses[lo:lo + chunk] = w.std(0, ddof=1) / (math.sqrt(S) * w.mean(0))
    return LoglikEstimate(float(rows.mean()), float(math.sqrt((ses ** 2).sum()) / n), rows, ses)


def collapse_scores(model, x, u):
    _, q_post, prior = model.posterior(np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64))
    return np.asarray(gauss.kl(q_post, prior))


def collapse_score(model, x, u) -> float:
    """Mean KL from fused posterior to label prior; zero exactly at posterior collapse."""
    if len(x) == 0:
        raise ValueError("empty dataset")
    return float(collapse_scores(model, x, u).mean())


# reports -------------------------------------------------------------------

@dataclass
class MetricReport:
    n: int
    mcc_post: float
    mcc_enc: float
    cod_post: float
    cod_enc: float
    loglik: float
    ssw_sst: float
    collapse_score: float
    mcc_post_se: float = math.nan
    mcc_enc_se: float = math.nan
    cod_post_se: float = math.nan
    cod_enc_se: float = math.nan
    loglik_se: float = math.nan
    loglik_mc_se: float = math.nan
    ssw_sst_se: float = math.nan
    collapse_score_se: float = math.nan

    FIELDS = ("mcc_post", "mcc_enc", "cod_post", "cod_enc", "loglik", "ssw_sst", "collapse_score")

    def to_json(self) -> dict:
        return asdict(self)


def _bootstrap_se(fn, n, rng, reps):
    if reps < 2:
        return math.nan
    vals = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(reps):
            vals.append(fn(rng.integers(0, n, size=n)))
    return float(np.std(vals, ddof=1))


def evaluate(model, x, u, z_true, labels=None, S=256, seed=0, bootstrap=50) -> MetricReport:
    """All metrics on one split; representations are conditional means."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = len(x)
    q_enc, q_post, prior = model.posterior(x, u)
    m_post, m_enc = np.asarray(q_post.mean), np.asarray(q_enc.mean)
    if labels is None:
        labels = quantile_labels(u[:, 0])
    ll = mc_loglik(model, x, u, S, seed)
    kls = np.asarray(gauss.kl(q_post, prior))
    rng = make_rng([seed, 0xB007])
    bs = lambda f: _bootstrap_se(f, n, rng, bootstrap)
    return MetricReport(
        n=n,
        mcc_post=mcc(z_true, m_post), mcc_enc=mcc(z_true, m_enc),
        cod_post=cod(z_true, m_post), cod_enc=cod(z_true, m_enc),
        loglik=ll.value, ssw_sst=ssw_sst(m_post, labels), collapse_score=float(kls.mean()),
        mcc_post_se=bs(lambda i: mcc(z_true[i], m_post[i])),
        mcc_enc_se=bs(lambda i: mcc(z_true[i], m_enc[i])),
        cod_post_se=bs(lambda i: cod(z_true[i], m_post[i])),
        cod_enc_se=bs(lambda i: cod(z_true[i], m_enc[i])),
        loglik_se=ll.sample_se, loglik_mc_se=ll.mc_se,
        ssw_sst_se=bs(lambda i: ssw_sst(m_post[i], labels[i])),
        collapse_score_se=float(kls.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
    )
