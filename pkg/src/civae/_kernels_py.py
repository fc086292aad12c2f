"""Pure numpy versions of the compiled kernels (same semantics)."""
import numpy as np

_CHUNK = 1 << 21


def alpha_grid_values(e0, e1, le_e, lp_e, le_p, lp_p, alphas):
    B, K = le_e.shape
    alphas = np.asarray(alphas, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_a = np.log(alphas)[None, :, None]
        log_1ma = np.log1p(-alphas)[None, :, None]
    a = alphas[None, :]
    out = np.empty((B, alphas.size))
    step = max(1, _CHUNK // max(1, alphas.size * K))
    for lo in range(0, B, step):
        sl = slice(lo, lo + step)
        le, lp = le_e[sl, None, :], lp_e[sl, None, :]
        s_e = np.mean(le - np.logaddexp(lp + log_1ma, le + log_a), axis=-1)
        le, lp = le_p[sl, None, :], lp_p[sl, None, :]
        s_p = np.mean(lp - np.logaddexp(lp + log_1ma, le + log_a), axis=-1)
        out[sl] = a * e1[sl, None] + (1.0 - a) * e0[sl, None] + a * s_e + (1.0 - a) * s_p
    return out
