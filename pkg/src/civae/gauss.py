"""Diagonal Gaussians.

Every function operates on the last axis and broadcasts over leading batch
axes.  Parameters may be ndarrays or autodiff tensors; with tensors the
result stays on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_BOUND = 7.0


@dataclass(frozen=True)
class DiagGaussian:
    mean: Any
    log_std: Any

    def __post_init__(self):
        ms, ls = np.shape(ad.value_of(self.mean)), np.shape(ad.value_of(self.log_std))
        if ms != ls:
            raise ad.ShapeError(f"mean shape {ms} != log_std shape {ls}")
        if len(ms) == 0 or ms[-1] < 1:
            raise ad.ShapeError(f"need at least one dimension, got shape {ms}")

    @property
    def dim(self) -> int:
        return np.shape(ad.value_of(self.mean))[-1]

    @property
    def std(self):
        return ad.exp(self.log_std)

    @property
    def var(self):
        return ad.exp(2.0 * self.log_std)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(ad.value_of(self.mean).copy(), ad.value_of(self.log_std).copy())

    def __getitem__(self, key) -> "DiagGaussian":
        return DiagGaussian(self.mean[key], self.log_std[key])


def from_params(out, clamp=LOG_STD_BOUND) -> DiagGaussian:
    """Split a ``(..., 2d)`` network output into mean and clamped log-std."""
    d2 = np.shape(ad.value_of(out))[-1]
    if d2 % 2:
        raise ad.ShapeError(f"expected an even number of outputs, got {d2}")
    d = d2 // 2
    return DiagGaussian(out[..., :d], ad.clip(out[..., d:], -clamp, clamp))


def _check(a: DiagGaussian, b_dim: int, what: str):
    if a.dim != b_dim:
        raise ad.ShapeError(f"{what}: dimension {a.dim} vs {b_dim}")


def log_pdf(g: DiagGaussian, z):
    _check(g, np.shape(ad.value_of(z))[-1], "log_pdf")
    r = (z - g.mean) * ad.exp(-g.log_std)
    return -0.5 * ad.sum_(ad.square(r), axis=-1) - ad.sum_(g.log_std, axis=-1) - 0.5 * g.dim * LOG_2PI


def kl(p: DiagGaussian, q: DiagGaussian):
    """Closed-form KL(p || q) summed over coordinates."""
    _check(p, q.dim, "kl")
    dls = p.log_std - q.log_std
    term = -dls + 0.5 * (ad.exp(2.0 * dls) + ad.square(p.mean - q.mean) * ad.exp(-2.0 * q.log_std)) - 0.5
    return ad.sum_(term, axis=-1)


def fuse(enc: DiagGaussian, prior: DiagGaussian) -> DiagGaussian:
    """Normalised product of two Gaussian densities (precisions add)."""
    _check(enc, prior.dim, "fuse")
    pe = ad.exp(-2.0 * enc.log_std)
    pp = ad.exp(-2.0 * prior.log_std)
    prec = pe + pp
    mean = (enc.mean * pe + prior.mean * pp) / prec
    return DiagGaussian(mean, -0.5 * ad.log(prec))


def sample(g: DiagGaussian, noise):
    """Reparameterised draw ``mean + std * noise``; noise may carry extra leading axes."""
    _check(g, np.shape(ad.value_of(noise))[-1], "sample")
    return g.mean + ad.exp(g.log_std) * noise


def coord_moments(g: DiagGaussian, j: int, kind: str):
    """Mean and variance of ``z_j`` (kind="linear") or ``z_j**2`` (kind="square")."""
    if not 0 <= j < g.dim:
        raise IndexError(f"coordinate {j} out of range for dimension {g.dim}")
    mu = ad.value_of(g.mean)[..., j]
    var = np.exp(2.0 * ad.value_of(g.log_std)[..., j])
    if kind == "linear":
        return mu, var
    if kind == "square":
        return mu * mu + var, 2.0 * var * var + 4.0 * mu * mu * var
    raise ValueError(f"unknown moment kind {kind!r}")
