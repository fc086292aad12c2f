"""Synthetic covariate-conditioned latent datasets and their on-disk format.

Every scheme draws a covariate U, a 2-D latent Z | U from a Gaussian whose mean
traces a curve in U, and an observation X = mixing(Z) + noise in 100 dimensions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flows import GT_DIM, MixingFunction, gt_mixing, make_rng

FORMAT_VERSION = 1
VAR_FLOOR = 1e-6
SPLITS = ("train", "val", "test")
D_Z = 2


@dataclass
class LabeledDataset:
    X: np.ndarray
    U: np.ndarray
    Z: np.ndarray | None = None
    split: np.ndarray | None = None
    labels: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.X)
        for name in ("U", "Z", "split", "labels"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} rows, X has {n}")

    def __len__(self):
        return len(self.X)

    @property
    def d_x(self):
        return self.X.shape[1]

    @property
    def d_u(self):
        return self.U.shape[1]

    def subset(self, tag) -> "LabeledDataset":
        if self.split is None:
            raise ValueError("dataset has no split tags")
        mask = self.split == tag
        pick = lambda v: None if v is None else v[mask]
        return LabeledDataset(self.X[mask], self.U[mask], pick(self.Z), self.split[mask],
                              pick(self.labels), dict(self.provenance))

    def split_counts(self) -> dict:
        if self.split is None:
            return {}
        return {t: int(np.sum(self.split == t)) for t in SPLITS}


# conditional latent distributions -------------------------------------------

def sine_moments(u):
    u = np.asarray(u, dtype=np.float64)
    return np.stack([u, 2.0 * np.sin(u)], -1), np.maximum(u / (4 * np.pi), VAR_FLOOR)


def quadratic_moments(u):
    u = np.asarray(u, dtype=np.float64)
    return np.stack([u, u ** 2], -1), np.maximum((2 * u + np.pi) / (4 * np.pi), VAR_FLOOR)


def two_circles_moments(angle, radius):
    angle = np.asarray(angle, dtype=np.float64)
    radius = np.asarray(radius, dtype=np.float64)
    mean = np.stack([radius * np.cos(angle), radius * np.sin(angle)], -1)
    return mean, np.maximum((np.pi - np.abs(angle)) / (10 * np.pi), VAR_FLOOR)


def _finish(scheme, n, seed, rng, u_enc, mean, var, labels, gt_flow, noise_std):
    z = mean + np.sqrt(var)[:, None] * rng.standard_normal((n, D_Z))
    if gt_flow is None:
        gt_flow = gt_mixing(D_Z, seed)
    x = gt_flow(z) + noise_std * rng.standard_normal((n, gt_flow.stack.dim))
    prov = {"scheme": scheme, "seed": int(seed), "flow_seed": int(gt_flow.seed), "noise_std": float(noise_std)}
    return LabeledDataset(x, u_enc, z, None, labels, prov)


def _check_n(n):
    if n < 1:
        raise ValueError("n must be >= 1")


def gen_sine(n, seed, gt_flow: MixingFunction | None = None, noise_std=1.0) -> LabeledDataset:
    _check_n(n)
    rng = make_rng([seed, 1])
    u = rng.uniform(0.0, 2 * np.pi, size=n)
    mean, var = sine_moments(u)
    return _finish("sine", n, seed, rng, u[:, None], mean, var, None, gt_flow, noise_std)


def gen_quadratic(n, seed, gt_flow: MixingFunction | None = None, noise_std=1.0) -> LabeledDataset:
    _check_n(n)
    rng = make_rng([seed, 2])
    u = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    mean, var = quadratic_moments(u)
    return _finish("quadratic", n, seed, rng, u[:, None], mean, var, None, gt_flow, noise_std)


def gen_two_circles(n, seed, gt_flow: MixingFunction | None = None, noise_std=1.0) -> LabeledDataset:
    """Covariates are encoded as (angle, one-hot class); class k has radius k."""
    _check_n(n)
    rng = make_rng([seed, 3])
    angle = rng.uniform(-np.pi, np.pi, size=n)
    cls = rng.integers(0, 2, size=n)
    mean, var = two_circles_moments(angle, cls + 1.0)
    u = np.column_stack([angle, cls == 0, cls == 1]).astype(np.float64)
    return _finish("two_circles", n, seed, rng, u, mean, var, cls, gt_flow, noise_std)


GENERATORS = {"sine": gen_sine, "quadratic": gen_quadratic, "two_circles": gen_two_circles}


def generate(scheme, n, seed, noise_std=1.0, fractions=(0.8, 0.1, 0.1)) -> LabeledDataset:
    if scheme not in GENERATORS:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(GENERATORS)}")
    return split(GENERATORS[scheme](n, seed, noise_std=noise_std), fractions, seed)


# splitting --------------------------------------------------------------------

def split_sizes(n, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or not math.isfinite(f) for f in fractions):
        raise ValueError(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(dataset: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed=0) -> LabeledDataset:
    """Seeded shuffle, then contiguous train/val/test assignment."""
    n = len(dataset)
    sizes = split_sizes(n, fractions)
    order = make_rng([seed, 0x5EED]).permutation(n)
    tags = np.empty(n, dtype="<U5")
    bounds = np.cumsum((0,) + sizes)
    for tag, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        tags[order[lo:hi]] = tag
    prov = dict(dataset.provenance, fractions=list(fractions), split_seed=int(seed))
    return LabeledDataset(dataset.X, dataset.U, dataset.Z, tags, dataset.labels, prov)


# serialization ------------------------------------------------------------------

def _write_csv(path, arr):
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[:, None]
    fmt = "%s" if arr.dtype.kind in "US" else "%.17g"
    np.savetxt(path, arr, fmt=fmt, delimiter=",")


def _read_csv(path, dtype=np.float64, cols=None):
    arr = np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{path}: expected {cols} columns, found {arr.shape[1]}")
    return arr


def save(dataset: LabeledDataset, out_dir, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"X": "X.csv", "U": "U.csv"}
    _write_csv(out / "X.csv", dataset.X)
    _write_csv(out / "U.csv", dataset.U)
    if dataset.Z is not None:
        _write_csv(out / "Z.csv", dataset.Z)
        files["Z"] = "Z.csv"
    if dataset.split is not None:
        _write_csv(out / "split.csv", dataset.split)
        files["split"] = "split.csv"
    if dataset.labels is not None:
        _write_csv(out / "labels.csv", dataset.labels.astype(np.float64))
        files["labels"] = "labels.csv"
    manifest = {
        "format_version": FORMAT_VERSION,
        **dataset.provenance,
        "n": len(dataset),
        "d_X": dataset.d_x,
        "d_U": dataset.d_u,
        "d_Z": None if dataset.Z is None else int(dataset.Z.shape[1]),
        "split_counts": dataset.split_counts(),
        "files": files,
    }
    if extra:
        manifest["config"] = extra
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load(data_dir) -> LabeledDataset:
    """Read a manifest directory; external tables only need X/U (Z, split optional)."""
    d = Path(data_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    m = json.loads(mpath.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported format version {m.get('format_version')!r}")
    files = m.get("files", {"X": "X.csv", "U": "U.csv"})
    X = _read_csv(d / files["X"], cols=m.get("d_X"))
    U = _read_csv(d / files["U"], cols=m.get("d_U"))
    Z = _read_csv(d / files["Z"]) if "Z" in files else None
    tags = _read_csv(d / files["split"], dtype="<U5")[:, 0] if "split" in files else None
    labels = _read_csv(d / files["labels"])[:, 0].astype(np.int64) if "labels" in files else None
    if len(X) != m.get("n", len(X)):
        raise ValueError(f"{mpath}: manifest says {m['n']} rows, X.csv has {len(X)}")
    if tags is not None and not set(np.unique(tags)) <= set(SPLITS):
        raise ValueError(f"{d / files['split']}: unknown split tags {sorted(set(np.unique(tags)) - set(SPLITS))}")
    prov = {k: m[k] for k in ("scheme", "seed", "flow_seed", "noise_std", "fractions", "split_seed") if k in m}
    ds = LabeledDataset(X, U, Z, tags, labels, prov)
    if tags is None:
        ds = split(ds, m.get("fractions", (0.8, 0.1, 0.1)), m.get("seed", 0))
    return ds
