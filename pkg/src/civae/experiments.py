"""Experiment recipes shared by the command line and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics, models, objective, synthdata
from .flows import make_rng

# desk-scale defaults
DESK_N = 5000
DESK_EPOCHS = 30
DESK_RESTARTS = 2
EVAL_S = 256
REPORT_GRID = 1001
REPORT_K = 64

HIDDEN = {"sine": (60, 60), "quadratic": (60, 60, 60), "two_circles": (60, 60, 60)}


def scheme_config(scheme, mode, seed, d_U=None, d_X=synthdata.GT_DIM, **overrides) -> models.TrainConfig:
    if d_U is None:
        d_U = 3 if scheme == "two_circles" else 1
    base = dict(mode=mode, seed=seed, d_U=d_U, d_X=d_X, d_Z=synthdata.D_Z,
                hidden=HIDDEN.get(scheme, (60, 60)), epochs=DESK_EPOCHS)
    base.update(overrides)
    return models.TrainConfig(**base)


@dataclass
class TrainResult:
    model: models.CiModel
    config: models.TrainConfig
    histories: list
    best_restart: int

    @property
    def history(self):
        return self.histories[self.best_restart]


def train_restarts(ds: synthdata.LabeledDataset, config: models.TrainConfig, restarts=DESK_RESTARTS,
                   progress=None) -> TrainResult:
    """Train ``restarts`` independently initialised models; keep the lowest validation loss."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    tr, va = ds.subset("train"), ds.subset("val")
    best, best_val, histories, best_r = None, math.inf, [], 0
    for r in range(restarts):
        cfg = replace(config, restart=r)
        model, hist = models.train(models.build_model(cfg), tr.X, tr.U, cfg, va.X, va.U, progress=progress)
        histories.append(hist)
        if best is None or hist.best_val < best_val:
            best, best_val, best_r = model, hist.best_val, r
    return TrainResult(best, config, histories, best_r)


def evaluate(model, ds: synthdata.LabeledDataset, split="test", S=EVAL_S, seed=0, bootstrap=50):
    part = ds.subset(split)
    return metrics.evaluate(model, part.X, part.U, part.Z, part.labels, S=S, seed=seed, bootstrap=bootstrap)


# alpha agreement -------------------------------------------------------------

ALPHA_CLASSES = ("0", "interior", "1")


def alpha_class(a):
    a = np.asarray(a)
    return np.where(a <= 0.0, 0, np.where(a >= 1.0, 2, 1))


@dataclass
class AlphaReport:
    records: list
    contingency: np.ndarray  # rows: formula class, columns: grid class
    correlation: float

    @property
    def alpha_grid(self):
        return np.array([r.alpha_grid for r in self.records])

    @property
    def alpha_formula(self):
        return np.array([r.alpha_formula for r in self.records])

    def to_json(self) -> dict:
        n = int(self.contingency.sum())
        return {
            "n": n,
            "correlation": self.correlation,
            "classes": list(ALPHA_CLASSES),
            "rows": "formula",
            "columns": "grid",
            "counts": self.contingency.tolist(),
            "fractions": (self.contingency / max(n, 1)).tolist(),
        }


def alpha_report(model, x, u, grid_size=REPORT_GRID, K=REPORT_K, seed=0, chunk=250) -> AlphaReport:
    rng = make_rng([seed, 0xA1])
    records = []
    for lo in range(0, len(x), chunk):
        xb, ub = x[lo:lo + chunk], u[lo:lo + chunk]
        noise = objective.draw_noise(rng, K, len(xb), model.d_z)
        records += objective.alpha_records(model, xb, ub, grid_size, noise=noise,
                                           ids=np.arange(lo, lo + len(xb)))
    ag = np.array([r.alpha_grid for r in records])
    af = np.array([r.alpha_formula for r in records])
    table = np.zeros((3, 3), dtype=np.int64)
    np.add.at(table, (alpha_class(af), alpha_class(ag)), 1)
    if ag.std() == 0 or af.std() == 0:
        corr = math.nan
    else:
        corr = float(np.corrcoef(ag, af)[0, 1])
    return AlphaReport(records, table, corr)


# observation-noise sweep ---------------------------------------------------------

def collapse_run(scheme, gamma, seed, modes=("ivae", "ci"), n=DESK_N, restarts=1, **overrides):
    """Train each mode with observation variance ``gamma`` in both data and model.

    Returns one dict per mode with the test-split collapse score and metrics.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    ds = synthdata.generate(scheme, n, seed, noise_std=math.sqrt(gamma))
    rows = []
    for mode in modes:
        cfg = scheme_config(scheme, mode, seed, d_U=ds.d_u, obs_log_std=0.5 * math.log(gamma), **overrides)
        res = train_restarts(ds, cfg, restarts)
        te = ds.subset("test")
        rows.append({
            "scheme": scheme, "mode": mode, "gamma": gamma, "seed": seed,
            "collapse_score": metrics.collapse_score(res.model, te.X, te.U),
            "cod_post": metrics.cod(te.Z, res.model.posterior(te.X, te.U)[1].mean),
            "mcc_post": metrics.mcc(te.Z, res.model.posterior(te.X, te.U)[1].mean),
            "best_val": res.history.best_val,
        })
    return rows
