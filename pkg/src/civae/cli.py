"""Command-line experiment runner.

Verbs: ``gen``, ``train``, ``eval``, ``alpha-report`` and ``collapse``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import experiments as E
from . import models, synthdata
from .objective import AlphaRecord

log = logging.getLogger("civae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# output helpers ------------------------------------------------------------

def _fmt(v):
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def write_json(path: Path, obj):
    """Atomic write: readers never see a half-written file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_data(path):
    try:
        return synthdata.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset at {path}: {exc}") from exc


def _load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
        return doc, models.CiModel.from_json(doc["model"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _check_dims(model, ds):
    if model.d_x != ds.d_x or model.d_u != ds.d_u:
        raise ConfigError(f"checkpoint expects d_X={model.d_x}, d_U={model.d_u}; "
                          f"dataset has d_X={ds.d_x}, d_U={ds.d_u}")


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# verbs -------------------------------------------------------------------

def cmd_gen(args):
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.scheme not in synthdata.GENERATORS:
        raise ConfigError(f"unknown scheme {args.scheme!r}")
    ds = synthdata.generate(args.scheme, args.n, args.seed, noise_std=args.noise_std,
                            fractions=_fractions(args.fractions))
    out = _outdir(args.out)
    synthdata.save(ds, out, extra=_echo(args))
    print(f"wrote {len(ds)} rows to {out} ({ds.split_counts()})")


def _fractions(text):
    try:
        fr = tuple(float(v) for v in text.split(","))
        synthdata.split_sizes(10, fr)
    except ValueError as exc:
        raise ConfigError(f"bad --fractions {text!r}: {exc}") from exc
    return fr


def _train_config(args, ds) -> models.TrainConfig:
    scheme = ds.provenance.get("scheme", "external")
    overrides = dict(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                     K_train=args.k_train, alpha_grid_train=args.alpha_grid_train,
                     obs_log_std=args.obs_log_std, obs_noise_fixed=not args.learn_obs_noise)
    if args.hidden:
        overrides["hidden"] = tuple(int(h) for h in args.hidden.split(","))
    try:
        cfg = E.scheme_config(scheme, args.mode, args.seed, d_U=ds.d_u, d_X=ds.d_x, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.batch_size > ds.split_counts().get("train", 0):
        raise ConfigError(f"batch size {cfg.batch_size} exceeds the training split")
    return cfg


def cmd_train(args):
    ds = _load_data(args.data)
    cfg = _train_config(args, ds)
    if args.restarts < 1:
        raise ConfigError("--restarts must be >= 1")
    out = _outdir(args.out)
    ckpt = out / "checkpoint.json"
    failure = out / "failure.json"
    try:
        res = E.train_restarts(ds, cfg, args.restarts,
                               progress=lambda e, tr, va: log.info("epoch %d train %.4f val %.4f", e, tr, va))
    except BaseException as exc:
        write_json(failure, {"format_version": FORMAT_VERSION, "config": cfg.to_json(), "seed": args.seed,
                             "command": _echo(args), "error": repr(exc),
                             "traceback": traceback.format_exc()})
        raise
    rows = [(r, e, split, loss) for r, h in enumerate(res.histories) for e, split, loss in h.rows]
    write_csv(out / "history.csv", ("restart", "epoch", "split", "loss"), rows)
    write_json(ckpt, {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_json(),
        "seed": args.seed,
        "command": _echo(args),
        "data": ds.provenance,
        "best_restart": res.best_restart,
        "best_val": res.history.best_val,
        "param_hash": res.model.param_hash(),
        "model": res.model.to_json(),
    })
    if failure.exists():
        failure.unlink()
    print(f"checkpoint {ckpt} (restart {res.best_restart}, val {res.history.best_val:.4f})")


def cmd_eval(args):
    doc, model = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    _check_dims(model, ds)
    if ds.Z is None:
        raise DataError("evaluation needs ground-truth latents (Z.csv)")
    if args.S < 2:
        raise ConfigError("--S must be >= 2")
    report = E.evaluate(model, ds, args.split, S=args.S, seed=args.seed, bootstrap=args.bootstrap)
    out = _outdir(args.out)
    body = report.to_json()
    write_json(out / "report.json", {"format_version": FORMAT_VERSION, "config": doc.get("config"),
                                     "command": _echo(args), "data": ds.provenance, "report": body})
    head = ("scheme", "mode", "seed") + tuple(body)
    write_csv(out / "report.csv", head, [(ds.provenance.get("scheme", "external"), model.mode,
                                         doc.get("seed")) + tuple(body.values())])
    print(json.dumps(body, indent=2))


def cmd_alpha_report(args):
    doc, model = _load_checkpoint(args.checkpoint)
    if model.mode != "ci":
        raise ConfigError(f"alpha report needs a ci checkpoint, got mode {model.mode!r}")
    ds = _load_data(args.data)
    _check_dims(model, ds)
    if args.grid_size < 2 or args.K < 1:
        raise ConfigError("--grid-size must be >= 2 and --K >= 1")
    part = ds.subset(args.split)
    rep = E.alpha_report(model, part.X, part.U, args.grid_size, args.K, args.seed)
    out = _outdir(args.out)
    write_csv(out / "alpha_records.csv", AlphaRecord.FIELDS,
              [tuple(getattr(r, f) for f in AlphaRecord.FIELDS) for r in rep.records])
    write_json(out / "contingency.json", {"format_version": FORMAT_VERSION, "config": doc.get("config"),
                                          "command": _echo(args), **rep.to_json()})
    print(f"correlation {rep.correlation:.4f}")
    print("formula \\ grid  " + "  ".join(f"{c:>8}" for c in E.ALPHA_CLASSES))
    for name, row in zip(E.ALPHA_CLASSES, rep.contingency):
        print(f"{name:>14}  " + "  ".join(f"{v:>8d}" for v in row))


def cmd_collapse(args):
    try:
        gammas = [float(g) for g in args.gammas.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --gammas: {exc}") from exc
    if not gammas or any(g <= 0 for g in gammas):
        raise ConfigError("--gammas must be a nonempty list of positive values")
    out = _outdir(args.out)
    rows, failures = [], []
    for g in gammas:
        try:
            rows += E.collapse_run(args.scheme, g, args.seed, n=args.n, restarts=args.restarts,
                                   epochs=args.epochs)
        except (FloatingPointError, models.TrainingAborted, ad.NonFiniteError) as exc:
            log.error("gamma %s failed: %s", g, exc)
            failures.append({"gamma": g, "error": repr(exc)})
    head = ("scheme", "mode", "gamma", "seed", "collapse_score", "cod_post", "mcc_post", "best_val")
    write_csv(out / "collapse.csv", head, [tuple(r[k] for k in head) for r in rows])
    write_json(out / "collapse.json", {"format_version": FORMAT_VERSION, "command": _echo(args),
                                       "rows": rows, "failures": failures})
    for r in rows:
        print(f"gamma {r['gamma']:<8g} {r['mode']:<5} collapse {r['collapse_score']:.4f}")
    if failures and not rows:
        raise FloatingPointError("every gamma failed")


# parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="civae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scheme", required=True, choices=sorted(synthdata.GENERATORS))
    g.add_argument("--n", type=int, default=E.DESK_N)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--noise-std", type=float, default=1.0)
    g.add_argument("--fractions", default="0.8,0.1,0.1")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--mode", choices=models.MODES, default="ci")
    t.add_argument("--epochs", type=int, default=E.DESK_EPOCHS)
    t.add_argument("--batch-size", type=int, default=models.TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=models.TrainConfig.learning_rate)
    t.add_argument("--k-train", type=int, default=1)
    t.add_argument("--alpha-grid-train", type=int, default=21)
    t.add_argument("--obs-log-std", type=float, default=0.0)
    t.add_argument("--learn-obs-noise", action="store_true")
    t.add_argument("--hidden", help="comma-separated hidden widths (default depends on scheme)")
    t.add_argument("--restarts", type=int, default=E.DESK_RESTARTS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=synthdata.SPLITS, default="test")
    e.add_argument("--S", type=int, default=E.EVAL_S)
    e.add_argument("--bootstrap", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("alpha-report", help="grid vs closed-form alpha agreement")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", choices=synthdata.SPLITS, default="test")
    a.add_argument("--grid-size", type=int, default=E.REPORT_GRID)
    a.add_argument("--K", type=int, default=E.REPORT_K)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_alpha_report)

    c = sub.add_parser("collapse", help="observation-noise sweep, ivae vs ci")
    c.add_argument("--scheme", choices=sorted(synthdata.GENERATORS), default="sine")
    c.add_argument("--gammas", default="0.1,1,10")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n", type=int, default=E.DESK_N)
    c.add_argument("--epochs", type=int, default=E.DESK_EPOCHS)
    c.add_argument("--restarts", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collapse)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, models.TrainingAborted, ad.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ad.ShapeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
