"""Label prior, encoder and decoder networks, and the training loop.

Three objective modes share one loop:

* ``ivae``: ELBO with the fused posterior q(z|x,u) (alpha = 0)
* ``encoder_elbo``: ELBO with the encoder q(z|x) (alpha = 1)
* ``ci``: ELBO at the samplewise optimal alpha, found by grid search each batch
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import gauss, objective
from .flows import make_rng
from .nets import MlpNet

log = logging.getLogger(__name__)

MODES = ("ivae", "encoder_elbo", "ci")
POSTERIORS = ("product", "encoder")
FORMAT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-4
    seed: int = 0
    K_train: int = 1
    alpha_grid_train: int = 21
    obs_noise_fixed: bool = True
    obs_log_std: float = 0.0
    d_Z: int = 2
    d_X: int = 100
    d_U: int = 1
    hidden: tuple = (60, 60)
    activation: str = "tanh"
    mode: str = "ci"
    posterior: str = "product"
    standardise: bool = True
    restart: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.restart < 0:
            raise ValueError("restart must be >= 0")
        for name in ("epochs", "batch_size", "K_train", "alpha_grid_train", "d_Z", "d_X", "d_U"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.alpha_grid_train < 2:
            raise ValueError("alpha_grid_train must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.posterior not in POSTERIORS:
            raise ValueError(f"posterior must be one of {POSTERIORS}")
        if not math.isfinite(self.obs_log_std):
            raise ValueError("obs_log_std must be finite")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        return cls(**d)


@dataclass
class CiModel:
    prior_net: MlpNet
    encoder_net: MlpNet
    decoder_net: MlpNet
    obs_log_std: float = 0.0
    mode: str = "ci"
    posterior_kind: str = "product"
    learn_obs_noise: bool = False
    # fixed affine standardisation of observations (encoder input, decoder output)
    x_shift: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    def __post_init__(self):
        d_z = self.decoder_net.d_in
        if self.prior_net.d_out != 2 * d_z or self.encoder_net.d_out != 2 * d_z:
            raise ad.ShapeError(
                f"latent dimensions disagree: prior emits {self.prior_net.d_out}, encoder "
                f"{self.encoder_net.d_out}, decoder takes {d_z} (heads must emit 2*d_z)")
        if self.decoder_net.d_out != self.encoder_net.d_in:
            raise ad.ShapeError(f"decoder emits {self.decoder_net.d_out}, encoder takes {self.encoder_net.d_in}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not math.isfinite(self.obs_log_std):
            raise ValueError("obs_log_std must be finite")
        if self.x_shift is None:
            self.x_shift = np.zeros(self.d_x)
        if self.x_scale is None:
            self.x_scale = np.ones(self.d_x)
        self.x_shift = np.asarray(self.x_shift, dtype=np.float64)
        self.x_scale = np.asarray(self.x_scale, dtype=np.float64)
        if self.x_shift.shape != (self.d_x,) or self.x_scale.shape != (self.d_x,):
            raise ad.ShapeError(f"standardisation vectors must have shape ({self.d_x},)")
        if not np.all(self.x_scale > 0):
            raise ValueError("x_scale must be positive")

    def standardised(self, x) -> "CiModel":
        """Copy whose observation scaling is fitted to the finite rows of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        x = x[np.isfinite(x).all(axis=1)]
        if len(x) < 2:
            raise ValueError("need at least two finite rows to fit the observation scaling")
        scale = x.std(axis=0)
        return replace(self, x_shift=x.mean(axis=0), x_scale=np.where(scale > 0, scale, 1.0))

    @property
    def d_z(self):
        return self.decoder_net.d_in

    @property
    def d_x(self):
        return self.encoder_net.d_in

    @property
    def d_u(self):
        return self.prior_net.d_in

    # parameters -------------------------------------------------------

    def _nets(self):
        return (("prior", self.prior_net), ("encoder", self.encoder_net), ("decoder", self.decoder_net))

    def param_names(self, trainable=True) -> list[str]:
        names = [f"{tag}.{i}.{k}" for tag, net in self._nets() for i in range(len(net.layers)) for k in "Wb"]
        if self.learn_obs_noise or not trainable:
            names.append("obs_log_std")
        return names

    def params(self, trainable=True) -> dict[str, np.ndarray]:
        out = {}
        for tag, net in self._nets():
            for i, layer in enumerate(net.layers):
                out[f"{tag}.{i}.W"] = layer.W
                out[f"{tag}.{i}.b"] = layer.b
        if self.learn_obs_noise or not trainable:
            out["obs_log_std"] = np.asarray(self.obs_log_std, dtype=np.float64)
        return out

    def with_params(self, params) -> "CiModel":
        params = {k: ad.value_of(v) for k, v in params.items()}
        nets = {}
        for tag, net in self._nets():
            nets[tag] = net.with_arrays(_net_arrays(params, tag, net))
        ols = float(params["obs_log_std"]) if "obs_log_std" in params else self.obs_log_std
        return replace(self, prior_net=nets["prior"], encoder_net=nets["encoder"],
                       decoder_net=nets["decoder"], obs_log_std=ols)

    def param_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, arr in self.params(trainable=False).items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(self.x_shift.tobytes())
        h.update(self.x_scale.tobytes())
        return h.hexdigest()

    # forward pieces ---------------------------------------------------

    def _apply(self, tag, net, inp, params):
        return net(inp, None if params is None else _net_arrays(params, tag, net))

    def posterior(self, x, u, params=None):
        return posterior_of(self, x, u, params)

    def recon_log_prob(self, x, z, params=None):
        return recon_log_prob(self, x, z, params)

    def decode(self, z, params=None):
        zv = ad.value_of(z)
        lead = zv.shape[:-1]
        flat = ad.reshape(z, (-1, zv.shape[-1])) if len(lead) != 1 else z
        out = self._apply("decoder", self.decoder_net, flat, params) * self.x_scale + self.x_shift
        return ad.reshape(out, lead + (self.d_x,)) if len(lead) != 1 else out

    # checkpoint -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "posterior_kind": self.posterior_kind,
            "learn_obs_noise": self.learn_obs_noise,
            "obs_log_std": self.obs_log_std,
            "nets": {tag: net.to_json() for tag, net in self._nets()},
            "x_shift": self.x_shift.tolist(),
            "x_scale": self.x_scale.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "CiModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {d.get('format_version')!r}")
        nets = {tag: MlpNet.from_json(v) for tag, v in d["nets"].items()}
        return cls(nets["prior"], nets["encoder"], nets["decoder"], float(d["obs_log_std"]),
                   d["mode"], d.get("posterior_kind", "product"), bool(d.get("learn_obs_noise", False)),
                   d.get("x_shift"), d.get("x_scale"))


def _net_arrays(params, tag, net):
    return [params[f"{tag}.{i}.{k}"] for i in range(len(net.layers)) for k in "Wb"]


def build_model(config: TrainConfig, seed=None) -> CiModel:
    """Fresh model with fan-in scaled uniform weights; log-std heads start at zero."""
    seed = config.seed if seed is None else seed
    rng = make_rng([seed, 17, config.restart])
    hid = list(config.hidden)
    acts = [config.activation] * len(hid) + ["linear"]

    def head(d_in):
        net = MlpNet.init([d_in, *hid, 2 * config.d_Z], acts, rng)
        last = net.layers[-1]
        last.W[:, config.d_Z:] = 0.0
        last.b[config.d_Z:] = 0.0
        return net

    prior = head(config.d_U)
    enc = head(config.d_X)
    dec = MlpNet.init([config.d_Z, *hid, config.d_X], acts, rng)
    return CiModel(prior, enc, dec, config.obs_log_std, config.mode, config.posterior,
                   learn_obs_noise=not config.obs_noise_fixed)


def posterior_of(model: CiModel, x, u, params=None):
    """Encoder q(z|x), fused posterior q(z|x,u) and label prior p(z|u)."""
    xv, uv = ad.value_of(x), ad.value_of(u)
    if xv.shape[-1] != model.d_x or uv.shape[-1] != model.d_u or xv.shape[0] != uv.shape[0]:
        raise ad.ShapeError(f"x {xv.shape} / u {uv.shape} do not match model dims ({model.d_x}, {model.d_u})")
    prior = gauss.from_params(model._apply("prior", model.prior_net, u, params))
    x_std = (x - model.x_shift) / model.x_scale
    q_enc = gauss.from_params(model._apply("encoder", model.encoder_net, x_std, params))
    for name, g in (("prior", prior), ("encoder", q_enc)):
        if not (np.all(np.isfinite(ad.value_of(g.mean))) and np.all(np.isfinite(ad.value_of(g.log_std)))):
            raise FloatingPointError(f"non-finite {name} network output")
    q_post = gauss.fuse(q_enc, prior) if model.posterior_kind == "product" else q_enc
    return q_enc, q_post, prior


def _obs_log_std(model, params):
    if params is not None and "obs_log_std" in params:
        return params["obs_log_std"]
    return model.obs_log_std


def recon_log_prob(model: CiModel, x, z, params=None):
    """log N(x; decoder(z), exp(2 obs_log_std) I), broadcasting over draws of z."""
    f = model.decode(z, params)
    ls = _obs_log_std(model, params)
    r2 = ad.sum_(ad.square(x - f), axis=-1)
    d = model.d_x
    return -0.5 * r2 * ad.exp(-2.0 * ls) - d * ls - 0.5 * d * gauss.LOG_2PI


def generate(model: CiModel, u, noise, observation_noise=None):
    """Draw z from the label prior and decode; optional additive observation noise."""
    prior = gauss.from_params(model.prior_net(np.asarray(u, dtype=np.float64)))
    z = gauss.sample(prior, noise)
    x = model.decode(z)
    if observation_noise is not None:
        x = x + np.exp(model.obs_log_std) * observation_noise
    return x


# training -------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, split, loss)
    skipped_batches: int = 0
    best_epoch: int = -1
    best_val: float = math.inf

    def losses(self, split):
        return [loss for _, s, loss in self.rows if s == split]


def batch_loss(model: CiModel, x, u, alpha, noise, params):
    """Negative mean ELBO of a batch for the model's mode at fixed alpha."""
    if model.mode == "ivae":
        elbo = objective.elbo_endpoint(model, x, u, "post", noise=noise, params=params)
    elif model.mode == "encoder_elbo":
        elbo = objective.elbo_endpoint(model, x, u, "enc", noise=noise, params=params)
    else:
        elbo = objective.elbo_alpha(model, x, u, alpha, noise=noise, params=params).total
    return -ad.mean(elbo)


def batch_alpha(model: CiModel, x, u, grid_size, noise, params=None):
    n = len(x)
    if model.mode == "ivae":
        return np.zeros(n)
    if model.mode == "encoder_elbo":
        return np.ones(n)
    return objective.alpha_star_grid(model, x, u, grid_size, noise=noise, params=params)[0]


def loss_and_grads(model: CiModel, x, u, alpha, noise, params=None):
    params = model.params() if params is None else params
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = batch_loss(model, x, u, alpha, noise, leaves)
    grads = tape.gradients(loss, list(leaves.values()))
    return float(loss.value), dict(zip(leaves, grads))


def evaluate_loss(model: CiModel, x, u, config: TrainConfig, seed, chunk=1000):
    """Negative mean training objective on held-out rows with fixed noise."""
    rng = make_rng([seed, 3])
    arng = make_rng([seed, 4])
    total = 0.0
    for lo in range(0, len(x), chunk):
        xb, ub = x[lo:lo + chunk], u[lo:lo + chunk]
        a_noise = objective.draw_noise(arng, config.K_train, len(xb), model.d_z)
        alpha = batch_alpha(model, xb, ub, config.alpha_grid_train, a_noise)
        noise = objective.draw_noise(rng, config.K_train, len(xb), model.d_z)
        total += float(ad.value_of(batch_loss(model, xb, ub, alpha, noise, None))) * len(xb)
    return total / len(x)


def train(model: CiModel, x_train, u_train, config: TrainConfig, x_val=None, u_val=None,
          progress: Callable | None = None, max_skips=3):
    """Adam on the negative ELBO; returns the best-validation model and its history.

    Each batch first computes per-row alpha (ci mode: grid search on a
    separate noise stream, so the gradient path sees the same draws in every
    mode), then ascends the mean ELBO at that alpha.
    """
    n = len(x_train)
    if n == 0:
        raise ValueError("empty training set")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds {n} training rows")
    if (model.d_x, model.d_u, model.d_z) != (config.d_X, config.d_U, config.d_Z):
        raise ad.ShapeError("model and config dimensions disagree")
    if config.standardise:
        model = model.standardised(x_train)
    rng = make_rng([config.seed, 1, config.restart])
    arng = make_rng([config.seed, 2, config.restart])
    state = ad.AdamState(lr=config.learning_rate)
    names = model.param_names()
    params = model.params()
    history = History()
    best = model
    consecutive = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, ub = x_train[idx], u_train[idx]
            a_noise = objective.draw_noise(arng, config.K_train, len(idx), model.d_z)
            noise = objective.draw_noise(rng, config.K_train, len(idx), model.d_z)
            try:
                alpha = batch_alpha(model, xb, ub, config.alpha_grid_train, a_noise, params)
                loss, grads = loss_and_grads(model, xb, ub, alpha, noise, params)
                if not math.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
            except FloatingPointError as exc:
                consecutive += 1
                history.skipped_batches += 1
                log.warning("epoch %d batch at %d skipped: %s", epoch, lo, exc)
                if consecutive >= max_skips:
                    raise TrainingAborted(
                        f"{consecutive} consecutive non-finite batches at epoch {epoch}; last error: {exc}") from exc
                continue
            consecutive = 0
            new = ad.adam_step(state, [params[k] for k in names], [grads[k] for k in names])
            params = dict(zip(names, new))
            batch_losses.append(loss)
        current = model.with_params(params)
        train_loss = float(np.mean(batch_losses)) if batch_losses else math.nan
        history.rows.append((epoch, "train", train_loss))
        if x_val is not None and len(x_val):
            val_loss = evaluate_loss(current, x_val, u_val, config, config.seed)
            history.rows.append((epoch, "val", val_loss))
        else:
            val_loss = train_loss
        if val_loss < history.best_val:
            history.best_val, history.best_epoch, best = val_loss, epoch, current
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    return best, history
