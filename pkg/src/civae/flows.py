"""Affine coupling stacks used as ground-truth mixing functions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import MlpNet

PAD_AMPLITUDE = 0.01
GT_BLOCKS = 4
GT_HIDDEN = 32
GT_DIM = 100
# init gain giving roughly unit per-coordinate signal spread at d=100
GT_GAIN = 2.0


def make_rng(seed) -> np.random.Generator:
    """The package-wide seeded generator (Philox counter-based bit generator)."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class CouplingBlock:
    parity: int
    scale_net: MlpNet
    shift_net: MlpNet


@dataclass
class CouplingStack:
    dim: int
    blocks: list[CouplingBlock] = field(default_factory=list)

    def _halves(self, parity):
        h = self.dim // 2
        first, second = np.arange(h), np.arange(h, self.dim)
        # parity 0 conditions on the first half and moves the second
        return (first, second) if parity == 0 else (second, first)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "blocks": [{"parity": b.parity, "scale": b.scale_net.to_json(), "shift": b.shift_net.to_json()}
                       for b in self.blocks],
        }

    @classmethod
    def from_json(cls, d) -> "CouplingStack":
        return cls(d["dim"], [CouplingBlock(b["parity"], MlpNet.from_json(b["scale"]), MlpNet.from_json(b["shift"]))
                              for b in d["blocks"]])


def _log_scale(block, cond):
    return 2.0 * np.tanh(block.scale_net(cond))


def build_stack(dim, seed, n_blocks=GT_BLOCKS, hidden=GT_HIDDEN, gain=GT_GAIN, zero=False) -> CouplingStack:
    """Random coupling stack; ``zero=True`` gives the identity map."""
    if dim < 2:
        raise ValueError("coupling needs dim >= 2")
    rng = make_rng(seed)
    h = dim // 2
    blocks = []
    for k in range(n_blocks):
        parity = k % 2
        n_cond, n_move = (h, dim - h) if parity == 0 else (dim - h, h)
        nets = []
        for _ in range(2):
            net = MlpNet.init([n_cond, hidden, n_move], ["tanh", "linear"], rng, gain=gain)
            if zero:
                net = net.with_arrays([np.zeros_like(a) for a in net.arrays()])
            nets.append(net)
        blocks.append(CouplingBlock(parity, *nets))
    return CouplingStack(dim, blocks)


def _check_dim(f: CouplingStack, v):
    if v.shape[-1] != f.dim:
        raise ad.ShapeError(f"flow expects dimension {f.dim}, got {v.shape[-1]}")


def flow_forward(f: CouplingStack, v) -> np.ndarray:
    v = np.array(v, dtype=np.float64)
    _check_dim(f, v)
    squeeze = v.ndim == 1
    x = np.atleast_2d(v)
    for block in f.blocks:
        cond_idx, move_idx = f._halves(block.parity)
        cond = x[:, cond_idx]
        x[:, move_idx] = x[:, move_idx] * np.exp(_log_scale(block, cond)) + block.shift_net(cond)
    return x[0] if squeeze else x


def flow_inverse(f: CouplingStack, x) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    _check_dim(f, x)
    squeeze = x.ndim == 1
    v = np.atleast_2d(x)
    for block in reversed(f.blocks):
        cond_idx, move_idx = f._halves(block.parity)
        cond = v[:, cond_idx]
        v[:, move_idx] = (v[:, move_idx] - block.shift_net(cond)) * np.exp(-_log_scale(block, cond))
    return v[0] if squeeze else v


def pad_constants(d_z, d_x, seed) -> np.ndarray:
    if d_z > d_x:
        raise ValueError(f"latent dimension {d_z} exceeds target dimension {d_x}")
    rng = make_rng([seed, 0x9AD])
    return rng.uniform(-PAD_AMPLITUDE, PAD_AMPLITUDE, size=d_x - d_z)


def pad_latent(z, d_x, seed) -> np.ndarray:
    """Embed latents in the first coordinates, the rest filled with fixed small constants."""
    z = np.asarray(z, dtype=np.float64)
    d_z = z.shape[-1]
    c = pad_constants(d_z, d_x, seed)
    fill = np.broadcast_to(c, z.shape[:-1] + c.shape)
    return np.concatenate([z, fill], axis=-1)


@dataclass
class MixingFunction:
    """Latent-to-observation map: pad then push through a coupling stack."""
    stack: CouplingStack
    d_z: int
    seed: int

    def __call__(self, z):
        return flow_forward(self.stack, pad_latent(z, self.stack.dim, self.seed))

    def to_json(self) -> dict:
        return {"d_z": self.d_z, "seed": self.seed, "stack": self.stack.to_json()}

    @classmethod
    def from_json(cls, d) -> "MixingFunction":
        return cls(CouplingStack.from_json(d["stack"]), d["d_z"], d["seed"])


def gt_mixing(d_z, seed, d_x=GT_DIM) -> MixingFunction:
    return MixingFunction(build_stack(d_x, seed), d_z, seed)
