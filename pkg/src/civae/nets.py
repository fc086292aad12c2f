"""Dense feed-forward networks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {
    "tanh": ad.tanh,
    "lrelu": ad.leaky_relu,
    "linear": None,
}


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: str = "linear"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ad.ShapeError(f"layer weight {self.W.shape} / bias {self.b.shape} mismatch")


@dataclass
class MlpNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[1] != b.W.shape[0]:
                raise ad.ShapeError(f"layer widths do not chain: {a.W.shape} -> {b.W.shape}")

    @classmethod
    def init(cls, sizes, acts, rng: np.random.Generator, gain=1.0) -> "MlpNet":
        """Fan-in scaled uniform init: ``U(-gain/sqrt(fan_in), gain/sqrt(fan_in))``."""
        if len(acts) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
            bound = gain / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append(Layer(W, b, act))
        return cls(layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].W.shape[1]

    def param_count(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.W, l.b])
        return out

    def with_arrays(self, arrays) -> "MlpNet":
        arrays = list(arrays)
        return MlpNet([Layer(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64), l.act)
                       for l, W, b in zip(self.layers, arrays[0::2], arrays[1::2])])

    def __call__(self, x, arrays=None):
        """Apply the network; ``arrays`` overrides the stored weights (e.g. tape leaves)."""
        weights = self.arrays() if arrays is None else list(arrays)
        xv = ad.value_of(x)
        if xv.shape[-1] != self.d_in:
            raise ad.ShapeError(f"network expects input width {self.d_in}, got {xv.shape}")
        h = x
        for l, W, b in zip(self.layers, weights[0::2], weights[1::2]):
            h = h @ W + b
            f = ACTIVATIONS[l.act]
            if f is not None:
                h = f(h)
        return h

    def to_json(self) -> dict:
        return {
            "acts": [l.act for l in self.layers],
            "weights": [l.W.ravel().tolist() for l in self.layers],
            "shapes": [list(l.W.shape) for l in self.layers],
            "biases": [l.b.tolist() for l in self.layers],
        }

    @classmethod
    def from_json(cls, d) -> "MlpNet":
        return cls([Layer(np.asarray(w, dtype=np.float64).reshape(s), np.asarray(b, dtype=np.float64), a)
                    for w, s, b, a in zip(d["weights"], d["shapes"], d["biases"], d["acts"])])
