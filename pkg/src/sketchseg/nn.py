"""Parameter containers: dense layers and MLPs on top of the autodiff tensors."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0,
                 zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class MLP:
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, widths, rng: np.random.Generator, zero_last: bool = False,
                 last_gain: float = 1.0):
        self.layers = [
            Linear(a, b, rng, gain=2.0 if i < len(widths) - 2 else last_gain,
                   zero=zero_last and i == len(widths) - 2)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    @property
    def widths(self):
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")
