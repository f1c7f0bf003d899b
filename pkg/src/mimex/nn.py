"""Plain feed-forward networks used by the policy and the baseline explorers."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import Linear

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"tanh": ad.tanh, "relu": ad.relu, "gelu": ad.gelu}


class MLP:
    def __init__(self, rng: np.random.Generator, sizes: Sequence[int], name: str,
                 activation: str = "tanh", final_activation: bool = False, dtype=np.float32):
        self.layers = [Linear(rng, a, b, f"{name}.{i}", dtype) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = ACTIVATIONS[activation]
        self.final_activation = final_activation

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.layers[0].weight.dtype))
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = self.act(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def scale_last(self, factor: float) -> None:
        self.layers[-1].weight.data *= factor
