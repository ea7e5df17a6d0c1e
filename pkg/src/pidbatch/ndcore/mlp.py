"""Small dense multilayer perceptrons on the autodiff tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError
from . import tensor as td
from .tensor import Tensor

_ACTIVATIONS = {"tanh": td.tanh, "linear": lambda t: t}


@dataclass
class Mlp:
    """Fully connected layers; hidden activations default to tanh, output is linear."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValidationError("layer lists must have equal length")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValidationError(f"unknown activation kind {act!r}")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ShapeError(
                    f"layer {i} output dim {self.weights[i].shape[1]} does not feed "
                    f"layer {i + 1} input dim {self.weights[i + 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def create(cls, in_dim: int, hidden: list[int], out_dim: int,
               rng: np.random.Generator, activation: str = "tanh",
               name: str = "mlp") -> "Mlp":
        """Build with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        dims = [in_dim, *hidden, out_dim]
        weights, biases, acts = [], [], []
        for i in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[i])
            w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
            b = rng.uniform(-bound, bound, size=(dims[i + 1],))
            weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            biases.append(Tensor(b, requires_grad=True, name=f"{name}.b{i}"))
            acts.append(activation if i < len(dims) - 2 else "linear")
        return cls(weights, biases, acts)

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input last dim {x.shape[-1]} != model input dim {self.in_dim}")
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _ACTIVATIONS[act](h @ w + b)
        return h

    __call__ = forward


def forward(mlp: Mlp, x: Tensor) -> Tensor:
    return mlp.forward(x)
