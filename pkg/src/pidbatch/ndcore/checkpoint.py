"""Checkpoint serialization for Mlp parameters.

Layout, one model per file:
  ASCII header lines:  ``pidbatch-mlp 1``, ``layers <L>``, then per layer
  ``layer <i> <in> <out> <activation>``, closed by ``end``.
  Binary body: per layer, the weight matrix (row-major) then the bias vector,
  both as little-endian 64-bit floats.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .mlp import Mlp
from .tensor import Tensor

MAGIC = "pidbatch-mlp"
VERSION = 1


def save_mlp(mlp: Mlp, path: str | Path) -> None:
    header = io.StringIO()
    header.write(f"{MAGIC} {VERSION}\n")
    header.write(f"layers {len(mlp.weights)}\n")
    for i, (w, act) in enumerate(zip(mlp.weights, mlp.activations)):
        header.write(f"layer {i} {w.shape[0]} {w.shape[1]} {act}\n")
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for w, b in zip(mlp.weights, mlp.biases):
            fh.write(w.data.astype("<f8").tobytes())
            fh.write(b.data.astype("<f8").tobytes())


def load_mlp(path: str | Path) -> Mlp:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != MAGIC or int(first[1]) != VERSION:
            raise ValidationError(f"not a {MAGIC} v{VERSION} checkpoint: {path}")
        kw, count = fh.readline().decode("ascii").split()
        if kw != "layers":
            raise ValidationError("malformed checkpoint header")
        shapes: list[tuple[int, int]] = []
        acts: list[str] = []
        for i in range(int(count)):
            parts = fh.readline().decode("ascii").split()
            if len(parts) != 5 or parts[0] != "layer" or int(parts[1]) != i:
                raise ValidationError("malformed checkpoint layer line")
            shapes.append((int(parts[2]), int(parts[3])))
            acts.append(parts[4])
        if fh.readline().decode("ascii").strip() != "end":
            raise ValidationError("checkpoint header not terminated by 'end'")
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(shapes):
            wb = fh.read(8 * n_in * n_out)
            bb = fh.read(8 * n_out)
            if len(wb) != 8 * n_in * n_out or len(bb) != 8 * n_out:
                raise ValidationError("checkpoint body truncated")
            w = np.frombuffer(wb, dtype="<f8").reshape(n_in, n_out)
            b = np.frombuffer(bb, dtype="<f8")
            weights.append(Tensor(w.copy(), requires_grad=True, name=f"mlp.w{i}"))
            biases.append(Tensor(b.copy(), requires_grad=True, name=f"mlp.b{i}"))
        if fh.read(1):
            raise ValidationError("trailing bytes after checkpoint body")
    return Mlp(weights, biases, acts)
