"""Synthetic pair generation from a structural causal model.

A record is produced in three steps: a class-dependent anchor, a spurious
covariate s whose conditional mean aligns with the class only with probability
p_sc, and an invertible mixing map applied to (s, class code) plus isotropic
noise. A post-intervention reference stream draws s from its marginal instead,
independent of the class, through the otherwise identical mechanism.

Also houses the exact finite-support joint used by the enumeration oracles and
the on-disk dataset format (text header followed by little-endian blobs).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

# stream tags keeping observational and reference draws on disjoint rng streams
_STREAM_OBS = 0
_STREAM_PID = 1

# fixed view-augmentation strengths for the colored compositor
JITTER_SIGMA = 0.1
DROPOUT_RATE = 0.1

# shape-cluster magnitude spread for the colored compositor
SHAPE_SPREAD = 0.4


@dataclass(frozen=True)
class Environment:
    """One data-collection regime: how strongly s tracks the class."""

    env_id: int
    p_sc: float
    style_shift: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.p_sc < 1.0:
            raise ValidationError(f"p_sc must lie in (0,1), got {self.p_sc}")


@dataclass
class PairRecord:
    x_plus: np.ndarray
    x_label: np.ndarray
    s_true: np.ndarray | None
    env_id: int
    class_id: int


@dataclass(frozen=True)
class ScmConfig:
    d: int = 8
    n: int = 4
    noise_sigma: float = 0.05
    mixing: str = "linear-invertible"
    num_classes: int = 2
    label_noise: float = 0.0
    seed: int = 0
    s_noise: float = 1.0  # std-dev of s around its conditional mean

    def __post_init__(self):
        if self.mixing not in ("linear-invertible", "colored-compositor"):
            raise ValidationError(f"unknown mixing kind {self.mixing!r}")
        if self.embed_dim < 1 or (self.mixing == "colored-compositor"
                                  and self.embed_dim < 2):
            raise ValidationError(
                f"d={self.d} leaves no room for a class embedding beside n={self.n}")
        if self.noise_sigma < 0 or self.s_noise < 0:
            raise ValidationError("noise scales must be nonnegative")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValidationError("label_noise must lie in [0,1)")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")

    @property
    def embed_dim(self) -> int:
        return self.d - self.n


class Structures(NamedTuple):
    """Per-config fixed draws: mixing map, class codes, conditional s means."""

    mix: np.ndarray       # d x d invertible
    mix_inv: np.ndarray
    class_codes: np.ndarray  # num_classes x embed_dim
    s_means: np.ndarray      # num_classes x n


@lru_cache(maxsize=64)
def structures(cfg: ScmConfig) -> Structures:
    rng = np.random.default_rng((cfg.seed, 0xC0F9))
    q, r = np.linalg.qr(rng.standard_normal((cfg.d, cfg.d)))
    q = q * np.sign(np.diag(r))  # fix the sign gauge so the draw is stable
    scales = rng.uniform(0.5, 2.0, size=cfg.d)
    if cfg.mixing == "colored-compositor":
        # isometric mixing: the benchmark's signal-to-nuisance geometry is
        # then identical for every seed instead of varying with a random
        # per-coordinate gain
        mix = q
    else:
        mix = q @ np.diag(scales)

    codes = rng.standard_normal((cfg.num_classes, cfg.embed_dim))
    codes *= 2.0 / np.maximum(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12)

    if cfg.mixing == "colored-compositor":
        # orthogonal palette, one color axis per class; norm 9 makes the
        # color both easy to recover from s (error ~1e-6 at unit noise) and
        # loud enough in x to act as the dominant shortcut feature
        means = np.zeros((cfg.num_classes, cfg.n))
        for c in range(cfg.num_classes):
            means[c, c % cfg.n] = 9.0
    elif cfg.num_classes == 2:
        v = rng.standard_normal(cfg.n)
        v *= 3.0 / np.linalg.norm(v)
        means = np.stack([v, -v])
    else:
        means = rng.standard_normal((cfg.num_classes, cfg.n))
        means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    return Structures(mix, np.linalg.inv(mix), codes, means)


def record_rng(cfg: ScmConfig, env_id: int, index: int, stream: int = _STREAM_OBS):
    """Per-record generator stream; order-independent across workers."""
    return np.random.default_rng((cfg.seed, env_id, stream, index))


def _noisy_label(class_id: int, cfg: ScmConfig, rng) -> int:
    if cfg.label_noise > 0.0 and rng.random() < cfg.label_noise:
        return int(rng.integers(cfg.num_classes))
    return class_id


def _draw_mean_class(label: int, p_sc: float, num_classes: int, rng) -> int:
    """Class whose s-mean is used: the label w.p. p_sc, another class otherwise."""
    if rng.random() < p_sc:
        return label
    other = int(rng.integers(num_classes - 1))
    return other + 1 if other >= label else other


def gen_pair(class_id: int, env: Environment, cfg: ScmConfig, rng) -> PairRecord:
    """One record under linear-invertible mixing.

    The anchor is the deterministic class embedding pushed through the mixing
    map; x_plus mixes (s, class code) and adds isotropic observation noise.
    """
    if class_id >= cfg.num_classes:
        raise ValidationError(f"class_id {class_id} out of range")
    st = structures(cfg)
    label = _noisy_label(class_id, cfg, rng)
    mean_class = _draw_mean_class(label, env.p_sc, cfg.num_classes, rng)
    mu = st.s_means[mean_class].copy()
    if env.style_shift is not None:
        mu += np.asarray(env.style_shift, dtype=np.float64)
    s = mu + cfg.s_noise * rng.standard_normal(cfg.n)
    code = st.class_codes[class_id]
    x_label = st.mix @ np.concatenate([np.zeros(cfg.n), code])
    x_plus = st.mix @ np.concatenate([s, code]) + cfg.noise_sigma * rng.standard_normal(cfg.d)
    return PairRecord(x_plus, x_label, s, env.env_id, label)


def augment(x: np.ndarray, rng, jitter: float = JITTER_SIGMA,
            dropout: float = DROPOUT_RATE) -> np.ndarray:
    """Gaussian jitter plus coordinate dropout; the view-making transform."""
    out = x + jitter * rng.standard_normal(x.shape)
    out[rng.random(x.shape) < dropout] = 0.0
    return out


def _shape_code(class_id: int, cfg: ScmConfig, rng) -> np.ndarray:
    """Sign-symmetric class geometry for the colored compositor.

    Each class occupies an antipodal direction pair (its code vector, flipped
    half the time) with a jittered magnitude, so every class-conditional mean
    is zero: no linear readout of the raw coordinates beats chance, while a
    small nonlinear encoder separates the 2C clusters easily. The map
    (class, flip, magnitude) -> code stays injective because distinct codes
    are not collinear.
    """
    flip = -1.0 if rng.random() < 0.5 else 1.0
    w = 1.0 + SHAPE_SPREAD * abs(rng.standard_normal())
    return flip * w * structures(cfg).class_codes[class_id]


def _colored_record(class_id: int, env: Environment, cfg: ScmConfig, rng,
                    color_class: int | None) -> PairRecord:
    """Shared body of the colored generators; color_class=None samples at p_sc."""
    st = structures(cfg)
    label = _noisy_label(class_id, cfg, rng)
    if color_class is None:
        color_class = _draw_mean_class(label, env.p_sc, cfg.num_classes, rng)
    mu = st.s_means[color_class].copy()
    if env.style_shift is not None:
        mu += np.asarray(env.style_shift, dtype=np.float64)
    s = mu + cfg.s_noise * rng.standard_normal(cfg.n)
    base = st.mix @ np.concatenate([s, _shape_code(class_id, cfg, rng)])
    base = base + cfg.noise_sigma * rng.standard_normal(cfg.d)
    view_a = augment(base, rng)
    view_b = augment(base, rng)
    return PairRecord(view_a, view_b, s, env.env_id, label)


def gen_colored_dataset(cfg: ScmConfig, env: Environment, count: int) -> list[PairRecord]:
    """Color-coded surrogate digits: nonlinear shape from the class, color from s.

    The color axis tracks the (possibly noise-reassigned) label with
    probability env.p_sc and is the dominant, linearly readable direction;
    the class content sits in sign-symmetric shape clusters that only a
    nonlinear encoder can expose to a linear readout. Both views of a pair
    are independent augmentations of one base record.
    """
    if cfg.mixing != "colored-compositor":
        raise ValidationError("gen_colored_dataset requires colored-compositor mixing")
    out = []
    for i in range(count):
        rng = record_rng(cfg, env.env_id, i)
        out.append(_colored_record(int(i % cfg.num_classes), env, cfg, rng, None))
    return out


def gen_env_dataset(cfg: ScmConfig, env: Environment, count: int) -> list[PairRecord]:
    """Observational dataset under the configured mixing, classes balanced."""
    if cfg.mixing == "colored-compositor":
        return gen_colored_dataset(cfg, env, count)
    out = []
    for i in range(count):
        rng = record_rng(cfg, env.env_id, i)
        out.append(gen_pair(int(i % cfg.num_classes), env, cfg, rng))
    return out


def gen_pid_reference(cfg: ScmConfig, env: Environment, count: int) -> list[PairRecord]:
    """Reference stream with s drawn from its marginal, independent of class.

    The class marginal is uniform, so the s marginal is the uniform mixture of
    the per-class conditionals; everything else reuses the observational
    mechanism (same mixing map, same noise).
    """
    out = []
    for i in range(count):
        rng = record_rng(cfg, env.env_id, i, stream=_STREAM_PID)
        class_id = int(i % cfg.num_classes)
        donor = int(rng.integers(cfg.num_classes))
        if cfg.mixing == "colored-compositor":
            out.append(_colored_record(class_id, env, cfg, rng, donor))
        else:
            st = structures(cfg)
            label = _noisy_label(class_id, cfg, rng)
            mu = st.s_means[donor].copy()
            if env.style_shift is not None:
                mu += np.asarray(env.style_shift, dtype=np.float64)
            s = mu + cfg.s_noise * rng.standard_normal(cfg.n)
            code = st.class_codes[class_id]
            x_label = st.mix @ np.concatenate([np.zeros(cfg.n), code])
            x_plus = (st.mix @ np.concatenate([s, code])
                      + cfg.noise_sigma * rng.standard_normal(cfg.d))
            out.append(PairRecord(x_plus, x_label, s, env.env_id, label))
    return out


@dataclass
class DiscreteJoint:
    """Exact finite-support joint p[x_plus, label, s]."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 3:
            raise ValidationError("joint table must be indexed [x_plus, label, s]")
        if np.any(self.table < 0):
            raise ValidationError("joint has negative mass")
        if abs(self.table.sum() - 1.0) > 1e-12:
            raise ValidationError(f"joint mass {self.table.sum()} != 1")

    @property
    def n_x(self) -> int:
        return self.table.shape[0]

    @property
    def n_label(self) -> int:
        return self.table.shape[1]

    @property
    def n_s(self) -> int:
        return self.table.shape[2]

    def label_marginal(self) -> np.ndarray:
        return self.table.sum(axis=(0, 2))

    def s_marginal(self) -> np.ndarray:
        return self.table.sum(axis=(0, 1))

    def x_marginal(self) -> np.ndarray:
        return self.table.sum(axis=(1, 2))

    def label_s_marginal(self) -> np.ndarray:
        return self.table.sum(axis=0)


def gen_discrete_toy(p_sc: float, channel_noise: float) -> DiscreteJoint:
    """16-cell joint: binary label and s, x_plus in {0..3} encoding (label, s).

    The label is uniform, s equals the label with probability p_sc, and
    x_plus = 2*label_bit + s_bit where each bit flips independently with
    probability channel_noise. The per-bit channel keeps label and s
    conditionally independent given x_plus whenever they are independent
    marginally, which the enumeration oracles rely on.
    """
    if not 0.0 < p_sc < 1.0:
        raise ValidationError("p_sc must lie in (0,1)")
    if not 0.0 <= channel_noise < 0.5:
        raise ValidationError("channel_noise must lie in [0, 0.5)")
    q = channel_noise
    table = np.zeros((4, 2, 2))
    for y in (0, 1):
        for s in (0, 1):
            p_ys = 0.5 * (p_sc if s == y else 1.0 - p_sc)
            for b1 in (0, 1):
                for b0 in (0, 1):
                    p_b1 = 1.0 - q if b1 == y else q
                    p_b0 = 1.0 - q if b0 == s else q
                    table[2 * b1 + b0, y, s] = p_ys * p_b1 * p_b0
    return DiscreteJoint(table)


MAGIC = "pidbatch-dataset"
VERSION = 1


def write_dataset(path: str | Path, records: list[PairRecord], cfg: ScmConfig,
                  envs: list[Environment]) -> None:
    """Text header, then little-endian blobs: x_plus, x_label, s_true, ids."""
    if not records:
        raise ValidationError("refusing to write an empty dataset")
    has_s = records[0].s_true is not None
    header = io.StringIO()
    header.write(f"{MAGIC} {VERSION}\n")
    header.write(f"count {len(records)}\n")
    header.write(f"d {cfg.d}\n")
    header.write(f"n {cfg.n}\n")
    header.write(f"num_classes {cfg.num_classes}\n")
    header.write(f"mixing {cfg.mixing}\n")
    header.write(f"has_s {int(has_s)}\n")
    header.write(f"envs {len(envs)}\n")
    for env in envs:
        header.write(f"env {env.env_id} {env.p_sc!r}\n")
    header.write("end\n")
    x_plus = np.stack([r.x_plus for r in records]).astype("<f8")
    x_label = np.stack([r.x_label for r in records]).astype("<f8")
    class_id = np.array([r.class_id for r in records], dtype="<i4")
    env_id = np.array([r.env_id for r in records], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(x_plus.tobytes())
        fh.write(x_label.tobytes())
        if has_s:
            fh.write(np.stack([r.s_true for r in records]).astype("<f8").tobytes())
        fh.write(class_id.tobytes())
        fh.write(env_id.tobytes())


def read_dataset(path: str | Path) -> tuple[list[PairRecord], dict]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != MAGIC or int(first[1]) != VERSION:
            raise ValidationError(f"not a {MAGIC} v{VERSION} file: {path}")
        meta: dict = {"envs": {}}
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end":
                break
            if not line:
                raise ValidationError("dataset header not terminated")
            key, *rest = line.split()
            if key == "env":
                meta["envs"][int(rest[0])] = float(rest[1])
            elif key == "envs":
                meta["n_envs"] = int(rest[0])
            elif key == "mixing":
                meta[key] = rest[0]
            else:
                meta[key] = int(rest[0])
        count, d, n = meta["count"], meta["d"], meta["n"]

        def blob(dtype, shape):
            want = int(np.prod(shape)) * np.dtype(dtype).itemsize
            raw = fh.read(want)
            if len(raw) != want:
                raise ValidationError("dataset body truncated")
            return np.frombuffer(raw, dtype=dtype).reshape(shape)

        x_plus = blob("<f8", (count, d))
        x_label = blob("<f8", (count, d))
        s_true = blob("<f8", (count, n)) if meta["has_s"] else None
        class_id = blob("<i4", (count,))
        env_id = blob("<i4", (count,))
        if fh.read(1):
            raise ValidationError("trailing bytes after dataset body")
    records = [PairRecord(x_plus[i].copy(), x_label[i].copy(),
                          None if s_true is None else s_true[i].copy(),
                          int(env_id[i]), int(class_id[i]))
               for i in range(count)]
    return records, meta
