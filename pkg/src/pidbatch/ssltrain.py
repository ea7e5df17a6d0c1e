"""Self-supervised trainers over paired views: contrastive and reconstructive.

Both objectives align the paired view with its anchor. The contrastive arm
treats each pair in a mini-batch as its own class and scores anchors by
cosine similarity of unit-normalized projections; the reconstructive arm
masks a fixed fraction of the paired view's coordinates and regresses the
full anchor from what remains. Mini-batches come either from uniform
shuffling or from a balancing-score match pool; every other piece of the
training loop is shared between the two sources.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from . import sampler as sampler_mod
from .errors import NumericalError, ShapeError, ValidationError
from .ndcore import Mlp, Tensor
from .sampler import MatchPool, MiniBatch
from .scmgen import PairRecord

BATCH_SOURCES = ("random", "pid")
OBJECTIVES = ("contrastive", "reconstruction")


@dataclass
class SslConfig:
    temperature: float = 0.5
    embedding_dim: int = 32
    mask_fraction: float = 0.25
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_source: str = "random"
    a: int = 15
    seed: int = 0
    objective: str = "contrastive"
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValidationError("mask_fraction must lie strictly in (0, 1)")
        if self.batch_source not in BATCH_SOURCES:
            raise ValidationError(f"batch_source must be one of {BATCH_SOURCES}")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.embedding_dim < 1 or self.a < 1 or self.epochs < 1:
            raise ValidationError("embedding_dim, a, and epochs must be positive")


@dataclass
class SslEncoder:
    """Feature extractor with a contrastive projection and a recon head."""

    encoder: Mlp       # data -> embedding (dim m)
    projection: Mlp    # embedding -> projection space (unit-normalized later)
    recon_head: Mlp    # embedding -> data space

    @classmethod
    def create(cls, d: int, cfg: SslConfig) -> "SslEncoder":
        rng = np.random.default_rng((cfg.seed, 0x55E))
        m = cfg.embedding_dim
        encoder = Mlp.create(d, list(cfg.hidden), m, rng, name="ssl_encoder")
        projection = Mlp.create(m, [m], m, rng, name="ssl_projection")
        recon_head = Mlp.create(m, [max(m, d)], d, rng, name="ssl_recon")
        return cls(encoder, projection, recon_head)

    def params(self) -> list[Tensor]:
        return [*self.encoder.params(), *self.projection.params(),
                *self.recon_head.params()]

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite encoder input")
        z = self.encoder(Tensor(x))
        if not np.all(np.isfinite(z.data)):
            raise NumericalError("non-finite embedding")
        return z.data


def unit_rows(z: Tensor) -> Tensor:
    """Project each row onto the unit sphere (gradient flows through)."""
    norms = nd.sqrt(nd.tsum(nd.square(z), axis=1, keepdims=True))
    return z / norms


def info_nce_loss(positives, anchors, temperature: float) -> Tensor:
    """Mean cross-entropy of picking each pair's own anchor among the batch.

    Row i's logits are the cosine similarities of the i-th paired view's
    projection against every anchor projection, divided by the temperature;
    the target is the matching anchor.
    """
    pos = positives if isinstance(positives, Tensor) else Tensor(positives)
    anc = anchors if isinstance(anchors, Tensor) else Tensor(anchors)
    if pos.ndim != 2 or anc.ndim != 2 or pos.shape != anc.shape:
        raise ShapeError(f"need matching 2-d batches, got {pos.shape} / {anc.shape}")
    b = pos.shape[0]
    if b < 2:
        raise ValidationError("contrastive batches need at least 2 pairs")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    for name, t in (("positives", pos), ("anchors", anc)):
        if np.max(np.abs((t.data * t.data).sum(axis=1) - 1.0)) > 1e-6:
            raise ValidationError(f"{name} rows must be unit-normalized")
    sim = nd.matmul(pos, nd.transpose(anc)) * (1.0 / temperature)
    own = sim[np.arange(b), np.arange(b)]
    return nd.tmean(nd.logsumexp(sim, axis=1) - own)


def coordinate_mask(d: int, mask_fraction: float, rng: np.random.Generator,
                    batch: int) -> np.ndarray:
    """Boolean (batch, d) array, True where a coordinate is masked out.

    Each row masks exactly ceil(mask_fraction * d) distinct coordinates.
    """
    if not 0.0 <= mask_fraction < 1.0:
        raise ValidationError("mask_fraction must lie in [0, 1)")
    k = int(np.ceil(mask_fraction * d))
    mask = np.zeros((batch, d), dtype=bool)
    for row in range(batch):
        mask[row, rng.permutation(d)[:k]] = True
    return mask


def recon_loss(x_plus, x_label, mask_fraction: float, model: SslEncoder,
               rng: np.random.Generator) -> Tensor:
    """Mean squared error of regressing the anchor from the masked view.

    Masked coordinates are zeroed; the subset is fixed by the rng draw.
    The strict-positive mask requirement applies to training configs; a zero
    fraction is accepted here so an unmasked identity map scores exactly 0.
    """
    xp = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    xl = np.atleast_2d(np.asarray(x_label, dtype=np.float64))
    if xp.shape != xl.shape:
        raise ShapeError(f"paired batches disagree: {xp.shape} / {xl.shape}")
    mask = coordinate_mask(xp.shape[1], mask_fraction, rng, xp.shape[0])
    visible = xp * ~mask
    z = model.encoder(Tensor(visible))
    xhat = model.recon_head(z)
    return nd.tmean(nd.square(xhat - Tensor(xl)))


def _contrastive_batch_loss(model: SslEncoder, xp: np.ndarray, xl: np.ndarray,
                            cfg: SslConfig) -> Tensor:
    zp = unit_rows(model.projection(model.encoder(Tensor(xp))))
    za = unit_rows(model.projection(model.encoder(Tensor(xl))))
    return info_nce_loss(zp, za, cfg.temperature)


@dataclass
class SslLogEntry:
    epoch: int
    arm: str
    loss: float
    wall_time: float


def write_training_log(path: str | Path, entries: list[SslLogEntry]) -> None:
    """One JSON record per line: epoch, arm, loss, wall-time."""
    lines = [json.dumps({"epoch": e.epoch, "arm": e.arm, "loss": e.loss,
                         "wall_time": e.wall_time}, sort_keys=True)
             for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_training_log(path: str | Path) -> list[SslLogEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        entries.append(SslLogEntry(int(rec["epoch"]), rec["arm"],
                                   float(rec["loss"]), float(rec["wall_time"])))
    return entries


def epoch_index_groups(n_records: int, cfg: SslConfig, epoch: int,
                        pool: MatchPool | None,
                        plan: list[MiniBatch] | None) -> list[list[int]]:
    """Index composition per batch — the only thing the arms disagree on."""
    rng = np.random.default_rng((cfg.seed, 0xBA7C, epoch))
    if cfg.batch_source == "random":
        perm = rng.permutation(n_records)
        return [perm[i:i + cfg.a + 1].tolist()
                for i in range(0, n_records, cfg.a + 1)]
    if plan is not None:
        return [list(b.members) for b in plan]
    pool.reset()
    return [b.members for b in sampler_mod.sample_epoch(pool, cfg.a, rng)]


def train_ssl(records: list[PairRecord], cfg: SslConfig,
              pool: MatchPool | None = None,
              plan: list[MiniBatch] | None = None,
              plan_manifest: str | None = None
              ) -> tuple[SslEncoder, list[SslLogEntry]]:
    """Shared training loop; arms differ only in batch index composition."""
    if not records:
        raise ValidationError("empty dataset")
    if cfg.batch_source == "pid":
        if pool is None and plan is None:
            raise ValidationError(
                "pid batch source needs a match pool or a batch plan")
        fingerprint = sampler_mod.dataset_fingerprint(records)
        if pool is not None and pool.manifest_hash and \
                pool.manifest_hash != fingerprint:
            raise ValidationError(
                f"pool was built for dataset {pool.manifest_hash}, "
                f"got {fingerprint}")
        if plan is not None and plan_manifest is not None and \
                plan_manifest != fingerprint:
            raise ValidationError(
                f"plan was built for dataset {plan_manifest}, got {fingerprint}")
    xp = np.stack([r.x_plus for r in records])
    xl = np.stack([r.x_label for r in records])
    model = SslEncoder.create(xp.shape[1], cfg)
    params = model.params()
    # decoupled weight decay on weight matrices only: feature directions the
    # loss stops using shrink away instead of persisting at their random-init
    # strength
    decayed = {id(w) for net in (model.encoder, model.projection,
                                 model.recon_head) for w in net.weights}
    state = nd.AdamState()
    mask_rng = np.random.default_rng((cfg.seed, 0x3A5C))
    log: list[SslLogEntry] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        groups = epoch_index_groups(len(records), cfg, epoch, pool, plan)
        losses = []
        for idx in groups:
            if cfg.objective == "contrastive" and len(idx) < 2:
                continue
            for p in params:
                p.grad = None
            with nd.Tape() as tape:
                if cfg.objective == "contrastive":
                    loss = _contrastive_batch_loss(model, xp[idx], xl[idx], cfg)
                else:
                    loss = recon_loss(xp[idx], xl[idx], cfg.mask_fraction,
                                      model, mask_rng)
            nd.backward(tape, loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            nd.adam_step(params, grads, state, lr=cfg.lr)
            if cfg.weight_decay > 0.0:
                shrink = 1.0 - cfg.lr * cfg.weight_decay
                for p in params:
                    if id(p) in decayed:
                        p.data *= shrink
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if not np.isfinite(mean_loss):
            raise NumericalError(f"training loss non-finite at epoch {epoch}")
        log.append(SslLogEntry(epoch, cfg.batch_source, mean_loss,
                               time.perf_counter() - started))
    return model, log


def save_ssl(model: SslEncoder, out_dir: str | Path, manifest: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nd.save_mlp(model.encoder, out / "encoder.ckpt")
    nd.save_mlp(model.projection, out / "projection.ckpt")
    nd.save_mlp(model.recon_head, out / "recon.ckpt")
    (out / "manifest.json").write_text(
        json.dumps(dict(manifest), sort_keys=True, separators=(",", ":")) + "\n")


def load_ssl(out_dir: str | Path) -> tuple[SslEncoder, dict]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return SslEncoder(nd.load_mlp(out / "encoder.ckpt"),
                      nd.load_mlp(out / "projection.ckpt"),
                      nd.load_mlp(out / "recon.ckpt")), manifest
