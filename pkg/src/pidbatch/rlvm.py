"""Regularized latent-variable model for the spurious covariate.

Three learned parts: an encoder producing a diagonal-Gaussian posterior over s
from a pair (x_plus, x_label), a decoder reconstructing x_plus from (s,
x_label), and a conditional prior over s given the anchor. The prior is an
exponential family with Gaussian base measure exp(-s_i^2/2) and linear
sufficient statistics T_ij(s_i) = a_ij * s_i, whose natural parameters come
from a network g fed with the batch context and the anchor; that combination
is exactly Normal(mu, I) with mu_i = sum_j a_ij * lambda_ij, the normalizer
being absorbed by the Gaussian form.

The training loss per batch-task is reconstruction + KL to the conditional
prior, plus a column-orthogonality penalty on the coefficient matrix A.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .errors import NumericalError, ValidationError
from .ndcore import Mlp, Tensor
from .scmgen import PairRecord

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class PriorModel:
    """Coefficients A (n x k) and the natural-parameter network g."""

    A: Tensor
    g: Mlp
    n: int
    k: int

    def params(self) -> list[Tensor]:
        return [self.A, *self.g.params()]


@dataclass
class Posterior:
    mean: Tensor          # (B, n)
    log_variance: Tensor  # (B, n), clamped to [-10, 10]


@dataclass
class ElboConfig:
    alpha: float = 1.0
    decoder_sigma: float = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_task_size: int = 64
    seed: int = 0
    kl_warmup_epochs: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be nonnegative")
        if self.decoder_sigma <= 0:
            raise ValidationError("decoder_sigma must be positive")
        if self.kl_warmup_epochs < 0:
            raise ValidationError("kl_warmup_epochs must be nonnegative")


@dataclass
class RlvmModel:
    encoder: Mlp   # concat(x_plus, x_label) -> (mean, log_variance)
    decoder: Mlp   # concat(s, x_label) -> x_plus
    prior: PriorModel
    d: int

    @classmethod
    def create(cls, d: int, n: int = 4, k: int = 2,
               hidden: tuple[int, ...] = (64, 64), seed: int = 0) -> "RlvmModel":
        rng = np.random.default_rng((seed, 0x51D))
        encoder = Mlp.create(2 * d, list(hidden), 2 * n, rng, name="encoder")
        decoder = Mlp.create(n + d, list(hidden), d, rng, name="decoder")
        g = Mlp.create(2 * d, list(hidden), n * k, rng, name="prior_g")
        a = Tensor(0.1 * rng.standard_normal((n, k)), requires_grad=True, name="prior_a")
        return cls(encoder, decoder, PriorModel(a, g, n, k), d)

    def params(self) -> list[Tensor]:
        return [*self.encoder.params(), *self.decoder.params(), *self.prior.params()]

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "encoder": self.encoder.params(),
            "decoder": self.decoder.params(),
            "prior_g": self.prior.g.params(),
            "prior_a": [self.prior.A],
        }


def prior_mean(x_label, batch_context, prior: PriorModel) -> Tensor:
    """Conditional-prior mean(s): mu_i = sum_j a_ij * lambda_ij.

    The natural parameters are g(concat(batch_context, x_label)); the anchor
    vector doubles as the label embedding. Accepts a single anchor (1-d) or a
    batch of anchors (2-d); batch_context is one d-vector, the mean of the
    paired views over the current task (training) or the whole dataset
    (sampling phase).
    """
    xl = x_label if isinstance(x_label, Tensor) else Tensor(x_label)
    single = xl.ndim == 1
    if single:
        xl = nd.reshape(xl, (1, xl.shape[0]))
    ctx = np.broadcast_to(np.asarray(batch_context, dtype=np.float64),
                          (xl.shape[0], xl.shape[1])).copy()
    lam = prior.g(nd.concat([Tensor(ctx), xl], axis=1))
    if not np.all(np.isfinite(lam.data)):
        raise NumericalError("prior natural parameters are non-finite")
    lam = nd.reshape(lam, (xl.shape[0], prior.n, prior.k))
    mu = nd.tsum(lam * nd.reshape(prior.A, (1, prior.n, prior.k)), axis=2)
    return nd.reshape(mu, (prior.n,)) if single else mu


def encode(x_plus, x_label, encoder: Mlp) -> Posterior:
    """Diagonal-Gaussian posterior over s; log-variance clamped to [-10, 10]."""
    xp = x_plus if isinstance(x_plus, Tensor) else Tensor(x_plus)
    xl = x_label if isinstance(x_label, Tensor) else Tensor(x_label)
    if xp.ndim == 1:
        xp = nd.reshape(xp, (1, xp.shape[0]))
        xl = nd.reshape(xl, (1, xl.shape[0]))
    out = encoder(nd.concat([xp, xl], axis=1))
    n = out.shape[1] // 2
    mean = out[:, :n]
    log_var = nd.clip(out[:, n:], LOGVAR_MIN, LOGVAR_MAX)
    return Posterior(mean, log_var)


def reparam_sample(post: Posterior, rng) -> Tensor:
    """s = mean + exp(log_variance / 2) * z with z a standard-normal draw.

    The draw is a constant; gradients flow through mean and log_variance.
    """
    z = rng.standard_normal(post.mean.shape)
    return post.mean + nd.exp(post.log_variance * 0.5) * Tensor(z)


def kl_term(post: Posterior, prior_mu) -> Tensor:
    """KL( N(mean, diag exp(lv)) || N(prior_mu, I) ), summed per record.

    Closed form per coordinate: (exp(lv) + (mean - mu)^2 - 1 - lv) / 2.
    """
    mu = prior_mu if isinstance(prior_mu, Tensor) else Tensor(prior_mu)
    lv = post.log_variance
    gap = post.mean - mu
    per_coord = nd.exp(lv) + nd.square(gap) - 1.0 - lv
    return nd.tsum(per_coord * 0.5, axis=-1)


def ortho_penalty(a) -> Tensor:
    """Sum over unordered column pairs i<j of (A_col_i . A_col_j)^2.

    Counting convention: each distinct pair once, i.e. half the ordered-pair
    sum. Two identical unit columns score 1.0. Zero iff columns are mutually
    orthogonal; scaling A by c scales the value by c^4.
    """
    at = a if isinstance(a, Tensor) else Tensor(a)
    gram = nd.matmul(nd.transpose(at), at)
    k = gram.shape[0]
    diag = gram[np.arange(k), np.arange(k)]
    return (nd.tsum(nd.square(gram)) - nd.tsum(nd.square(diag))) * 0.5


def _batch_arrays(batch: list[PairRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not batch:
        raise ValidationError("empty batch-task")
    envs = {r.env_id for r in batch}
    if len(envs) != 1:
        raise ValidationError(f"batch-task mixes environments {sorted(envs)}")
    xp = np.stack([r.x_plus for r in batch])
    xl = np.stack([r.x_label for r in batch])
    for name, arr in (("paired view", xp), ("anchor", xl)):
        bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
        if bad.size:
            raise NumericalError(f"non-finite {name} input at record {bad[0]}")
    return xp, xl


def elbo(batch: list[PairRecord], model: RlvmModel, cfg: ElboConfig, rng,
         kl_scale: float = 1.0) -> Tensor:
    """Per-task loss to minimize: mean(reconstruction + KL) + alpha * penalty.

    One reparameterized s per record; the batch context is the mean of the
    task's x_plus vectors. kl_scale < 1 down-weights the KL term; the
    training loop ramps it from near 0 to 1 during warmup so the decoder
    keeps consuming the latent instead of settling on an anchor-only
    reconstruction. The objective proper is kl_scale = 1.
    """
    xp, xl = _batch_arrays(batch)
    ctx = xp.mean(axis=0)
    post = encode(xp, xl, model.encoder)
    s = reparam_sample(post, rng)
    recon = model.decoder(nd.concat([s, Tensor(xl)], axis=1))
    rec = nd.tsum(nd.square(Tensor(xp) - recon), axis=1) * (
        1.0 / (2.0 * cfg.decoder_sigma ** 2))
    kl = kl_term(post, prior_mean(xl, ctx, model.prior))
    loss = nd.tmean(rec + kl * kl_scale) + cfg.alpha * ortho_penalty(model.prior.A)
    if not np.all(np.isfinite(loss.data)):
        for name, term in (("reconstruction", rec.data), ("kl", kl.data)):
            bad = np.flatnonzero(~np.isfinite(term))
            if bad.size:
                raise NumericalError(f"non-finite {name} term at record {bad[0]}")
        raise NumericalError("non-finite orthogonality penalty")
    return loss


def partition_tasks(records: list[PairRecord], task_size: int) -> list[list[PairRecord]]:
    """Chunk records into single-environment batch-tasks, preserving order."""
    if task_size < 2:
        raise ValidationError("batch-task size must be at least 2")
    by_env: dict[int, list[PairRecord]] = {}
    for r in records:
        by_env.setdefault(r.env_id, []).append(r)
    tasks = []
    for env_id in by_env:
        rs = by_env[env_id]
        for at in range(0, len(rs), task_size):
            chunk = rs[at:at + task_size]
            if len(chunk) >= 2:
                tasks.append(chunk)
    return tasks


def distinct_label_env_pairs(tasks: list[list[PairRecord]]) -> int:
    return len({(r.class_id, r.env_id) for task in tasks for r in task})


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)

    def moving_average(self, window: int = 10) -> list[float]:
        v = self.epoch_losses
        return [float(np.mean(v[max(0, i - window + 1):i + 1])) for i in range(len(v))]

    def max_upward_drift(self, window: int = 10) -> float:
        """Largest single-step rise of the smoothed loss.

        The smoothed loss should trend downward; at a converged plateau the
        one-sample reparameterization draw leaves residual wiggle, so healthy
        runs show a small positive value rather than exactly zero.
        """
        ma = self.moving_average(window)
        if len(ma) < 2:
            return 0.0
        return max(0.0, max(b - a for a, b in zip(ma, ma[1:])))


def train_rlvm(tasks: list[list[PairRecord]], cfg: ElboConfig,
               model: RlvmModel | None = None, n: int = 4, k: int = 2,
               hidden: tuple[int, ...] = (64, 64)) -> tuple[RlvmModel, TrainLog]:
    """Minimize the mean per-task loss with Adam; deterministic per seed."""
    if not tasks:
        raise ValidationError("no batch-tasks")
    if model is None:
        model = RlvmModel.create(len(tasks[0][0].x_plus), n=n, k=k,
                                 hidden=hidden, seed=cfg.seed)
    n_pairs = distinct_label_env_pairs(tasks)
    need = model.prior.n * model.prior.k + 1
    if n_pairs < need:
        raise ValidationError(
            f"need >= {need} distinct (label, env) pairs for an identifiable "
            f"prior, got {n_pairs}")
    params = model.params()
    state = nd.AdamState()
    rng = np.random.default_rng((cfg.seed, 0xE1B0))
    log = TrainLog()
    for epoch in range(cfg.epochs):
        if cfg.kl_warmup_epochs > 0:
            kl_scale = min(1.0, (epoch + 1) / cfg.kl_warmup_epochs)
        else:
            kl_scale = 1.0
        total = 0.0
        for task in tasks:
            for p in params:
                p.grad = None
            with nd.Tape() as tape:
                loss = elbo(task, model, cfg, rng, kl_scale)
            nd.backward(tape, loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            nd.adam_step(params, grads, state, lr=cfg.lr)
            total += loss.item()
        mean_loss = total / len(tasks)
        if mean_loss > 1e6 or not np.isfinite(mean_loss):
            raise NumericalError(f"training diverged at epoch {epoch}: {mean_loss}")
        log.epoch_losses.append(mean_loss)
    sv = np.linalg.svd(model.prior.A.data, compute_uv=False)
    if sv.size and sv[-1] <= 1e-8 * max(sv[0], 1e-30):
        raise NumericalError("trained coefficient matrix lost full column rank")
    return model, log


def save_rlvm(model: RlvmModel, out_dir: str | Path, manifest: dict) -> None:
    """Four ndcore checkpoints plus a JSON manifest sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nd.save_mlp(model.encoder, out / "encoder.ckpt")
    nd.save_mlp(model.decoder, out / "decoder.ckpt")
    nd.save_mlp(model.prior.g, out / "prior_g.ckpt")
    a_as_layer = Mlp([Tensor(model.prior.A.data.copy(), requires_grad=True)],
                     [Tensor(np.zeros(model.prior.k), requires_grad=True)], ["linear"])
    nd.save_mlp(a_as_layer, out / "prior_a.ckpt")
    body = dict(manifest)
    body.update(n=model.prior.n, k=model.prior.k, d=model.d)
    (out / "manifest.json").write_text(
        json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n")


def load_rlvm(out_dir: str | Path) -> tuple[RlvmModel, dict]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    encoder = nd.load_mlp(out / "encoder.ckpt")
    decoder = nd.load_mlp(out / "decoder.ckpt")
    g = nd.load_mlp(out / "prior_g.ckpt")
    a_layer = nd.load_mlp(out / "prior_a.ckpt")
    a = Tensor(a_layer.weights[0].data.copy(), requires_grad=True, name="prior_a")
    n, k = int(manifest["n"]), int(manifest["k"])
    if a.shape != (n, k):
        raise ValidationError("coefficient matrix shape disagrees with manifest")
    return RlvmModel(encoder, decoder, PriorModel(a, g, n, k), int(manifest["d"])), manifest
