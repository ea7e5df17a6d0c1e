"""End-to-end evaluation: linear probes, ID/OOD accuracy, spurious-reliance
probes, prior-alignment fits, and ablation sweeps.

The centerpiece is `ood_comparison`: train two SSL encoders that differ only
in how batch indices are composed (uniform shuffling vs balancing-score
matching), freeze both, and probe them on a held-out environment whose
color-class correlation is reversed. All trend metrics use paired seeds —
identical seeds and configs across arms — so arm differences are attributable
to batch composition alone.

Every report is a pure function of (checkpoints, datasets, seeds); wall-clock
times are kept out of the serialized records (a sidecar file carries them) so
re-runs produce byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import balance, rlvm, sampler, ssltrain
from .errors import NumericalError, ValidationError
from .oracle import batch_pid_check
from .rlvm import ElboConfig, RlvmModel, prior_mean
from .sampler import MatchPool, dataset_fingerprint
from .scmgen import Environment, PairRecord, ScmConfig, gen_env_dataset, structures
from .ssltrain import SslConfig, epoch_index_groups, train_ssl

ARMS = ("random", "pid")

# environment-id layout: the SSL train set, the probe-training set, and the
# two test sets each get their own id so every split draws fresh noise
ENV_SSL_TRAIN = 0
ENV_PROBE = 1
ENV_ID_TEST = 2
ENV_OOD_TEST = 3
ENV_AUX_BASE = 10      # extra score-model environments
ENV_HELDOUT_BASE = 20  # prior-alignment grid environments

Embed = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# linear probes


@dataclass
class ProbeFit:
    """A converged multinomial-logistic head over frozen features."""

    weights: np.ndarray  # (m, C)
    bias: np.ndarray     # (C,)
    iterations: int
    converged: bool

    def predict(self, features: np.ndarray) -> np.ndarray:
        logits = np.asarray(features, dtype=np.float64) @ self.weights + self.bias
        return np.argmax(logits, axis=1)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_multinomial(features: np.ndarray, labels: np.ndarray, n_classes: int,
                    *, l2: float = 1e-4, tol: float = 1e-8,
                    max_iter: int = 100_000,
                    init: tuple[np.ndarray, np.ndarray] | None = None
                    ) -> ProbeFit:
    """Multinomial logistic regression by accelerated full-batch descent.

    Minimizes mean cross-entropy plus 0.5*l2*||W||^2 (bias unregularized)
    with Nesterov momentum, a fixed 1/L step from the exact feature Gram
    spectrum, and gradient-based adaptive restarts. First-order only; the
    objective is convex, so every start converges to the same optimum.
    Convergence means the max-abs gradient entry falls to `tol`.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).ravel().astype(int)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("features must be 2-d with one label per row")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite probe features")
    if n_classes < 2:
        raise ValidationError("probe needs at least two classes")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError("labels out of range for the declared classes")
    n, m = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    # softmax curvature is bounded by 1/2, so L = lam_max(X'X)/(2N) + l2
    gram = x.T @ x
    lam_max = float(np.linalg.eigvalsh(gram)[-1]) if m else 0.0
    step = 1.0 / (0.5 * lam_max / n + l2)

    if init is None:
        w = np.zeros((m, n_classes))
        b = np.zeros(n_classes)
    else:
        w = np.array(init[0], dtype=np.float64)
        b = np.array(init[1], dtype=np.float64)
    vw, vb = w.copy(), b.copy()
    t = 1.0
    iterations = max_iter
    converged = False
    for it in range(max_iter):
        probs = _softmax(x @ vw + vb)
        g = (probs - onehot) / n
        gw = x.T @ g + l2 * vw
        gb = g.sum(axis=0)
        if max(np.abs(gw).max(initial=0.0), np.abs(gb).max()) <= tol:
            w, b = vw, vb
            iterations = it
            converged = True
            break
        w_next = vw - step * gw
        b_next = vb - step * gb
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        # restart the momentum sequence when it points uphill
        if (gw * (w_next - w)).sum() + (gb * (b_next - b)).sum() > 0.0:
            t_next, beta = 1.0, 0.0
        vw = w_next + beta * (w_next - w)
        vb = b_next + beta * (b_next - b)
        w, b, t = w_next, b_next, t_next
    if not converged:
        raise NumericalError(
            f"probe failed to reach gradient tolerance {tol} in {max_iter} steps")
    return ProbeFit(w, b, iterations, converged)


def _record_digest(r: PairRecord) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(r.x_plus, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(r.x_label, dtype=np.float64).tobytes())
    return h.digest()


def _embed_records(embed: Embed, records: list[PairRecord]) -> np.ndarray:
    z = np.asarray(embed(np.stack([r.x_plus for r in records])), dtype=np.float64)
    if z.ndim != 2 or len(z) != len(records):
        raise ValidationError("embedding must return one feature row per record")
    return z


def linear_probe(embed: Embed, train_records: list[PairRecord],
                 test_records: list[PairRecord], *, l2: float = 1e-4,
                 tol: float = 1e-8) -> float:
    """Accuracy of a multinomial-logistic head over frozen embeddings.

    The head is fit on the training split's class ids to convergence and
    scored on the disjoint test split.
    """
    if not train_records or not test_records:
        raise ValidationError("both probe splits must be non-empty")
    seen = {_record_digest(r) for r in train_records}
    if any(_record_digest(r) in seen for r in test_records):
        raise ValidationError("probe splits share records")
    train_y = np.array([r.class_id for r in train_records])
    test_y = np.array([r.class_id for r in test_records])
    if len(np.unique(train_y)) < 2:
        raise ValidationError("degenerate single-class training split")
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    fit = fit_multinomial(_embed_records(embed, train_records), train_y,
                          n_classes, l2=l2, tol=tol)
    return fit.accuracy(_embed_records(embed, test_records), test_y)


def nearest_mean_labels(records: list[PairRecord],
                        s_means: np.ndarray) -> np.ndarray:
    """Discretize each record's spurious covariate to its closest anchor row."""
    means = np.atleast_2d(np.asarray(s_means, dtype=np.float64))
    if any(r.s_true is None for r in records):
        raise ValidationError("records carry no spurious covariate to discretize")
    s = np.stack([r.s_true for r in records])
    if s.shape[1] != means.shape[1]:
        raise ValidationError("covariate dimension does not match the anchors")
    d2 = ((s[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def spurious_probe(embed: Embed, records: list[PairRecord], *,
                   s_means: np.ndarray | None = None, l2: float = 1e-4,
                   tol: float = 1e-8) -> float:
    """How linearly readable the spurious covariate is from the embeddings.

    Records at even positions train the head, odd positions score it. When
    `s_means` is given the covariate is discretized to its nearest anchor;
    otherwise it must already hold integral scalar codes. Higher accuracy
    means the encoder kept more non-causal content.
    """
    if len(records) < 4:
        raise ValidationError("need at least four records to split")
    if s_means is not None:
        codes = nearest_mean_labels(records, s_means)
    else:
        if any(r.s_true is None for r in records):
            raise ValidationError("records carry no spurious covariate")
        s = np.stack([r.s_true for r in records])
        if s.shape[1] != 1 or not np.allclose(s, np.round(s)):
            raise ValidationError(
                "covariate is not discrete; pass s_means to discretize")
        codes = np.round(s[:, 0]).astype(int)
    z = _embed_records(embed, records)
    train, test = slice(0, None, 2), slice(1, None, 2)
    if len(np.unique(codes[train])) < 2:
        raise ValidationError("degenerate single-class training split")
    fit = fit_multinomial(z[train], codes[train], int(codes.max()) + 1,
                          l2=l2, tol=tol)
    return fit.accuracy(z[test], codes[test])


# ---------------------------------------------------------------------------
# prior-alignment (identifiability surrogate)


@dataclass
class AlignmentReport:
    """Affine fit of learned conditional-prior means onto generator truth."""

    r2: float
    cells: int
    learned: np.ndarray
    truth: np.ndarray


def true_prior_stats(cfg: ScmConfig, envs: list[Environment]) -> np.ndarray:
    """Generator-side E[s | label, env] on the (label x env) grid."""
    means = structures(cfg).s_means
    c = cfg.num_classes
    rows = []
    for env in envs:
        others = means.sum(axis=0)[None, :] - means
        cell = env.p_sc * means + (1.0 - env.p_sc) / (c - 1) * others
        if env.style_shift is not None:
            cell = cell + np.asarray(env.style_shift, dtype=np.float64)
        rows.append(cell)
    return np.concatenate(rows, axis=0)


def learned_prior_stats(model: RlvmModel, cfg: ScmConfig,
                        envs: list[Environment],
                        samples_per_env: int = 128) -> np.ndarray:
    """Model-side conditional-prior means on the same (label x env) grid.

    Each environment contributes one natural-parameter context (the mean of
    its paired views, mirroring training); cell values average the prior mean
    over that environment's records of the given label.
    """
    rows = []
    for env in envs:
        recs = gen_env_dataset(cfg, env, samples_per_env)
        ctx = np.stack([r.x_plus for r in recs]).mean(axis=0)
        for label in range(cfg.num_classes):
            sub = [r for r in recs if r.class_id == label]
            if not sub:
                raise ValidationError(
                    f"label {label} absent from the env {env.env_id} grid cell")
            mu = prior_mean(np.stack([r.x_label for r in sub]), ctx, model.prior)
            rows.append(mu.data.mean(axis=0))
    return np.stack(rows)


def affine_r2(learned: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-coordinate R-squared of the least-squares affine map
    learned -> truth; 1.0 iff the learned grid is an invertible affine image
    of the truth."""
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.ndim != 2 or truth.ndim != 2 or len(learned) != len(truth):
        raise ValidationError("statistic grids must align row for row")
    cells, width = learned.shape
    design = np.hstack([learned, np.ones((cells, 1))])
    if cells < width + 1 or np.linalg.matrix_rank(design) < width + 1:
        raise ValidationError(
            "unidentifiable configuration: rank-deficient statistic grid")
    coef, *_ = np.linalg.lstsq(design, truth, rcond=None)
    resid = truth - design @ coef
    total = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    keep = total > 0
    if not keep.any():
        raise ValidationError("truth grid is constant; nothing to explain")
    r2 = 1.0 - (resid[:, keep] ** 2).sum(axis=0) / total[keep]
    return float(r2.mean())


def identifiability_report(model: RlvmModel, cfg: ScmConfig,
                           envs: list[Environment], *,
                           samples_per_env: int = 128) -> AlignmentReport:
    """Fit learned prior means onto generator truth over a held-out grid."""
    if model.prior.n != cfg.n:
        raise ValidationError(
            f"latent width mismatch: model n={model.prior.n}, generator n={cfg.n}")
    if not envs:
        raise ValidationError("need at least one held-out environment")
    learned = learned_prior_stats(model, cfg, envs, samples_per_env)
    truth = true_prior_stats(cfg, envs)
    return AlignmentReport(affine_r2(learned, truth), len(learned), learned, truth)


def heldout_alignment_r2(model: RlvmModel, cfg: ScmConfig,
                         heldout_p_sc: tuple[float, ...]) -> float:
    """Alignment R² on fresh environments, NaN when the fit is undefined
    (e.g. the score model deliberately uses more latents than the generator)."""
    heldout = [Environment(ENV_HELDOUT_BASE + i, p)
               for i, p in enumerate(heldout_p_sc)]
    try:
        return identifiability_report(model, cfg, heldout).r2
    except ValidationError:
        return float("nan")


# ---------------------------------------------------------------------------
# the paired-arm OOD comparison


@dataclass
class ArmMetrics:
    """Every metric carries the dataset it was computed on and its arm."""

    arm: str
    dataset_hash: str
    id_accuracy: float
    ood_accuracy: float
    worst_case_risk: float
    batch_mi: float
    spurious_accuracy: float
    identifiability_r2: float | None
    wall_time: float = 0.0

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValidationError(f"unknown arm {self.arm!r}")
        for name in ("id_accuracy", "ood_accuracy", "spurious_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")


@dataclass
class EvalReport:
    dataset_hash: str
    config_hash: str
    seed: int
    arms: dict[str, ArmMetrics]

    @property
    def headline(self) -> float:
        """OOD accuracy advantage of matched batches over uniform ones."""
        return self.arms["pid"].ood_accuracy - self.arms["random"].ood_accuracy


@dataclass(frozen=True)
class HarnessConfig:
    """One full paired-arm experiment: data family, score model, SSL recipe."""

    scm: ScmConfig = field(default_factory=lambda: ScmConfig(
        d=12, n=2, seed=0, noise_sigma=0.05, mixing="colored-compositor",
        label_noise=0.1))
    ssl: SslConfig = field(default_factory=lambda: SslConfig(
        embedding_dim=16, epochs=20, lr=2e-3, a=15, hidden=(32, 32)))
    elbo: ElboConfig = field(default_factory=lambda: ElboConfig(
        alpha=1.0, epochs=40, lr=5e-3, batch_task_size=64))
    train_count: int = 1024
    probe_count: int = 768
    test_count: int = 1024
    train_p_sc: float = 0.775
    aux_p_sc: tuple[float, ...] = (0.9, 0.6)
    aux_count: int = 384
    heldout_p_sc: tuple[float, ...] = (0.85, 0.65)
    rlvm_n: int | None = None
    rlvm_k: int = 2
    rlvm_hidden: tuple[int, ...] = (32,)
    rlvm_restarts: int = 1
    score_source: str = "learned"
    probe_l2: float = 1e-4
    probe_tol: float = 1e-8

    def __post_init__(self):
        if self.score_source not in ("learned", "true"):
            raise ValidationError(f"unknown score source {self.score_source!r}")
        if not 0.0 < self.train_p_sc < 1.0:
            raise ValidationError("train_p_sc must lie in (0, 1)")
        if min(self.train_count, self.probe_count, self.test_count) < 4:
            raise ValidationError("splits too small to train and score probes")
        if self.rlvm_n is not None and self.rlvm_n < 1:
            raise ValidationError("rlvm_n must be positive when set")
        if self.rlvm_restarts < 1:
            raise ValidationError("rlvm_restarts must be positive")


def config_hash(cfg: HarnessConfig) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


def paired_arm_configs(template: SslConfig) -> tuple[SslConfig, SslConfig]:
    return (dataclasses.replace(template, batch_source="random"),
            dataclasses.replace(template, batch_source="pid"))


def ensure_paired(cfg_a: SslConfig, cfg_b: SslConfig) -> None:
    """Reject arm configs that differ in anything besides batch composition."""
    a, b = dataclasses.asdict(cfg_a), dataclasses.asdict(cfg_b)
    sources = {a.pop("batch_source"), b.pop("batch_source")}
    if a != b:
        diff = sorted(key for key in a if a[key] != b[key])
        raise ValidationError(
            f"arm configs must differ only in batch_source; also differ in {diff}")
    if sources != set(ARMS):
        raise ValidationError(
            f"arms must cover {ARMS}, got {sorted(sources)}")


def _true_score_pool(records: list[PairRecord], cfg: ScmConfig) -> MatchPool:
    s = np.stack([r.s_true for r in records])
    scores = balance.propensity_matrix(s, structures(cfg).s_means)
    return MatchPool(scores, np.arange(len(records)),
                     np.ones(len(records), dtype=bool),
                     dataset_fingerprint(records))


def score_dispersion(scores: np.ndarray) -> float:
    """Mean pairwise JS divergence over a deterministic subsample of rows.

    A model whose balancing scores are near-uniform (so matching degenerates
    to random grouping) has rows that barely differ; a model whose scores
    carve the dataset into clusters shows large pairwise divergences. Used to
    pick among variational fits, which are initialization-sensitive at this
    scale, without looking at any ground-truth factor.
    """
    rows = scores[: min(256, len(scores)): 8]
    vals = [balance.js_divergence(rows[i], rows[j])
            for i in range(len(rows)) for j in range(i + 1, len(rows))]
    return float(np.mean(vals)) if vals else 0.0


def aux_score_datasets(cfg: HarnessConfig) -> list[list[PairRecord]]:
    """Extra score-model environments (never probed) that keep the number of
    distinct (label, env) pairs above the identifiability floor."""
    return [gen_env_dataset(cfg.scm, Environment(ENV_AUX_BASE + i, p),
                            cfg.aux_count)
            for i, p in enumerate(cfg.aux_p_sc)]


def fit_score_pool(cfg: HarnessConfig, train: list[PairRecord],
                   aux: list[PairRecord] | None = None
                   ) -> tuple[MatchPool, RlvmModel]:
    """Fit the score model (best of `rlvm_restarts` seeds) and build the pool."""
    if aux is None:
        aux = [r for chunk in aux_score_datasets(cfg) for r in chunk]
    tasks = rlvm.partition_tasks(train + aux, cfg.elbo.batch_task_size)
    n = cfg.rlvm_n if cfg.rlvm_n is not None else cfg.scm.n
    data_hash = dataset_fingerprint(train)
    best: tuple[float, MatchPool, RlvmModel] | None = None
    for restart in range(cfg.rlvm_restarts):
        elbo_cfg = dataclasses.replace(cfg.elbo, seed=cfg.elbo.seed + 100 * restart)
        model, _ = rlvm.train_rlvm(tasks, elbo_cfg, n=n, k=cfg.rlvm_k,
                                   hidden=cfg.rlvm_hidden)
        pool = sampler.build_pool(train, model, cfg.ssl.seed,
                                  dataset_hash=data_hash)
        spread = score_dispersion(pool.scores)
        if best is None or spread > best[0]:
            best = (spread, pool, model)
    return best[1], best[2]


def batch_composition_mi(records: list[PairRecord], arm_cfg: SslConfig,
              pool: MatchPool | None) -> float:
    groups = epoch_index_groups(len(records), arm_cfg, 0, pool, None)
    labels = np.array([r.class_id for r in records])
    s = np.stack([r.s_true for r in records])
    batches = [(labels[g], s[g]) for g in groups]
    report = batch_pid_check(batches)
    try:
        return report.mean_mi
    except ValidationError:
        return float("nan")


def ood_comparison(cfg: HarnessConfig,
                   arms: tuple[SslConfig, SslConfig] | None = None,
                   *, prebuilt: tuple[MatchPool, RlvmModel] | None = None
                   ) -> EvalReport:
    """Train both arms with paired seeds and probe them ID and OOD.

    The probe head is always fit on a fresh in-distribution split and scored
    unchanged on an in-distribution test set and on a test set whose
    color-class correlation is reversed; the headline number is the OOD
    accuracy gap between the arms.

    `prebuilt` supplies an already-fitted (pool, score model) for callers
    that vary a parameter the score model cannot depend on (the batch-size
    sweep); the pool must have been built for this config's training split,
    which is enforced through its recorded dataset fingerprint.
    """
    if arms is None:
        arms = paired_arm_configs(cfg.ssl)
    ensure_paired(*arms)
    by_source = {c.batch_source: c for c in arms}

    train = gen_env_dataset(cfg.scm, Environment(ENV_SSL_TRAIN, cfg.train_p_sc),
                            cfg.train_count)
    data_hash = dataset_fingerprint(train)

    ident_r2 = None
    if prebuilt is not None:
        pool, score_model = prebuilt
        if pool.manifest_hash != data_hash:
            raise ValidationError(
                f"prebuilt pool was built for dataset {pool.manifest_hash}, "
                f"this config generates {data_hash}")
        ident_r2 = heldout_alignment_r2(score_model, cfg.scm, cfg.heldout_p_sc)
    elif cfg.score_source == "learned":
        pool, score_model = fit_score_pool(cfg, train)
        ident_r2 = heldout_alignment_r2(score_model, cfg.scm, cfg.heldout_p_sc)
    else:
        pool = _true_score_pool(train, cfg.scm)

    probe_train = gen_env_dataset(cfg.scm, Environment(ENV_PROBE, cfg.train_p_sc),
                                  cfg.probe_count)
    id_test = gen_env_dataset(cfg.scm, Environment(ENV_ID_TEST, cfg.train_p_sc),
                              cfg.test_count)
    ood_test = gen_env_dataset(cfg.scm,
                               Environment(ENV_OOD_TEST, 1.0 - cfg.train_p_sc),
                               cfg.test_count)
    probe_y = np.array([r.class_id for r in probe_train])
    n_classes = cfg.scm.num_classes
    s_means = structures(cfg.scm).s_means

    metrics = {}
    for name in ARMS:
        arm_cfg = by_source[name]
        started = time.perf_counter()
        model, _ = train_ssl(train, arm_cfg,
                             pool=pool if name == "pid" else None)
        fit = fit_multinomial(_embed_records(model.embed, probe_train), probe_y,
                              n_classes, l2=cfg.probe_l2, tol=cfg.probe_tol)
        id_acc = fit.accuracy(_embed_records(model.embed, id_test),
                              [r.class_id for r in id_test])
        ood_acc = fit.accuracy(_embed_records(model.embed, ood_test),
                               [r.class_id for r in ood_test])
        spur = spurious_probe(model.embed, probe_train + id_test,
                              s_means=s_means, l2=cfg.probe_l2,
                              tol=cfg.probe_tol)
        metrics[name] = ArmMetrics(
            arm=name,
            dataset_hash=data_hash,
            id_accuracy=id_acc,
            ood_accuracy=ood_acc,
            worst_case_risk=max(1.0 - id_acc, 1.0 - ood_acc),
            batch_mi=batch_composition_mi(train, arm_cfg, pool if name == "pid" else None),
            spurious_accuracy=spur,
            identifiability_r2=ident_r2 if name == "pid" else None,
            wall_time=time.perf_counter() - started,
        )
    return EvalReport(data_hash, config_hash(cfg), cfg.ssl.seed, metrics)


# ---------------------------------------------------------------------------
# ablation sweeps


@dataclass
class SweepRow:
    parameter: str
    value: float
    id_random: float
    id_pid: float
    ood_random: float
    ood_pid: float
    headline: float


def _sweep_config(cfg: HarnessConfig, parameter: str, value) -> HarnessConfig:
    if parameter == "alpha":
        return dataclasses.replace(
            cfg, elbo=dataclasses.replace(cfg.elbo, alpha=float(value)))
    return dataclasses.replace(
        cfg, ssl=dataclasses.replace(cfg.ssl, a=int(value)))


def ablation_sweep(parameter: str, values, cfg: HarnessConfig, *,
                   workers: int = 1) -> list[SweepRow]:
    """Re-run the paired comparison per parameter value.

    `alpha` varies the score model's column-orthogonality weight; `a` varies
    how many matches join each seed pair (batch size a+1 for both arms).
    Runs are independent and may execute in parallel; each is internally
    deterministic, so the table is identical for any worker count.
    """
    if parameter not in ("a", "alpha"):
        raise ValidationError(f"unknown sweep parameter {parameter!r}")
    values = list(values)
    if not values:
        raise ValidationError("sweep needs at least one value")

    shared: tuple[MatchPool, RlvmModel] | None = None
    if parameter == "a" and cfg.score_source == "learned":
        # Batch size cannot influence the score model, so fit it once and
        # let every sweep point group the same scores differently.
        train = gen_env_dataset(cfg.scm,
                                Environment(ENV_SSL_TRAIN, cfg.train_p_sc),
                                cfg.train_count)
        shared = fit_score_pool(cfg, train)

    def run(value) -> SweepRow:
        prebuilt = None
        if shared is not None:
            base_pool, model = shared
            # Fresh availability flags per run: matching consumes the pool,
            # and parallel runs must not share that state.
            prebuilt = (sampler.pool_from_scores(base_pool.scores,
                                                 base_pool.manifest_hash),
                        model)
        report = ood_comparison(_sweep_config(cfg, parameter, value),
                                prebuilt=prebuilt)
        return SweepRow(parameter, float(value),
                        report.arms["random"].id_accuracy,
                        report.arms["pid"].id_accuracy,
                        report.arms["random"].ood_accuracy,
                        report.arms["pid"].ood_accuracy,
                        report.headline)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, values))
    return [run(v) for v in values]


def peak_value(rows: list[SweepRow]) -> float:
    """Sweep value whose matched-arm OOD accuracy is highest."""
    if not rows:
        raise ValidationError("empty sweep")
    best = max(rows, key=lambda r: r.ood_pid)
    return best.value


def arm_spread(rows: list[SweepRow], arm: str) -> float:
    """Max minus min OOD accuracy across the sweep for one arm."""
    if arm not in ARMS:
        raise ValidationError(f"unknown arm {arm!r}")
    vals = [r.ood_pid if arm == "pid" else r.ood_random for r in rows]
    if not vals:
        raise ValidationError("empty sweep")
    return max(vals) - min(vals)


# ---------------------------------------------------------------------------
# serialization


def _times_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".times")


def write_reports(path, reports: list[EvalReport]) -> None:
    """Line-delimited reports; wall times go to a sidecar so the primary
    artifact is byte-identical across re-runs."""
    lines = []
    times = []
    for rep in reports:
        arms = {}
        for name, m in rep.arms.items():
            d = dataclasses.asdict(m)
            d.pop("wall_time")
            arms[name] = d
        lines.append(json.dumps(
            {"dataset_hash": rep.dataset_hash, "config_hash": rep.config_hash,
             "seed": rep.seed, "headline": rep.headline, "arms": arms},
            sort_keys=True))
        times.append({name: m.wall_time for name, m in rep.arms.items()})
    Path(path).write_text("\n".join(lines) + "\n")
    _times_path(path).write_text(json.dumps(times))


def read_reports(path) -> list[EvalReport]:
    out = []
    times = []
    tp = _times_path(path)
    if tp.exists():
        times = json.loads(tp.read_text())
    for i, line in enumerate(Path(path).read_text().splitlines()):
        row = json.loads(line)
        arms = {}
        for name, d in row["arms"].items():
            wall = times[i].get(name, 0.0) if i < len(times) else 0.0
            arms[name] = ArmMetrics(wall_time=wall, **d)
        out.append(EvalReport(row["dataset_hash"], row["config_hash"],
                              row["seed"], arms))
    return out


SWEEP_COLUMNS = ("parameter", "value", "id_random", "id_pid",
                 "ood_random", "ood_pid", "headline")


def write_sweep_table(path, rows: list[SweepRow]) -> None:
    """Flat tab-separated table, one sweep point per line."""
    lines = ["\t".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append("\t".join(
            [r.parameter] + [repr(getattr(r, c)) for c in SWEEP_COLUMNS[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sweep_table(path) -> list[SweepRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "\t".join(SWEEP_COLUMNS):
        raise ValidationError("not a sweep table")
    out = []
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) != len(SWEEP_COLUMNS):
            raise ValidationError("malformed sweep row")
        out.append(SweepRow(cells[0], *(float(c) for c in cells[1:])))
    return out
