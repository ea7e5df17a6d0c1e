"""Exact enumeration and quadrature oracles.

Everything here is ground truth for the probabilistic claims made elsewhere:
interventional projection of finite joints, Bayes posteriors and risks,
worst-case-risk comparison across an environment grid, the two-factor Gaussian
classifier in closed form, batch-level independence audits, and integral
cross-checks for the closed-form divergences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .reports import Check, all_pass, render_report
from .scmgen import DiscreteJoint, gen_discrete_toy


@dataclass
class ExactClassifier:
    """Conditional label table; row x is p(label | x_plus = x)."""

    table: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        self.defined = np.asarray(self.defined, dtype=bool)
        rows = self.table[self.defined]
        if rows.size and (np.any(rows < 0)
                          or np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-12):
            raise ValidationError("posterior rows must be nonnegative and sum to 1")


def pid_project(joint: DiscreteJoint) -> DiscreteJoint:
    """Replace p(label, s) by p(label)·p(s), keeping the channel p(x|label, s)."""
    p_ys = joint.label_s_marginal()
    p_y = joint.label_marginal()
    p_s = joint.s_marginal()
    need = np.outer(p_y, p_s) > 0
    if np.any(need & (p_ys <= 0)):
        raise ValidationError(
            "projection needs the channel at a (label, s) cell with zero mass")
    channel = np.zeros_like(joint.table)
    np.divide(joint.table, p_ys[None, :, :], out=channel, where=p_ys[None, :, :] > 0)
    return DiscreteJoint(channel * (p_y[None, :, None] * p_s[None, None, :]))


def bayes_posterior(joint: DiscreteJoint) -> ExactClassifier:
    """Exact p(label | x_plus) by summing the joint over s."""
    p_xy = joint.table.sum(axis=2)
    p_x = p_xy.sum(axis=1)
    defined = p_x > 0
    table = np.full_like(p_xy, np.nan)
    table[defined] = p_xy[defined] / p_x[defined, None]
    return ExactClassifier(table, defined)


def env_risk(classifier: ExactClassifier, env_joint: DiscreteJoint) -> float:
    """Expected negative log conditional likelihood under the environment."""
    p_xy = env_joint.table.sum(axis=2)
    support = p_xy > 0
    if np.any(support.any(axis=1) & ~classifier.defined):
        raise ValidationError("classifier undefined on part of the environment support")
    t = classifier.table
    if np.any(support & (t <= 0)):
        return math.inf
    return float(-(p_xy[support] * np.log(t[support])).sum())


def uniform_risk(joint: DiscreteJoint) -> float:
    """Risk of the uniform guess: log of the label count."""
    return math.log(joint.n_label)


def pid_excess_identity(env_joint: DiscreteJoint) -> tuple[float, float]:
    """Both sides of the excess-risk identity for the projection classifier.

    Left side: risk of the projection-trained Bayes classifier on the
    environment, minus the uniform-guess risk. Right side: minus the expected
    (over the environment's (label, s) marginal) KL between the conditional
    channel and the projection's s-conditional mixture. Equality is exact when
    the channel factorizes per coordinate, as in the discrete toy.
    """
    pid = pid_project(env_joint)
    clf = bayes_posterior(pid)
    lhs = env_risk(clf, env_joint) - uniform_risk(env_joint)

    p_ys_env = env_joint.label_s_marginal()
    p_ys_pid = pid.label_s_marginal()
    channel = np.zeros_like(env_joint.table)
    np.divide(env_joint.table, p_ys_env[None, :, :], out=channel,
              where=p_ys_env[None, :, :] > 0)
    # projection's s-conditional: sum_label p_pid(label|s) * channel
    p_s = pid.s_marginal()
    cond_label = p_ys_pid / p_s[None, :]
    mix = np.einsum("xys,ys->xs", channel, cond_label)
    kl_ys = np.zeros_like(p_ys_env)
    for y in range(env_joint.n_label):
        for s in range(env_joint.n_s):
            c = channel[:, y, s]
            pos = c > 0
            kl_ys[y, s] = float((c[pos] * (np.log(c[pos]) - np.log(mix[pos, s]))).sum())
    rhs = float(-(p_ys_env * kl_ys).sum())
    return lhs, rhs


@dataclass
class MinimaxReport:
    p_grid: tuple[float, ...]
    channel_noise: float
    names: list[str]
    risk_matrix: np.ndarray   # classifier x environment
    worst_case: np.ndarray    # per classifier
    checks: list[Check] = field(default_factory=list)

    @property
    def all_pass(self) -> bool:
        return all_pass(self.checks)

    def render(self) -> str:
        notes = ("finite environment grid: a necessary check, not a proof over "
                 "every conceivable environment",)
        return render_report("minimax worst-case risk comparison", self.checks, notes)


def minimax_table(p_sc_grid: Sequence[float], channel_noise: float) -> MinimaxReport:
    """Worst-case risk of each environment-trained Bayes classifier vs projection.

    The toy's s marginal is uniform for every p_sc, so the projection of each
    grid member is one and the same joint; its Bayes classifier is the
    reference arm.
    """
    grid = tuple(float(p) for p in p_sc_grid)
    if len(grid) < 5:
        raise ValidationError("need a grid of at least 5 environments")
    joints = [gen_discrete_toy(p, channel_noise) for p in grid]
    pid_joint = pid_project(joints[0])
    classifiers = [bayes_posterior(j) for j in joints]
    names = [f"env@{p:g}" for p in grid]
    classifiers.append(bayes_posterior(pid_joint))
    names.append("pid")
    risk = np.array([[env_risk(c, j) for j in joints] for c in classifiers])
    worst = risk.max(axis=1)
    checks = [Check(f"worst_case(pid) <= worst_case({names[i]})",
                    float(worst[-1]), float(worst[i]), 1e-12, kind="le")
              for i in range(len(grid))]
    return MinimaxReport(grid, channel_noise, names, risk, worst, checks)


@dataclass
class TwoFactorReport:
    """Closed-form two-factor Gaussian posterior and its style-factor weight."""

    p_sc: float
    distinguishable: bool
    fx_coefficient: float
    fs_coefficient: float
    log_odds: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def posterior(self, f_x, f_s) -> np.ndarray:
        z = self.log_odds(np.asarray(f_x, dtype=np.float64),
                          np.asarray(f_s, dtype=np.float64))
        return 1.0 / (1.0 + np.exp(-z))


def two_factor_bayes(p_sc: float, mu_label: float, mu_s: float,
                     sigma_label: float, sigma_s: float,
                     distinguishable: bool) -> TwoFactorReport:
    """Bayes log-odds for y = +1 vs -1 from a causal factor and a style factor.

    The causal factor is Gaussian around y*mu_label. The style factor is
    Gaussian around z*mu_s where z follows y with probability p_sc. When the
    pairs are distinguishable the style factor drops out entirely; otherwise
    its log-likelihood-ratio is the mixture term
        f(t) = log[(p_sc e^t + 1-p_sc) / (p_sc + (1-p_sc) e^t)],
    with t = 2 mu_s f_s / sigma_s^2, whose slope at the origin is
    (2 p_sc - 1) * 2 mu_s / sigma_s^2 — the effective style coefficient.
    """
    if sigma_label <= 0 or sigma_s <= 0:
        raise ValidationError("sigmas must be positive")
    if not (math.isfinite(mu_label) and math.isfinite(mu_s) and 0 < p_sc < 1):
        raise ValidationError("parameters must be finite with p_sc in (0,1)")
    c_x = 2.0 * mu_label / sigma_label ** 2
    use_style = not distinguishable and p_sc != 0.5
    c_s = (2.0 * p_sc - 1.0) * 2.0 * mu_s / sigma_s ** 2 if use_style else 0.0
    log_p, log_1p = math.log(p_sc), math.log1p(-p_sc)

    def log_odds(f_x, f_s):
        z = c_x * np.asarray(f_x, dtype=np.float64)
        if use_style:
            t = 2.0 * mu_s * np.asarray(f_s, dtype=np.float64) / sigma_s ** 2
            z = z + np.logaddexp(log_p + t, log_1p) - np.logaddexp(log_p, log_1p + t)
        return z

    return TwoFactorReport(p_sc, distinguishable, c_x, c_s, log_odds)


def histogram_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) of two discrete-valued arrays."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValidationError("arrays must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    counts = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(counts, (ai, bi), 1.0)
    p = counts / counts.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    pos = p > 0
    return float((p[pos] * np.log(p[pos] / (pa @ pb)[pos])).sum())


def chi_squared_stat(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson independence statistic on the contingency table of a vs b."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    counts = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(counts, (ai, bi), 1.0)
    expected = np.outer(counts.sum(axis=1), counts.sum(axis=0)) / counts.sum()
    pos = expected > 0
    return float(((counts[pos] - expected[pos]) ** 2 / expected[pos]).sum())


@dataclass
class BatchPidReport:
    mi_values: list[float]      # bias-corrected
    mi_raw_values: list[float]  # plug-in
    chi2_values: list[float]
    excluded: list[int]
    k_bins: int
    n_batches: int

    @property
    def mean_mi(self) -> float:
        if not self.mi_values:
            raise ValidationError("no batch was large enough to audit")
        return float(np.mean(self.mi_values))

    def render(self) -> str:
        checks = [Check(f"batch[{i}].mi", v, 0.0, math.inf)
                  for i, v in enumerate(self.mi_values)]
        notes = (f"{len(self.excluded)} batches excluded (fewer than 2 distinct labels)",
                 f"{self.k_bins} bins for continuous spurious values")
        return render_report("within-batch independence audit", checks, notes)


def _discretize_s(s_batches: list[np.ndarray], bins: int) -> list[np.ndarray]:
    """Exact codes when few distinct values exist, else quantile bins along
    the pooled first principal axis."""
    mats = [np.atleast_2d(np.asarray(s, dtype=np.float64).reshape(len(s), -1))
            for s in s_batches]
    pooled = np.concatenate(mats, axis=0)
    uniq, codes = np.unique(pooled, axis=0, return_inverse=True)
    if len(uniq) <= bins:
        out, at = [], 0
        for m in mats:
            out.append(codes[at:at + len(m)])
            at += len(m)
        return out
    centered = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    z = centered @ axis
    edges = np.quantile(z, np.linspace(0, 1, bins + 1)[1:-1])
    out, at = [], 0
    for m in mats:
        zi = (m - pooled.mean(axis=0)) @ axis
        out.append(np.searchsorted(edges, zi))
        at += len(m)
    return out


def batch_pid_check(batches: list[tuple[np.ndarray, np.ndarray]],
                    bins: int = 8) -> BatchPidReport:
    """Audit label-vs-s independence inside each batch.

    `batches` holds (labels, s_true) pairs. Batches with fewer than two
    distinct labels are flagged and excluded from the aggregate. The headline
    value per batch is the plug-in histogram estimate minus the Miller-Madow
    small-sample term (rows-1)(cols-1)/(2N); without it, binning a continuous
    s into k cells floors every estimate at about (k-1)/(2N) nats even under
    perfect independence. The raw plug-in values are kept alongside. For a
    batch whose s collapses to a single cell both terms are exactly zero.
    """
    labels = [np.asarray(lb).ravel() for lb, _ in batches]
    s_codes = _discretize_s([s for _, s in batches], bins)
    mi, mi_raw, chi2, excluded = [], [], [], []
    for i, (lb, sc) in enumerate(zip(labels, s_codes)):
        if len(np.unique(lb)) < 2:
            excluded.append(i)
            continue
        raw = histogram_mi(lb, sc)
        n_rows = len(np.unique(lb))
        n_cols = len(np.unique(sc))
        mi_raw.append(raw)
        mi.append(raw - (n_rows - 1) * (n_cols - 1) / (2.0 * len(lb)))
        chi2.append(chi_squared_stat(lb, sc))
    return BatchPidReport(mi, mi_raw, chi2, excluded, bins, len(batches))


def kl_quadrature(p: Callable[[np.ndarray], np.ndarray],
                  q: Callable[[np.ndarray], np.ndarray],
                  lo: float, hi: float, steps: int) -> float:
    """Trapezoid-rule KL(p||q) over [lo, hi]; error is O(steps^-2) for smooth
    densities, so steps >= 1e4 gives ~1e-8 headroom on unit-scale problems."""
    if steps < 10_000:
        raise ValidationError("quadrature contract requires steps >= 10^4")
    x = np.linspace(lo, hi, steps + 1)
    px = np.asarray(p(x), dtype=np.float64)
    qx = np.asarray(q(x), dtype=np.float64)
    integrand = np.zeros_like(px)
    pos = px > 0
    integrand[pos] = px[pos] * (np.log(px[pos]) - np.log(qx[pos]))
    return float(np.trapezoid(integrand, x))


def quadrature_integral(f: Callable[[np.ndarray], np.ndarray],
                        lo: float, hi: float, steps: int) -> float:
    """Trapezoid integral of f over [lo, hi] under the same step contract."""
    if steps < 10_000:
        raise ValidationError("quadrature contract requires steps >= 10^4")
    x = np.linspace(lo, hi, steps + 1)
    return float(np.trapezoid(np.asarray(f(x), dtype=np.float64), x))


def js_bruteforce(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon divergence by direct summation, in nats.

    Deliberately written with plain loops and scalar math as an independent
    second path for the vectorized implementation used at run time.
    """
    if len(p) != len(q):
        raise ValidationError("distributions must share support size")
    total = 0.0
    for pi, qi in zip(p, q):
        mi_ = 0.5 * (pi + qi)
        if pi > 0:
            total += 0.5 * pi * math.log(pi / mi_)
        if qi > 0:
            total += 0.5 * qi * math.log(qi / mi_)
    return total


def binary_entropy(p: float) -> float:
    """Entropy of a Bernoulli(p) in nats."""
    if p <= 0 or p >= 1:
        return 0.0
    return float(-p * math.log(p) - (1 - p) * math.log(1 - p))
