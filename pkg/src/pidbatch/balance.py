"""Balancing scores: per-pair label-membership probabilities and their distance.

The score of a spurious covariate s is the vector of posterior probabilities
that s was drawn from each candidate anchor's unit-variance Gaussian; with a
uniform label prior this is a softmax over -0.5 ||s - mu_j||^2. Two pairs with
close scores are exchangeable for batch-composition purposes, and closeness is
measured by the Jensen-Shannon divergence in nats.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

Array = np.ndarray


@dataclass
class BalancingScore:
    probs: Array
    label_ids: Array

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.label_ids = np.asarray(self.label_ids, dtype=np.int64)
        if self.probs.shape != self.label_ids.shape:
            raise ValidationError("probs and label_ids must be parallel")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValidationError("score must be a probability vector (1e-9)")


def log_propensity_matrix(s: Array, prior_means: Array) -> Array:
    """Log scores for a batch: rows are pairs, columns candidate labels.

    Computed entirely in the log domain: log softmax over -0.5 ||s - mu_j||^2
    with the row maximum subtracted before exponentiation. The uniform label
    prior cancels in the normalization.
    """
    s = np.asarray(s, dtype=np.float64)
    mu = np.asarray(prior_means, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise ValidationError("need prior means for at least 2 candidate labels")
    if s.shape[1] != mu.shape[1]:
        raise ValidationError(f"s dim {s.shape[1]} != prior mean dim {mu.shape[1]}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite spurious covariate")
    # -0.5||s-mu||^2 = s.mu - 0.5||s||^2 - 0.5||mu||^2; the s-only term is a
    # per-row constant and drops out of the softmax, but keeping it makes the
    # intermediate an honest log density up to the shared Gaussian constant.
    sq = 0.5 * (s * s).sum(axis=1, keepdims=True)
    mq = 0.5 * (mu * mu).sum(axis=1)
    logits = s @ mu.T - sq - mq[None, :]
    shift = logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits - shift).sum(axis=1, keepdims=True)) + shift
    return logits - log_norm


def propensity_matrix(s: Array, prior_means: Array) -> Array:
    return np.exp(log_propensity_matrix(s, prior_means))


def propensity(s: Array, prior_means: Array,
               label_ids: Array | None = None) -> BalancingScore:
    """Score a single pair's s against nu candidate anchors."""
    mu = np.asarray(prior_means, dtype=np.float64)
    probs = propensity_matrix(np.asarray(s, dtype=np.float64)[None, :], mu)[0]
    if label_ids is None:
        label_ids = np.arange(mu.shape[0])
    return BalancingScore(probs, label_ids)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats; symmetric, bounded by ln 2."""
    pv = p.probs if isinstance(p, BalancingScore) else np.asarray(p, dtype=np.float64)
    qv = q.probs if isinstance(q, BalancingScore) else np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape:
        raise ValidationError(f"support mismatch: {pv.shape} vs {qv.shape}")
    m = 0.5 * (pv + qv)
    out = 0.0
    for vec in (pv, qv):
        pos = vec > 0
        out += 0.5 * float((vec[pos] * (np.log(vec[pos]) - np.log(m[pos]))).sum())
    return out


def js_divergence_rows(scores: Array, ref: Array) -> Array:
    """JS(ref, scores[i]) for every row i, vectorized for the matcher."""
    scores = np.asarray(scores, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if scores.ndim != 2 or ref.shape != (scores.shape[1],):
        raise ValidationError("scores must be rows over ref's support")
    m = 0.5 * (scores + ref[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(scores > 0, scores * (np.log(scores) - np.log(m)), 0.0)
        b = np.where(ref[None, :] > 0, ref[None, :] * (np.log(ref[None, :]) - np.log(m)), 0.0)
    return 0.5 * (a.sum(axis=1) + b.sum(axis=1))


def exact_score_strata(joint) -> list[tuple[list[int], Array]]:
    """Group a finite joint's s values by their exact score vector p(label|s).

    Two s values land in one stratum only when their conditional label
    distributions agree bit-for-bit; the score is computed by exact
    enumeration, so ties are structural, not numerical accidents.
    """
    p_ys = joint.label_s_marginal()
    p_s = joint.s_marginal()
    if np.any(p_s <= 0):
        raise ValidationError("every s value needs positive marginal mass")
    strata: dict[bytes, tuple[list[int], Array]] = {}
    for s in range(joint.n_s):
        ba = p_ys[:, s] / p_s[s]
        key = ba.tobytes()
        strata.setdefault(key, ([], ba))[0].append(s)
    return list(strata.values())


def stratified_independence_error(joint) -> float:
    """Max cellwise gap |p(label,s|stratum) - p(label|stratum) p(s|stratum)|.

    Zero (to enumeration precision) exactly when conditioning on the score
    renders label and s independent inside every stratum.
    """
    p_ys = joint.label_s_marginal()
    worst = 0.0
    for s_ids, _ in exact_score_strata(joint):
        block = p_ys[:, s_ids]
        mass = block.sum()
        cond = block / mass
        gap = cond - np.outer(cond.sum(axis=1), cond.sum(axis=0))
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst


MAGIC = "pidbatch-scores"
VERSION = 1


def write_scores(path: str | Path, matrix: Array, label_ids: Array,
                 source_manifest: str) -> None:
    """Count header plus little-endian float64 matrix, row per pair."""
    matrix = np.asarray(matrix, dtype=np.float64)
    label_ids = np.asarray(label_ids, dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[1] != label_ids.shape[0]:
        raise ValidationError("matrix columns must match label_ids")
    header = io.StringIO()
    header.write(f"{MAGIC} {VERSION}\n")
    header.write(f"count {matrix.shape[0]}\n")
    header.write(f"nu {matrix.shape[1]}\n")
    header.write("label_ids " + " ".join(str(int(i)) for i in label_ids) + "\n")
    header.write(f"source {source_manifest}\n")
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(matrix.astype("<f8").tobytes())


def read_scores(path: str | Path) -> tuple[Array, Array, str]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != MAGIC or int(first[1]) != VERSION:
            raise ValidationError(f"not a {MAGIC} v{VERSION} file: {path}")
        count = int(fh.readline().decode("ascii").split()[1])
        nu = int(fh.readline().decode("ascii").split()[1])
        label_ids = np.array(fh.readline().decode("ascii").split()[1:], dtype=np.int64)
        source = fh.readline().decode("ascii").split(maxsplit=1)[1].strip()
        if fh.readline().decode("ascii").strip() != "end":
            raise ValidationError("malformed score header")
        raw = fh.read(8 * count * nu)
        if len(raw) != 8 * count * nu:
            raise ValidationError("score body truncated")
        matrix = np.frombuffer(raw, dtype="<f8").reshape(count, nu).copy()
    return matrix, label_ids, source
