"""Greedy balancing-score matching: mini-batches whose members share a score.

A pool holds one balancing score per pair, computed from a single posterior
draw of the spurious covariate against the prior means of every anchor in the
dataset (one softmax class per anchor). Batches are grown greedily from a
uniformly drawn seed pair: each of the a matches is the still-available pair
whose score is closest to the seed's in Jensen-Shannon divergence, ties going
to the lowest index. Epochs run the matcher without replacement until the
pool is exhausted, flagging the final short batch.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import balance
from .errors import ShapeError, ValidationError
from .rlvm import RlvmModel, encode, prior_mean
from .scmgen import PairRecord

_MAGIC = "pidbatch-plan"
_VERSION = 1


def dataset_fingerprint(records: list[PairRecord]) -> str:
    """Order-sensitive 64-bit content hash of a record list."""
    h = hashlib.blake2b(digest_size=8)
    for r in records:
        h.update(r.x_plus.tobytes())
        h.update(r.x_label.tobytes())
        h.update(r.s_true.tobytes())
        h.update(int(r.env_id).to_bytes(4, "little", signed=True))
        h.update(int(r.class_id).to_bytes(4, "little", signed=True))
    return h.hexdigest()


@dataclass
class MatchPool:
    """Per-pair balancing scores plus availability bookkeeping."""

    scores: np.ndarray            # (D, nu), rows on the simplex
    indices: np.ndarray           # (D,) dataset positions
    available: np.ndarray         # (D,) bool
    manifest_hash: str = ""
    score_ops: int = 0            # multiply-adds spent in the score kernel
    _key_order: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.available = np.asarray(self.available, dtype=bool)
        if self.scores.ndim != 2:
            raise ShapeError("score matrix must be 2-d")
        if not (len(self.indices) == len(self.available) == self.scores.shape[0]):
            raise ShapeError("pool fields must have one row per pair")
        if np.any(self.scores < 0):
            raise ValidationError("scores must be nonnegative")
        sums = self.scores.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValidationError("each score row must sum to 1 within 1e-9")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValidationError("pair indices must be unique")

    @property
    def size(self) -> int:
        return self.scores.shape[0]

    def available_count(self) -> int:
        return int(self.available.sum())

    def reset(self) -> None:
        self.available[:] = True


def pool_from_scores(scores: np.ndarray, manifest_hash: str = "") -> MatchPool:
    scores = np.asarray(scores, dtype=np.float64)
    return MatchPool(scores, np.arange(scores.shape[0]),
                     np.ones(scores.shape[0], dtype=bool), manifest_hash)


def _counted_dots(s: np.ndarray, mu: np.ndarray,
                  block: int = 512) -> tuple[np.ndarray, int]:
    """Row-blocked s @ mu.T with an exact multiply-add count per block."""
    dots = np.empty((s.shape[0], mu.shape[0]))
    ops = 0
    for r0 in range(0, s.shape[0], block):
        r1 = min(r0 + block, s.shape[0])
        dots[r0:r1] = s[r0:r1] @ mu.T
        ops += (r1 - r0) * mu.shape[0] * s.shape[1]
    return dots, ops


def score_rows(s: np.ndarray, anchors_mu: np.ndarray) -> tuple[np.ndarray, int]:
    """Propensity of each drawn s against every anchor's prior mean.

    Same quantity as balance.propensity_matrix (cross-checked in tests); this
    path additionally reports the exact multiply-add count of the dot-product
    kernel, which is rows * anchors * dim.
    """
    s = np.asarray(s, dtype=np.float64)
    mu = np.asarray(anchors_mu, dtype=np.float64)
    if s.ndim != 2 or mu.ndim != 2 or s.shape[1] != mu.shape[1]:
        raise ShapeError(f"incompatible draw/anchor shapes {s.shape} / {mu.shape}")
    if mu.shape[0] < 2:
        raise ValidationError("need at least two anchors")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(mu))):
        raise ValidationError("draws and anchors must be finite")
    logits, ops = _counted_dots(s, mu)
    logits -= 0.5 * (s * s).sum(axis=1, keepdims=True)
    logits -= 0.5 * (mu * mu).sum(axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return np.exp(logits - log_norm), ops


def _content_digest(seed: int, record: PairRecord, block: int, size: int) -> bytes:
    h = hashlib.blake2b(digest_size=size)
    h.update(seed.to_bytes(8, "little", signed=True))
    h.update(block.to_bytes(4, "little"))
    h.update(record.x_plus.tobytes())
    h.update(record.x_label.tobytes())
    return h.digest()


def content_normals(seed: int, records: list[PairRecord], n: int) -> np.ndarray:
    """One standard-normal n-vector per record, keyed by record content.

    Byte-identical records receive byte-identical draws wherever they sit in
    the dataset, and the whole matrix is reproducible from the seed alone.
    Hash words become uniforms, then normals via the Box-Muller transform.
    """
    pairs = (n + 1) // 2
    per_block = 4                                   # 4 uniform pairs per 64-byte digest
    blocks = (pairs + per_block - 1) // per_block
    raw = b"".join(_content_digest(seed, r, b, 64)
                   for r in records for b in range(blocks))
    words = np.frombuffer(raw, dtype="<u8").reshape(len(records), blocks * 8)
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = u[:, 0::2], u[:, 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty((len(records), 2 * u1.shape[1]))
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    return z[:, :n]


def build_pool(records: list[PairRecord], model: RlvmModel, seed: int, *,
               dataset_hash: str | None = None,
               model_manifest: dict | None = None) -> MatchPool:
    """Score every pair under one dataset-level prior context.

    One reparameterized posterior draw per pair; the natural-parameter context
    is the mean of the whole dataset's paired views. The resulting score
    matrix has one row and one softmax class per pair.
    """
    if not records:
        raise ValidationError("empty dataset")
    fingerprint = dataset_fingerprint(records)
    if dataset_hash is not None and fingerprint != dataset_hash:
        raise ValidationError(
            f"dataset hash {fingerprint} does not match expected {dataset_hash}")
    if model_manifest is not None:
        want = model_manifest.get("dataset_hash")
        if want is not None and want != fingerprint:
            raise ValidationError(
                f"model was trained on dataset {want}, got {fingerprint}")
    xp = np.stack([r.x_plus for r in records])
    xl = np.stack([r.x_label for r in records])
    if xp.shape[1] != model.d:
        raise ShapeError(f"records have dim {xp.shape[1]}, model expects {model.d}")
    post = encode(xp, xl, model.encoder)
    std = np.exp(post.log_variance.data / 2.0)
    draws = post.mean.data + std * content_normals(seed, records,
                                                   post.mean.shape[1])
    anchors_mu = prior_mean(xl, xp.mean(axis=0), model.prior).data
    scores, ops = score_rows(draws, anchors_mu)
    return MatchPool(scores, np.arange(len(records)),
                     np.ones(len(records), dtype=bool), fingerprint, ops)


@dataclass
class MiniBatch:
    """Greedily matched group; the seed pair leads the member list."""

    members: list[int]
    seed_index: int
    distances: list[float]        # js divergence to the matching target; 0 for seed
    short: bool = False

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ValidationError("batch members must be distinct")
        if not self.members or self.members[0] != self.seed_index:
            raise ValidationError("the seed pair must lead the member list")
        if len(self.distances) != len(self.members):
            raise ValidationError("one distance per member")

    def __len__(self) -> int:
        return len(self.members)


def _pool_keys(pool: MatchPool) -> np.ndarray:
    """1-d pruning key: the score coordinate with the highest pool variance."""
    coord = int(np.argmax(pool.scores.var(axis=0)))
    return pool.scores[:, coord]


def _seed_matches_brute(pool: MatchPool, seed_pos: int, a: int) -> tuple[list[int], list[float]]:
    cands = np.flatnonzero(pool.available)
    dist = balance.js_divergence_rows(pool.scores[cands], pool.scores[seed_pos])
    order = np.lexsort((cands, dist))[:a]
    chosen = cands[order]
    return chosen.tolist(), dist[order].tolist()


def _seed_matches_pruned(pool: MatchPool, seed_pos: int, a: int) -> tuple[list[int], list[float]]:
    """Identical output to the brute scan, skipping provably distant pairs.

    With key(p) one fixed score coordinate, Pinsker's inequality gives
    js(p, q) >= (key(p) - key(q))^2 / 8, so once the key gap on a sorted axis
    exceeds sqrt(8 * kth-best-js), no further candidate on that side can make
    the batch.
    """
    if pool._key_order is None:
        pool._key_order = np.argsort(_pool_keys(pool), kind="stable")
    keys = _pool_keys(pool)
    order = pool._key_order
    pos_of = np.empty(pool.size, dtype=np.int64)
    pos_of[order] = np.arange(pool.size)
    ref = pool.scores[seed_pos]
    ref_key = keys[seed_pos]
    heap: list[float] = []          # max-heap (negated) of the a best distances
    scanned: list[tuple[float, int]] = []

    def consider(idx: int) -> None:
        d = float(balance.js_divergence(pool.scores[idx], ref))
        scanned.append((d, idx))
        if len(heap) < a:
            heapq.heappush(heap, -d)
        elif d < -heap[0]:
            heapq.heapreplace(heap, -d)

    def threshold() -> float:
        return np.inf if len(heap) < a else -heap[0]

    center = int(pos_of[seed_pos])
    left, right = center - 1, center + 1
    go_left = go_right = True
    while go_left or go_right:
        if go_left:
            if left < 0:
                go_left = False
            else:
                idx = int(order[left])
                gap = ref_key - keys[idx]
                if gap * gap / 8.0 > threshold():
                    go_left = False
                else:
                    if pool.available[idx]:
                        consider(idx)
                    left -= 1
        if go_right:
            if right >= pool.size:
                go_right = False
            else:
                idx = int(order[right])
                gap = keys[idx] - ref_key
                if gap * gap / 8.0 > threshold():
                    go_right = False
                else:
                    if pool.available[idx]:
                        consider(idx)
                    right += 1
    scanned.sort()
    chosen = scanned[:a]
    return [i for _, i in chosen], [d for d, _ in chosen]


def sample_batch(pool: MatchPool, a: int, rng: np.random.Generator,
                 match_mode: str = "seed", prune: bool = False) -> MiniBatch:
    """Draw a seed pair uniformly, then greedily match a more.

    match_mode "seed" (default) measures every candidate against the seed
    pair's score; "chain" measures against the most recently added pair.
    Matched pairs leave the availability set.
    """
    if match_mode not in ("seed", "chain"):
        raise ValidationError(f"unknown match mode {match_mode!r}")
    if a < 0:
        raise ValidationError("a must be nonnegative")
    avail = np.flatnonzero(pool.available)
    if len(avail) < a + 1:
        raise ValidationError(
            f"batch needs {a + 1} available pairs, only {len(avail)} remain")
    seed_pos = int(avail[rng.integers(len(avail))])
    pool.available[seed_pos] = False
    members = [seed_pos]
    distances = [0.0]
    if match_mode == "seed":
        picked, dists = (_seed_matches_pruned if prune else _seed_matches_brute)(
            pool, seed_pos, a)
        members += picked
        distances += dists
        pool.available[picked] = False
    else:
        ref_pos = seed_pos
        for _ in range(a):
            cands = np.flatnonzero(pool.available)
            dist = balance.js_divergence_rows(pool.scores[cands],
                                              pool.scores[ref_pos])
            best = int(np.lexsort((cands, dist))[0])
            ref_pos = int(cands[best])
            members.append(ref_pos)
            distances.append(float(dist[best]))
            pool.available[ref_pos] = False
    return MiniBatch([int(pool.indices[m]) for m in members],
                     int(pool.indices[seed_pos]), distances)


def sample_epoch(pool: MatchPool, a: int, rng: np.random.Generator,
                 match_mode: str = "seed", prune: bool = False) -> list[MiniBatch]:
    """Without-replacement pass over the pool; leftovers form a short batch."""
    if pool.available_count() == 0:
        raise ValidationError("pool has no available pairs")
    batches = []
    while pool.available_count() >= a + 1:
        batches.append(sample_batch(pool, a, rng, match_mode, prune))
    remaining = pool.available_count()
    if remaining:
        tail = sample_batch(pool, remaining - 1, rng, match_mode, prune)
        tail.short = True
        batches.append(tail)
    return batches


def write_plan(path: str | Path, batches: list[MiniBatch], a: int,
               manifest_hash: str) -> None:
    """Integer batch plan with the source pool's manifest hash."""
    header = (f"{_MAGIC} {_VERSION}\n"
              f"batches {len(batches)}\n"
              f"a {a}\n"
              f"manifest {manifest_hash}\n"
              "end\n").encode("ascii")
    blobs = [header]
    for b in batches:
        blobs.append(np.array([len(b.members), int(b.short), b.seed_index],
                              dtype="<i4").tobytes())
        blobs.append(np.asarray(b.members, dtype="<i4").tobytes())
        blobs.append(np.asarray(b.distances, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(blobs))


def read_plan(path: str | Path) -> tuple[list[MiniBatch], int, str]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"end\n")
    if nl < 0:
        raise ValidationError("missing plan header terminator")
    header = raw[:nl].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != f"{_MAGIC} {_VERSION}":
        raise ValidationError("not a batch-plan file")
    meta = {}
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        meta[key] = rest
    n_batches = int(meta["batches"])
    a = int(meta["a"])
    at = nl + 4
    batches = []
    for _ in range(n_batches):
        if at + 12 > len(raw):
            raise ValidationError("truncated batch plan")
        count, short, seed_index = np.frombuffer(raw, dtype="<i4", count=3,
                                                 offset=at)
        at += 12
        need = 4 * count + 8 * count
        if at + need > len(raw):
            raise ValidationError("truncated batch plan")
        members = np.frombuffer(raw, dtype="<i4", count=count, offset=at)
        at += 4 * count
        dists = np.frombuffer(raw, dtype="<f8", count=count, offset=at)
        at += 8 * count
        batches.append(MiniBatch(members.astype(int).tolist(), int(seed_index),
                                 dists.tolist(), bool(short)))
    if at != len(raw):
        raise ValidationError("trailing bytes after batch plan")
    return batches, a, meta["manifest"]
