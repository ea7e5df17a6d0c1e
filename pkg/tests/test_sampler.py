"""Balancing-score match pools, greedy batches, epochs, and batch plans."""

import numpy as np
import pytest

from pidbatch import balance, oracle, rlvm, sampler
from pidbatch.errors import ShapeError, ValidationError
from pidbatch.sampler import (MatchPool, MiniBatch, build_pool, content_normals,
                              dataset_fingerprint, pool_from_scores, read_plan,
                              sample_batch, sample_epoch, score_rows, write_plan)
from pidbatch.scmgen import Environment, ScmConfig, gen_env_dataset


class FixedChoice:
    """Stands in for a Generator when a test must pin the seed pair."""

    def __init__(self, value: int):
        self.value = value

    def integers(self, n) -> int:
        assert self.value < n
        return self.value


def small_model_and_data(d=6, n=2, count=64, seed=11):
    cfg = ScmConfig(d=d, n=n, seed=seed, noise_sigma=0.05)
    recs = []
    for eid, p in [(0, 0.9), (1, 0.7), (2, 0.55)]:
        recs += gen_env_dataset(cfg, Environment(eid, p), count)
    tasks = rlvm.partition_tasks(recs, 32)
    model, _ = rlvm.train_rlvm(
        tasks, rlvm.ElboConfig(epochs=8, seed=0, lr=5e-3, batch_task_size=32),
        n=n, k=2, hidden=(16,))
    return recs, model


class TestContentNormals:
    def test_marginals_are_standard_normal(self):
        recs, _ = small_model_and_data(count=1024)
        z = content_normals(5, recs, 4)
        assert z.shape == (len(recs), 4)
        assert abs(z.mean()) < 4.0 / np.sqrt(z.size)
        assert abs(z.std() - 1.0) < 0.03

    def test_identical_records_share_draws(self):
        recs, _ = small_model_and_data()
        z = content_normals(5, recs + [recs[7]], 4)
        np.testing.assert_array_equal(z[7], z[-1])

    def test_seed_and_content_sensitivity(self):
        recs, _ = small_model_and_data()
        z5 = content_normals(5, recs, 4)
        assert not np.array_equal(z5, content_normals(6, recs, 4))
        np.testing.assert_array_equal(z5, content_normals(5, recs, 4))

    def test_wide_draws_use_extra_hash_blocks(self):
        recs, _ = small_model_and_data()
        z = content_normals(5, recs[:10], 9)
        assert z.shape == (10, 9)
        assert np.all(np.isfinite(z))
        # the first block's coordinates agree with the narrow call
        np.testing.assert_array_equal(z[:, :8], content_normals(5, recs[:10], 8))


class TestBuildPool:
    def test_rows_sum_to_one(self):
        recs, model = small_model_and_data()
        pool = build_pool(recs, model, seed=5)
        assert pool.size == len(recs)
        np.testing.assert_allclose(pool.scores.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("count", [50, 150])
    def test_operation_count_is_exactly_quadratic(self, count):
        recs, model = small_model_and_data()
        pool = build_pool(recs[:count], model, seed=1)
        assert pool.score_ops == count * count * 2

    def test_operation_count_across_block_boundary(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((700, 3))
        mu = rng.standard_normal((700, 3))
        scores, ops = score_rows(s, mu)
        assert ops == 700 * 700 * 3
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_reference_propensity_route(self):
        recs, model = small_model_and_data()
        pool = build_pool(recs, model, seed=5)
        xp = np.stack([r.x_plus for r in recs])
        xl = np.stack([r.x_label for r in recs])
        post = rlvm.encode(xp, xl, model.encoder)
        draws = post.mean.data + np.exp(post.log_variance.data / 2.0) * \
            content_normals(5, recs, post.mean.data.shape[1])
        mu = rlvm.prior_mean(xl, xp.mean(axis=0), model.prior).data
        np.testing.assert_allclose(pool.scores,
                                   balance.propensity_matrix(draws, mu),
                                   atol=1e-12)

    def test_duplicated_record_scores_identically(self):
        recs, model = small_model_and_data()
        pool = build_pool(recs + [recs[7]], model, seed=5)
        np.testing.assert_array_equal(pool.scores[7], pool.scores[-1])

    def test_deterministic_per_seed(self):
        recs, model = small_model_and_data()
        a = build_pool(recs, model, seed=5)
        b = build_pool(recs, model, seed=5)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert not np.array_equal(a.scores, build_pool(recs, model, seed=6).scores)

    def test_manifest_mismatch_rejected(self):
        recs, model = small_model_and_data()
        good = dataset_fingerprint(recs)
        assert build_pool(recs, model, seed=1, dataset_hash=good).manifest_hash == good
        with pytest.raises(ValidationError, match="hash"):
            build_pool(recs, model, seed=1, dataset_hash="0" * 16)
        with pytest.raises(ValidationError, match="trained on"):
            build_pool(recs, model, seed=1,
                       model_manifest={"dataset_hash": "f" * 16})
        pool = build_pool(recs, model, seed=1,
                          model_manifest={"dataset_hash": good})
        assert pool.size == len(recs)

    def test_dimension_mismatch_rejected(self):
        recs, model = small_model_and_data()
        other = rlvm.RlvmModel.create(9, n=2, k=2, hidden=(8,), seed=0)
        with pytest.raises(ShapeError):
            build_pool(recs, other, seed=1)

    def test_pool_validation(self):
        ok = np.full((4, 2), 0.5)
        pool_from_scores(ok)
        with pytest.raises(ValidationError):
            pool_from_scores(np.array([[0.7, 0.4], [0.5, 0.5]]))
        with pytest.raises(ValidationError):
            pool_from_scores(np.array([[1.2, -0.2], [0.5, 0.5]]))
        with pytest.raises(ValidationError):
            MatchPool(ok, np.zeros(4, dtype=int), np.ones(4, dtype=bool))


def two_cluster_scores():
    """Rows 0-3 share one score, rows 4-7 another."""
    a = np.array([0.9, 0.1])
    b = np.array([0.2, 0.8])
    return np.array([a, a, a, a, b, b, b, b])


class TestSampleBatch:
    def test_exhaustion_takes_every_pair(self):
        pool = pool_from_scores(np.random.default_rng(0).dirichlet(np.ones(3), 6))
        batch = sample_batch(pool, 5, np.random.default_rng(1))
        assert sorted(batch.members) == list(range(6))
        assert pool.available_count() == 0

    def test_exact_duplicates_give_zero_distances(self):
        # exactly a = 3 other pairs share the seed's score
        pool = pool_from_scores(two_cluster_scores())
        batch = sample_batch(pool, 3, FixedChoice(1))  # seed = pair 1
        assert batch.seed_index == 1
        assert set(batch.members) == {0, 1, 2, 3}
        assert batch.distances == [0.0] * 4

    def test_ties_break_toward_lowest_index(self):
        pool = pool_from_scores(np.tile([0.5, 0.5], (7, 1)))
        batch = sample_batch(pool, 3, FixedChoice(4))  # seed = pair 4
        assert batch.members == [4, 0, 1, 2]

    def test_insufficient_pool_reports_counts(self):
        pool = pool_from_scores(np.full((5, 2), 0.5))
        with pytest.raises(ValidationError, match="needs 8.*only 5"):
            sample_batch(pool, 7, np.random.default_rng(0))

    def test_matched_pairs_leave_availability(self):
        pool = pool_from_scores(np.random.default_rng(2).dirichlet(np.ones(4), 12))
        batch = sample_batch(pool, 4, np.random.default_rng(3))
        assert pool.available_count() == 7
        assert not pool.available[batch.members].any()

    def test_recorded_distances_replay_as_running_minima(self):
        rng = np.random.default_rng(9)
        pool = pool_from_scores(rng.dirichlet(np.ones(4), 40))
        before = pool.available.copy()
        batch = sample_batch(pool, 9, np.random.default_rng(4))
        # replay: at each step the chosen pair is the lowest-index minimizer
        # of js distance to the seed over the then-available set
        avail = before.copy()
        avail[batch.seed_index] = False
        ref = pool.scores[batch.seed_index]
        for member, dist in zip(batch.members[1:], batch.distances[1:]):
            cands = np.flatnonzero(avail)
            d = balance.js_divergence_rows(pool.scores[cands], ref)
            best = int(cands[np.lexsort((cands, d))[0]])
            assert best == member
            np.testing.assert_allclose(d.min(), dist, atol=1e-14)
            avail[member] = False

    def test_chain_mode_follows_the_latest_member(self):
        # From 0.30 both modes first take 0.20; the second hop then differs:
        # the seed pair stays closer to 0.42, the latest member to 0.05.
        line = np.array([0.30, 0.20, 0.42, 0.05])
        scores = np.stack([line, 1.0 - line], axis=1)
        seed_first = sample_batch(pool_from_scores(scores), 2, FixedChoice(0),
                                  match_mode="seed")
        chain = sample_batch(pool_from_scores(scores), 2, FixedChoice(0),
                             match_mode="chain")
        assert seed_first.members == [0, 1, 2]
        assert chain.members == [0, 1, 3]
        np.testing.assert_allclose(
            chain.distances,
            [0.0,
             balance.js_divergence(scores[1], scores[0]),
             balance.js_divergence(scores[3], scores[1])],
            atol=1e-14)

    def test_unknown_mode_rejected(self):
        pool = pool_from_scores(np.full((4, 2), 0.5))
        with pytest.raises(ValidationError):
            sample_batch(pool, 1, np.random.default_rng(0), match_mode="greedy")

    @pytest.mark.parametrize("trial", range(10))
    def test_pruned_matching_equals_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        raw = rng.dirichlet(np.ones(5), 64)
        brute_pool = pool_from_scores(raw)
        pruned_pool = pool_from_scores(raw.copy())
        brute = sample_epoch(brute_pool, 7, np.random.default_rng(trial), prune=False)
        pruned = sample_epoch(pruned_pool, 7, np.random.default_rng(trial), prune=True)
        assert len(brute) == len(pruned)
        for x, y in zip(brute, pruned):
            assert x.members == y.members
            np.testing.assert_array_equal(x.distances, y.distances)
            assert x.short == y.short


class TestSampleEpoch:
    def test_divisible_pool_gives_full_batches_only(self):
        pool = pool_from_scores(np.random.default_rng(0).dirichlet(np.ones(3), 32))
        batches = sample_epoch(pool, 7, np.random.default_rng(1))
        assert len(batches) == 4
        assert all(len(b) == 8 and not b.short for b in batches)

    def test_batches_partition_the_pool(self):
        pool = pool_from_scores(np.random.default_rng(5).dirichlet(np.ones(4), 45))
        batches = sample_epoch(pool, 9, np.random.default_rng(2))
        members = [m for b in batches for m in b.members]
        assert sorted(members) == list(range(45))
        assert len(batches) == 5
        assert [b.short for b in batches] == [False] * 4 + [True]
        assert len(batches[-1]) == 5

    def test_deterministic_per_seed(self):
        raw = np.random.default_rng(8).dirichlet(np.ones(4), 30)
        e1 = sample_epoch(pool_from_scores(raw), 5, np.random.default_rng(3))
        e2 = sample_epoch(pool_from_scores(raw), 5, np.random.default_rng(3))
        assert [b.members for b in e1] == [b.members for b in e2]

    def test_exhausted_pool_rejected(self):
        pool = pool_from_scores(np.full((4, 2), 0.5))
        sample_epoch(pool, 1, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            sample_epoch(pool, 1, np.random.default_rng(0))


def exact_count_two_color(n_records=512, flips_per_class=26):
    """Half the records per label; within each label group exactly
    flips_per_class colors disagree, so both color totals are 256."""
    labels = np.arange(n_records) % 2
    colors = labels.copy()
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)[:flips_per_class]
        colors[idx] = 1 - colors[idx]
    s_scalar = 2.0 * colors - 1.0
    scores = balance.propensity_matrix(s_scalar[:, None],
                                       np.array([[-1.0], [1.0]]))
    return labels, s_scalar, scores


def overlapping_value_population(n_values, copies, seed, p_sc=0.9):
    """Fixed score values whose color-conditional ranges overlap; `copies`
    records per value with labels Bernoulli-tied to the value's color."""
    rng = np.random.default_rng((seed, 0xBA5E))
    colors_v = rng.integers(0, 2, n_values)
    s_values = 0.617 * (2.0 * colors_v - 1.0) + rng.uniform(-1.0, 1.0, n_values)
    rec_rng = np.random.default_rng((seed, 0x1AB5, copies))
    colors = np.repeat(colors_v, copies)
    s_scalar = np.repeat(s_values, copies)
    labels = np.where(rec_rng.random(n_values * copies) > p_sc,
                      1 - colors, colors)
    scores = balance.propensity_matrix(s_scalar[:, None],
                                       np.array([[-0.617], [0.617]]))
    return labels, s_scalar, scores


class TestPidApproximation:
    """Matched batches behave like draws from the interventional product."""

    def test_exact_matching_removes_label_covariate_dependence(self):
        labels, s_scalar, scores = exact_count_two_color()
        pool = pool_from_scores(scores)
        batches = sample_epoch(pool, 15, np.random.default_rng(7))
        assert all(not b.short for b in batches)
        assert max(max(b.distances) for b in batches) == 0.0
        pairs = [(labels[b.members], s_scalar[b.members][:, None])
                 for b in batches]
        matched = oracle.batch_pid_check(pairs, bins=8).mean_mi
        assert abs(matched) < 1e-3
        perm = np.random.default_rng(9).permutation(len(labels))
        random_pairs = [(labels[perm[i:i + 16]],
                         s_scalar[perm[i:i + 16]][:, None])
                        for i in range(0, len(labels), 16)]
        uniform = oracle.batch_pid_check(random_pairs, bins=8).mean_mi
        assert uniform >= 0.1
        assert matched < uniform

    def test_dependence_decays_as_score_multiplicity_grows(self):
        def mean_mi(copies):
            vals = []
            for sd in range(4):
                labels, s_scalar, scores = overlapping_value_population(
                    64, copies, sd)
                pool = pool_from_scores(scores)
                rng = np.random.default_rng(900 + sd)
                pairs = []
                for _ in range(48):
                    pool.reset()
                    b = sample_batch(pool, 31, rng)
                    pairs.append((labels[b.members],
                                  s_scalar[b.members][:, None]))
                vals.append(oracle.batch_pid_check(pairs, bins=8).mean_mi)
            return float(np.mean(vals))

        curve = [mean_mi(copies) for copies in (1, 2, 8, 32)]
        assert all(curve[i + 1] <= curve[i] + 0.002 for i in range(3))
        assert curve[0] - curve[-1] > 0.03
        assert abs(curve[-1]) < 1e-3


class TestPlanFile:
    def test_roundtrip(self, tmp_path):
        raw = np.random.default_rng(1).dirichlet(np.ones(4), 21)
        pool = pool_from_scores(raw, manifest_hash="cafe0123")
        batches = sample_epoch(pool, 4, np.random.default_rng(2))
        path = tmp_path / "plan.bin"
        write_plan(path, batches, 4, pool.manifest_hash)
        loaded, a, manifest = read_plan(path)
        assert a == 4 and manifest == "cafe0123"
        assert len(loaded) == len(batches)
        for x, y in zip(batches, loaded):
            assert x.members == y.members
            assert x.seed_index == y.seed_index
            assert x.short == y.short
            np.testing.assert_array_equal(x.distances, y.distances)

    def test_truncation_and_foreign_files_rejected(self, tmp_path):
        raw = np.random.default_rng(1).dirichlet(np.ones(3), 12)
        batches = sample_epoch(pool_from_scores(raw), 3, np.random.default_rng(0))
        path = tmp_path / "plan.bin"
        write_plan(path, batches, 3, "")
        blob = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(blob[:len(blob) - 7])
        with pytest.raises(ValidationError, match="truncated"):
            read_plan(tmp_path / "cut.bin")
        (tmp_path / "extra.bin").write_bytes(blob + b"\x00")
        with pytest.raises(ValidationError, match="trailing"):
            read_plan(tmp_path / "extra.bin")
        (tmp_path / "foreign.bin").write_bytes(b"something else\nend\n")
        with pytest.raises(ValidationError):
            read_plan(tmp_path / "foreign.bin")
