"""Contrastive and reconstructive SSL trainers and their batch arms."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pidbatch import balance, ndcore as nd, sampler, ssltrain
from pidbatch.errors import NumericalError, ShapeError, ValidationError
from pidbatch.ndcore import Mlp, Tensor
from pidbatch.scmgen import Environment, ScmConfig, gen_colored_dataset, structures
from pidbatch.ssltrain import (SslConfig, SslEncoder, coordinate_mask,
                               epoch_index_groups, info_nce_loss, read_training_log,
                               recon_loss, train_ssl, unit_rows,
                               write_training_log)

# Frozen: ln(1 + exp(-1)), the per-pair loss when the matching anchor scores
# cosine 1 and the lone rival scores cosine 0 at temperature 1.
LN_ONE_PLUS_E_INV = 0.31326168751822286


def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def random_unit_rows(rng: np.random.Generator, b: int, m: int) -> np.ndarray:
    z = rng.standard_normal((b, m))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def identity_mlp(d: int, name: str) -> Mlp:
    m = Mlp.create(d, [], d, np.random.default_rng(0), name=name)
    m.weights[0].data[:] = np.eye(d)
    m.biases[0].data[:] = 0.0
    return m


def colored_records(count=256):
    cfg = ScmConfig(d=11, n=3, seed=21, noise_sigma=0.1,
                    mixing="colored-compositor")
    recs = gen_colored_dataset(cfg, Environment(0, 0.775), count)
    return cfg, recs


def true_score_pool(cfg, recs) -> sampler.MatchPool:
    means = structures(cfg).s_means
    s_true = np.stack([r.s_true for r in recs])
    scores = balance.propensity_matrix(s_true, means)
    return sampler.MatchPool(scores, np.arange(len(recs)),
                             np.ones(len(recs), dtype=bool),
                             sampler.dataset_fingerprint(recs))


class TestInfoNce:
    def test_matching_anchor_with_orthogonal_rival(self):
        pos = np.array([[1.0, 0.0], [0.0, 1.0]])
        anc = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = info_nce_loss(pos, anc, temperature=1.0)
        np.testing.assert_allclose(loss.item(), LN_ONE_PLUS_E_INV, atol=1e-12)
        assert math.isclose(LN_ONE_PLUS_E_INV, math.log1p(math.exp(-1.0)),
                            rel_tol=1e-15)

    def test_identical_anchors_give_log_batch_size(self):
        rng = np.random.default_rng(4)
        b = 5
        pos = random_unit_rows(rng, b, 7)
        anc = np.tile(unit(rng.standard_normal(7)), (b, 1))
        loss = info_nce_loss(pos, anc, temperature=0.5)
        np.testing.assert_allclose(loss.item(), np.log(b), atol=1e-12)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_loss_is_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(2, 9))
        loss = info_nce_loss(random_unit_rows(rng, b, 5),
                             random_unit_rows(rng, b, 5), temperature=0.5)
        assert loss.item() >= -1e-12

    def test_invariant_under_common_rotation(self):
        rng = np.random.default_rng(11)
        pos = random_unit_rows(rng, 6, 5)
        anc = random_unit_rows(rng, 6, 5)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        base = info_nce_loss(pos, anc, 0.5).item()
        rotated = info_nce_loss(pos @ q, anc @ q, 0.5).item()
        np.testing.assert_allclose(rotated, base, atol=1e-10)

    def test_input_contracts(self):
        rng = np.random.default_rng(0)
        one = random_unit_rows(rng, 1, 4)
        with pytest.raises(ValidationError, match="at least 2"):
            info_nce_loss(one, one, 0.5)
        a = random_unit_rows(rng, 3, 4)
        with pytest.raises(ShapeError):
            info_nce_loss(a, random_unit_rows(rng, 4, 4), 0.5)
        with pytest.raises(ValidationError, match="unit"):
            info_nce_loss(a * 1.5, a, 0.5)
        with pytest.raises(ValidationError):
            info_nce_loss(a, a, 0.0)

    def test_gradient_through_normalization(self):
        rng = np.random.default_rng(9)
        z = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        with nd.Tape() as tape:
            loss = info_nce_loss(unit_rows(z), unit_rows(w), 0.7)
        grads = nd.backward(tape, loss)
        h = 1e-6
        for t in (z, w):
            flat = t.data.reshape(-1)
            for idx in range(flat.size):
                keep = flat[idx]
                flat[idx] = keep + h
                up = info_nce_loss(unit_rows(Tensor(z.data)),
                                   unit_rows(Tensor(w.data)), 0.7).item()
                flat[idx] = keep - h
                dn = info_nce_loss(unit_rows(Tensor(z.data)),
                                   unit_rows(Tensor(w.data)), 0.7).item()
                flat[idx] = keep
                np.testing.assert_allclose(grads[t].reshape(-1)[idx],
                                           (up - dn) / (2 * h), atol=1e-6)


class TestCoordinateMask:
    @given(st.integers(min_value=2, max_value=20),
           st.floats(min_value=0.01, max_value=0.99),
           st.integers(min_value=0, max_value=1000))
    @settings(max_examples=60, deadline=None)
    def test_exact_coverage_per_row(self, d, frac, seed):
        mask = coordinate_mask(d, frac, np.random.default_rng(seed), batch=5)
        want = int(np.ceil(frac * d))
        np.testing.assert_array_equal(mask.sum(axis=1), np.full(5, want))

    def test_zero_fraction_masks_nothing(self):
        mask = coordinate_mask(6, 0.0, np.random.default_rng(0), batch=3)
        assert not mask.any()

    def test_full_fraction_rejected(self):
        with pytest.raises(ValidationError):
            coordinate_mask(6, 1.0, np.random.default_rng(0), batch=3)


class TestReconLoss:
    def make_model(self, d: int) -> SslEncoder:
        cfg = SslConfig(embedding_dim=d, hidden=(d,))
        model = SslEncoder.create(d, cfg)
        model.encoder = identity_mlp(d, "enc")
        model.recon_head = identity_mlp(d, "rec")
        return model

    def test_identity_network_unmasked_identical_views_score_zero(self):
        d = 4
        x = np.random.default_rng(3).standard_normal((6, d))
        loss = recon_loss(x, x.copy(), 0.0, self.make_model(d),
                          np.random.default_rng(0))
        assert loss.item() == 0.0

    def test_identity_network_reveals_masked_coordinates_only(self):
        d, b = 5, 7
        rng_data = np.random.default_rng(8)
        x = rng_data.standard_normal((b, d))
        model = self.make_model(d)
        loss = recon_loss(x, x.copy(), 0.4, model, np.random.default_rng(77))
        mask = coordinate_mask(d, 0.4, np.random.default_rng(77), batch=b)
        want = float((x[mask] ** 2).sum()) / (b * d)
        np.testing.assert_allclose(loss.item(), want, atol=1e-14)

    def test_constant_predictor_measures_spread_around_it(self):
        d, b = 3, 64
        rng = np.random.default_rng(5)
        xl = rng.standard_normal((b, d)) + 0.7
        model = self.make_model(d)
        losses = {}
        for c in (0.0, 0.7, 1.4):
            model.recon_head.weights[0].data[:] = 0.0
            model.recon_head.biases[0].data[:] = c
            loss = recon_loss(rng.standard_normal((b, d)), xl, 0.3, model,
                              np.random.default_rng(1))
            np.testing.assert_allclose(loss.item(),
                                       float(((xl - c) ** 2).mean()), atol=1e-14)
            losses[c] = loss.item()
        mean_c = float(xl.mean())
        model.recon_head.weights[0].data[:] = 0.0
        model.recon_head.biases[0].data[:] = mean_c
        at_mean = recon_loss(rng.standard_normal((b, d)), xl, 0.3, model,
                             np.random.default_rng(1)).item()
        assert all(at_mean <= v + 1e-12 for v in losses.values())

    def test_gradient_matches_finite_differences(self):
        d = 3
        cfg = SslConfig(embedding_dim=4, hidden=(5,))
        model = SslEncoder.create(d, cfg)
        rng = np.random.default_rng(2)
        xp = rng.standard_normal((4, d))
        xl = rng.standard_normal((4, d))
        draw = 31

        def value() -> float:
            return recon_loss(xp, xl, 0.34, model,
                              np.random.default_rng(draw)).item()

        params = [*model.encoder.params(), *model.recon_head.params()]
        for p in params:
            p.grad = None
        with nd.Tape() as tape:
            loss = recon_loss(xp, xl, 0.34, model, np.random.default_rng(draw))
        nd.backward(tape, loss)
        h = 1e-5
        for p in params:
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in range(0, flat.size, 3):
                keep = flat[idx]
                flat[idx] = keep + h
                up = value()
                flat[idx] = keep - h
                dn = value()
                flat[idx] = keep
                fd = (up - dn) / (2 * h)
                assert abs(gflat[idx] - fd) <= 1e-4 * max(1.0, abs(fd)), \
                    f"{p.name}[{idx}]: {gflat[idx]} vs {fd}"

    def test_shape_mismatch_rejected(self):
        model = self.make_model(3)
        with pytest.raises(ShapeError):
            recon_loss(np.ones((2, 3)), np.ones((2, 4)), 0.3, model,
                       np.random.default_rng(0))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(temperature=0.0),
        dict(mask_fraction=0.0),
        dict(mask_fraction=1.0),
        dict(batch_source="stratified"),
        dict(objective="rotation"),
        dict(embedding_dim=0),
        dict(a=0),
        dict(epochs=0),
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValidationError):
            SslConfig(**kwargs)

    def test_arms_differ_only_in_batch_source(self):
        random_arm = SslConfig(batch_source="random", seed=7)
        pid_arm = SslConfig(batch_source="pid", seed=7)
        a = dataclasses.asdict(random_arm)
        b = dataclasses.asdict(pid_arm)
        assert a.pop("batch_source") == "random"
        assert b.pop("batch_source") == "pid"
        assert a == b


BASE = dict(epochs=12, lr=2e-3, a=15, seed=3, embedding_dim=16, hidden=(32, 32))


class TestTrainSsl:
    @pytest.mark.parametrize("objective", ["contrastive", "reconstruction"])
    @pytest.mark.parametrize("arm", ["random", "pid"])
    def test_loss_decreases_on_colored_data(self, objective, arm):
        cfg_d, recs = colored_records()
        kwargs = {}
        if arm == "pid":
            kwargs["pool"] = true_score_pool(cfg_d, recs)
        cfg = SslConfig(batch_source=arm, objective=objective, **BASE)
        model, log = train_ssl(recs, cfg, **kwargs)
        assert len(log) == cfg.epochs
        assert all(e.arm == arm for e in log)
        assert log[-1].loss < log[0].loss

    def test_same_seed_same_arm_reproduces_weights_exactly(self):
        _, recs = colored_records(128)
        cfg = SslConfig(batch_source="random", **BASE)
        m1, l1 = train_ssl(recs, cfg)
        m2, l2 = train_ssl(recs, cfg)
        for a, b in zip(m1.params(), m2.params()):
            np.testing.assert_array_equal(a.data, b.data)
        assert [e.loss for e in l1] == [e.loss for e in l2]

    def test_arms_consume_identical_pair_counts(self):
        cfg_d, recs = colored_records()
        pool = true_score_pool(cfg_d, recs)
        r_cfg = SslConfig(batch_source="random", **BASE)
        p_cfg = SslConfig(batch_source="pid", **BASE)
        for epoch in range(3):
            random_groups = epoch_index_groups(len(recs), r_cfg, epoch, None, None)
            pid_groups = epoch_index_groups(len(recs), p_cfg, epoch, pool, None)
            assert sum(map(len, random_groups)) == sum(map(len, pid_groups)) \
                == len(recs)
            assert sorted(i for g in pid_groups for i in g) == \
                list(range(len(recs)))

    def test_pid_arm_requires_a_batch_origin(self):
        _, recs = colored_records(64)
        with pytest.raises(ValidationError, match="match pool or a batch plan"):
            train_ssl(recs, SslConfig(batch_source="pid", **BASE))

    def test_pool_hash_mismatch_rejected(self):
        cfg_d, recs = colored_records(64)
        pool = true_score_pool(cfg_d, recs)
        pool.manifest_hash = "deadbeefdeadbeef"
        with pytest.raises(ValidationError, match="built for dataset"):
            train_ssl(recs, SslConfig(batch_source="pid", **BASE), pool=pool)

    def test_plan_route_with_hash_check(self):
        cfg_d, recs = colored_records(64)
        pool = true_score_pool(cfg_d, recs)
        plan = sampler.sample_epoch(pool, 15, np.random.default_rng(2))
        good = sampler.dataset_fingerprint(recs)
        cfg = SslConfig(batch_source="pid", epochs=3, lr=2e-3, a=15, seed=3,
                        embedding_dim=8, hidden=(16,))
        model, log = train_ssl(recs, cfg, plan=plan, plan_manifest=good)
        assert len(log) == 3
        with pytest.raises(ValidationError, match="plan was built"):
            train_ssl(recs, cfg, plan=plan, plan_manifest="0" * 16)

    def test_contrastive_skips_single_pair_leftover(self):
        _, recs = colored_records(33)
        cfg = SslConfig(batch_source="random", epochs=2, lr=1e-3, a=15, seed=0,
                        embedding_dim=8, hidden=(16,))
        model, log = train_ssl(recs, cfg)
        assert all(np.isfinite(e.loss) for e in log)

    def test_log_file_roundtrip(self, tmp_path):
        _, recs = colored_records(48)
        cfg = SslConfig(batch_source="random", epochs=2, lr=1e-3, a=15, seed=0,
                        embedding_dim=8, hidden=(16,))
        _, log = train_ssl(recs, cfg)
        path = tmp_path / "train.log"
        write_training_log(path, log)
        loaded = read_training_log(path)
        assert [(e.epoch, e.arm, e.loss) for e in loaded] == \
            [(e.epoch, e.arm, e.loss) for e in log]
        assert all(e.wall_time >= 0 for e in loaded)

    def test_checkpoint_roundtrip(self, tmp_path):
        _, recs = colored_records(48)
        cfg = SslConfig(batch_source="random", epochs=2, lr=1e-3, a=15, seed=0,
                        embedding_dim=8, hidden=(16,))
        model, _ = train_ssl(recs, cfg)
        ssltrain.save_ssl(model, tmp_path, {"seed": 0, "arm": "random"})
        loaded, manifest = ssltrain.load_ssl(tmp_path)
        assert manifest == {"seed": 0, "arm": "random"}
        for a, b in zip(model.params(), loaded.params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_non_finite_embedding_rejected(self):
        model = SslEncoder.create(3, SslConfig(embedding_dim=4, hidden=(5,)))
        with pytest.raises(NumericalError):
            model.embed(np.array([[np.inf, 0.0, 0.0]]))
