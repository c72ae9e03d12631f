import numpy as np
import pytest

from conftest import rel_err
from quann.autodiff import ShapeError, Tape, Tensor, backward, finite_diff_grad
from quann.models import (BINARY_FAMILIES, FAMILIES, ModelConfig, SetModel, build_model, default_config,
                          loss_mse)
from quann.nets import ConfigError, MlpSpec, RevNetSpec
from quann.nkm import EmptySetError, SetBatch


def random_sets(rng, count, n_lo=2, n_hi=6, width=16):
    return [rng.normal(size=(int(rng.integers(n_lo, n_hi + 1)), width)) for _ in range(count)]


def loss_at(model, batch, target):
    return loss_mse(model(batch), target)


class TestConfig:
    def test_parameter_counts(self):
        counts = {f: build_model(default_config(f)).parameter_count for f in FAMILIES}
        # frozen from the builder; ablation1 equals the published synthetic count of 8480
        assert counts["ablation1"] == 8480
        assert counts["quann1"] == counts["ablation3"] == 10720
        assert abs(counts["ablation2"] - counts["quann1"]) <= 0.05 * counts["quann1"]
        assert counts["hpds"] == counts["deepset"] + 1

    def test_parameter_count_is_sum_of_sizes(self):
        for fam in FAMILIES:
            m = build_model(default_config(fam))
            assert m.parameter_count == sum(p.size for p in m.parameters())

    def test_generator_presence(self):
        cfg = default_config("quann1")
        with pytest.raises(ConfigError, match="'generator'"):
            ModelConfig("quann1", 16, 16, 16, cfg.encoder, cfg.estimator, None).validate()
        with pytest.raises(ConfigError, match="'generator'"):
            ModelConfig("deepset", 16, 16, 16, MlpSpec((16, 16)), MlpSpec((16, 16)), RevNetSpec(16)).validate()

    def test_odd_latent(self):
        with pytest.raises(ConfigError):
            default_config("quann1", latent_width=15)

    def test_ablation2_mismatch_named(self):
        bad = ModelConfig("ablation2", 16, 16, 16, MlpSpec((16, 16)), MlpSpec((16, 16)))
        with pytest.raises(ConfigError, match="5%"):
            bad.validate()

    def test_unknown_family(self):
        with pytest.raises(ConfigError, match="'family'"):
            default_config("transformer")

    def test_dict_round_trip(self):
        for fam in ("quann1", "ablation2", "settransformer_j2"):
            cfg = default_config(fam, seed=7)
            assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_same_seed_same_params(self):
        a = build_model(default_config("quann1", seed=3))
        b = build_model(default_config("quann1", seed=3))
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_parameter_groups(self):
        groups = build_model(default_config("quann1")).parameter_groups()
        assert set(groups) == {"phi", "psi", "rho"}
        assert set(build_model(default_config("hpds")).parameter_groups()) == {"phi", "rho", "pool"}


class TestForward:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_shape_and_permutation_invariance(self, family, rng):
        model = build_model(default_config(family, seed=1))
        sets = random_sets(rng, 3)
        out = model(SetBatch.from_sets(sets)).data
        assert out.shape == (3, 16)
        for _ in range(10):
            shuffled = [s[rng.permutation(len(s))] for s in sets]
            assert np.abs(model(SetBatch.from_sets(shuffled)).data - out).max() < 1e-8

    def test_quann1_singleton(self, rng):
        model = build_model(default_config("quann1"))
        x = rng.normal(size=(1, 16))
        got = model(SetBatch.from_sets([x])).data
        direct = model.rho(model.phi(Tensor(x))).data
        np.testing.assert_allclose(got, direct, atol=1e-12)

    def test_deepset_duplicates_double(self, rng):
        model = build_model(default_config("deepset"))
        x = rng.normal(size=(1, 16))
        one = model.pooled(SetBatch.from_sets([x])).data
        two = model.pooled(SetBatch.from_sets([np.vstack([x, x])])).data
        # matmuls over 1 and 2 rows may round differently in the last ulp
        np.testing.assert_allclose(two, 2 * one, rtol=1e-12)

    def test_norm_deepset_duplicates_invariant(self, rng):
        model = build_model(default_config("norm_deepset"))
        x = rng.normal(size=(1, 16))
        np.testing.assert_allclose(model(SetBatch.from_sets([x])).data,
                                   model(SetBatch.from_sets([np.vstack([x, x])])).data, rtol=1e-12, atol=1e-14)

    def test_identity_generator_is_mean_pooling(self, rng):
        q = build_model(default_config("quann1", seed=5))
        for _, p in q.psi.named_parameters():
            p.data[...] = 0.0
        a = build_model(default_config("ablation1", seed=5))
        batch = SetBatch.from_sets(random_sets(rng, 4))
        np.testing.assert_allclose(q(batch).data, a(batch).data, rtol=1e-12, atol=1e-12)

    def test_ablation3_matches_quann1_on_singletons(self, rng):
        q = build_model(default_config("quann1", seed=2))
        a = build_model(default_config("ablation3", seed=2))
        batch = SetBatch.from_sets(random_sets(rng, 5, 1, 1))
        np.testing.assert_array_equal(q(batch).data, a(batch).data)
        batch = SetBatch.from_sets(random_sets(rng, 5, 3, 5))
        assert not np.allclose(q(batch).data, a(batch).data)

    def test_generator_space_mean(self, rng):
        model = build_model(default_config("quann1", seed=4))
        sets = random_sets(rng, 3)
        pooled = model.pooled(SetBatch.from_sets(sets)).data
        for s, y in zip(sets, pooled):
            mean_psi = model.psi.forward(model.phi(Tensor(s))).data.mean(axis=0)
            assert np.abs(model.psi.forward(Tensor(y)).data - mean_psi).max() < 1e-8

    @pytest.mark.parametrize("family", sorted(BINARY_FAMILIES))
    def test_binary_needs_pairs(self, family, rng):
        model = build_model(default_config(family))
        with pytest.raises(EmptySetError):
            model(SetBatch.from_sets([rng.normal(size=(1, 16))]))

    def test_width_mismatch(self, rng):
        model = build_model(default_config("deepset"))
        with pytest.raises(ShapeError):
            model(SetBatch.from_sets([rng.normal(size=(3, 8))]))

    def test_hpds_exponent_clamped(self):
        model = build_model(default_config("hpds"))
        model.power.data[...] = 1e-6
        model.post_step()
        assert float(model.power.data) == 1e-3


class TestLoss:
    def test_examples(self):
        assert loss_mse(Tensor([[1.0, 2.0]]), [[1.0, 2.0]]).item() == 0.0
        assert loss_mse(Tensor([[0.0]]), [[2.0]]).item() == 4.0
        assert loss_mse(Tensor([[0.0], [2.0]]), [[1.0], [1.0]]).item() == 1.0
        with pytest.raises(ShapeError):
            loss_mse(Tensor([[0.0]]), [[1.0, 2.0]])


class TestGradients:
    @pytest.mark.parametrize("family", ["quann1", "quann2", "hpds", "pointnet", "ablation3"])
    def test_groups_match_finite_differences(self, family, rng):
        model = build_model(default_config(family, element_width=4, latent_width=4, output_width=2, hidden=6,
                                           revnet_blocks=2, revnet_hidden=(3,), attn_width=3, seed=11))
        batch = SetBatch.from_sets(random_sets(rng, 3, 2, 3, width=4))
        target = rng.normal(size=(3, 2))
        for p in model.parameters():
            p.grad = None
        with Tape() as tape:
            loss = loss_at(model, batch, target)
        backward(loss, tape)
        for group, params in model.parameter_groups().items():
            analytic, numeric = [], []
            for p in params:
                analytic.append(p.grad.ravel())

                def f(t, p=p):
                    saved = p.data
                    p.data = t.data
                    try:
                        return loss_at(model, batch, target)
                    finally:
                        p.data = saved

                numeric.append(finite_diff_grad(f, Tensor(p.data)).data.ravel())
            assert rel_err(np.concatenate(analytic), np.concatenate(numeric)) < 1e-3, group


class TestEquivariant:
    def model(self, seed=0):
        return build_model(default_config("quann1", equivariant=True, seed=seed))

    def test_permutation_equivariance(self, rng):
        model = self.model()
        x = rng.normal(size=(7, 16))
        out = model.equivariant_forward(SetBatch.from_sets([x])).data[0]
        perm = rng.permutation(7)
        out_p = model.equivariant_forward(SetBatch.from_sets([x[perm]])).data[0]
        assert np.abs(out_p - out[perm]).max() < 1e-10

    def test_singleton(self, rng):
        model = self.model()
        x = rng.normal(size=(1, 16))
        got = model.equivariant_forward(SetBatch.from_sets([x])).data[0]
        phi = model.phi(Tensor(x)).data
        expected = model.rho(Tensor(np.concatenate([x, phi], axis=1))).data
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_equal_rows(self, rng):
        model = self.model()
        x = np.tile(rng.normal(size=(1, 16)), (5, 1))
        out = model.equivariant_forward(SetBatch.from_sets([x])).data[0]
        assert (out == out[0]).all()

    def test_padding_rows_zero(self, rng):
        model = self.model()
        out = model.equivariant_forward(SetBatch.from_sets([rng.normal(size=(2, 16)),
                                                            rng.normal(size=(4, 16))])).data
        assert out.shape == (2, 4, 16)
        assert not out[0, 2:].any()

    def test_mode_guards(self, rng):
        batch = SetBatch.from_sets([rng.normal(size=(2, 16))])
        with pytest.raises(ConfigError):
            self.model()(batch)
        with pytest.raises(ConfigError):
            build_model(default_config("quann1")).equivariant_forward(batch)


class TestPersistence:
    def test_save_load(self, tmp_path, rng):
        cfg = default_config("quann1", seed=9)
        model = build_model(cfg)
        path = tmp_path / "m.qnn"
        model.save(path)
        again = SetModel.load(path, cfg)
        batch = SetBatch.from_sets(random_sets(rng, 2))
        assert model(batch).data.tobytes() == again(batch).data.tobytes()
        with pytest.raises(ValueError, match="quann1"):
            SetModel.load(path, default_config("ablation3"))
