import math

import numpy as np
import pytest

from tightmatch import diffcore as dc
from tightmatch.diffcore import Tensor
from tightmatch.models import (AdvLossParts, AtmModel, MlpSpec, ModelError,
                               adversarial_loss, cross_entropy,
                               entropy_weight, multilinear_map)


def tiny_model(seed=0, widths=(3, 4), n_classes=2, disc_hidden=5):
    return AtmModel(MlpSpec(widths), n_classes, disc_hidden=disc_hidden, seed=seed)


class TestMlpSpec:
    def test_widths_coerced_to_ints(self):
        spec = MlpSpec((2.0, 8))
        assert spec.layer_widths == (2, 8)
        assert spec.input_dim == 2 and spec.feature_dim == 8

    def test_rejects_short_or_nonpositive(self):
        with pytest.raises(ModelError):
            MlpSpec((4,))
        with pytest.raises(ModelError):
            MlpSpec((4, 0, 3))


class TestAtmModel:
    def test_parameter_names(self):
        model = tiny_model(widths=(3, 5, 4))
        expected = {"feat.0.W", "feat.0.b", "feat.1.W", "feat.1.b",
                    "pred.W", "pred.b",
                    "disc.0.W", "disc.0.b", "disc.1.W", "disc.1.b",
                    "disc.2.W", "disc.2.b"}
        assert set(model.params) == expected

    def test_features_are_nonnegative(self):
        model = tiny_model()
        x = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
        f = model.forward_features(x)
        assert f.shape == (6, 4)
        assert np.all(f.data >= 0.0)

    def test_predictions_are_rows_of_a_simplex(self):
        model = tiny_model()
        f = model.forward_features(Tensor(np.random.default_rng(1).normal(size=(5, 3))))
        p = model.predict(f)
        assert p.shape == (5, 2)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p.data >= 0.0)

    def test_discriminator_output_is_clamped_probability(self):
        model = tiny_model()
        h = Tensor(np.random.default_rng(2).normal(size=(7, 8)) * 50.0)
        d = model.discriminate(h)
        assert d.shape == (7, 1)
        assert np.all(d.data >= 1e-7) and np.all(d.data <= 1.0 - 1e-7)

    def test_input_width_checked(self):
        model = tiny_model()
        with pytest.raises(ModelError):
            model.forward_features(Tensor(np.zeros((2, 5))))
        with pytest.raises(ModelError):
            model.discriminate(Tensor(np.zeros((2, 3))))

    def test_seeded_init_is_reproducible(self):
        a, b = tiny_model(seed=3), tiny_model(seed=3)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_pseudo_labels_tie_breaks_low(self):
        model = tiny_model()
        # force a tied predictor: zero weights make every row uniform
        model.params["pred.W"].data[:] = 0.0
        model.params["pred.b"].data[:] = 0.0
        labels = model.pseudo_labels(np.random.default_rng(4).normal(size=(5, 3)))
        assert np.all(labels == 0)

    def test_checkpoint_round_trip_is_bit_exact(self, tmp_path):
        model = tiny_model(seed=9, widths=(3, 6, 4))
        path = tmp_path / "ckpt.json"
        model.save(path)
        loaded = AtmModel.load(path)
        assert loaded.spec.layer_widths == model.spec.layer_widths
        assert loaded.n_classes == model.n_classes
        for name in model.params:
            assert np.array_equal(loaded.params[name].data, model.params[name].data)


class TestMultilinearMap:
    def test_one_hot_rows(self):
        f = Tensor([[1.0, 0.0, 0.0]])
        p = Tensor([[0.0, 1.0]])
        out = multilinear_map(f, p)
        # a-major layout: h[a*C + b] = f[a] * p[b]
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]])

    def test_norm_factorizes(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(8, 4))
        p = rng.normal(size=(8, 3))
        h = multilinear_map(Tensor(f), Tensor(p)).data
        np.testing.assert_allclose(
            np.linalg.norm(h, axis=1),
            np.linalg.norm(f, axis=1) * np.linalg.norm(p, axis=1), atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        p = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(4, 12)))
        err = dc.grad_check(
            lambda f: dc.sum_all(dc.mul(multilinear_map(f, p), w)),
            rng.normal(size=(4, 4)))
        assert err <= 1e-6

    def test_row_mismatch(self):
        with pytest.raises(ModelError):
            multilinear_map(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestEntropyWeight:
    def test_one_hot_row_gets_raw_weight_two(self):
        # H = 0 so raw = exp(0) + 1 = 2; single row normalizes to 1
        w = entropy_weight(Tensor([[1.0, 0.0]]))
        assert w.item() == pytest.approx(1.0)

    def test_uniform_ten_classes_raw_weight(self):
        # exp(-log 10) + 1 = 1.1 before normalization
        p = Tensor(np.full((1, 10), 0.1))
        w_raw = math.exp(-math.log(10.0)) + 1.0
        assert w_raw == pytest.approx(1.1)
        assert entropy_weight(p).item() == pytest.approx(1.0)

    def test_confident_rows_outweigh_uncertain_ones(self):
        p = Tensor([[0.99, 0.01], [0.5, 0.5]])
        w = entropy_weight(p).data.ravel()
        assert w[0] > w[1]
        assert w.mean() == pytest.approx(1.0, abs=1e-12)

    def test_batch_mean_is_one(self):
        rng = np.random.default_rng(7)
        probs = rng.dirichlet(np.ones(4), size=16)
        w = entropy_weight(Tensor(probs))
        assert w.data.mean() == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_simplex_rows(self):
        with pytest.raises(ModelError):
            entropy_weight(Tensor([[0.4, 0.4]]))


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        p = Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert cross_entropy(p, [0, 1]).item() == pytest.approx(0.0, abs=1e-10)

    def test_uniform_prediction(self):
        p = Tensor([[0.5, 0.5]])
        assert cross_entropy(p, [0]).item() == pytest.approx(math.log(2.0))

    def test_label_range_checked(self):
        p = Tensor([[0.5, 0.5]])
        with pytest.raises(ModelError):
            cross_entropy(p, [2])
        with pytest.raises(ModelError):
            cross_entropy(p, [-1])


class TestAdversarialLoss:
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.model = tiny_model(seed=1)
        self.xs = Tensor(rng.normal(size=(6, 3)))
        self.xt = Tensor(rng.normal(size=(6, 3)))
        self.ys = rng.integers(0, 2, size=6)

    def test_parts_and_total(self):
        parts = adversarial_loss(self.model, self.xs, self.ys, self.xt, lam=0.5)
        assert isinstance(parts, AdvLossParts)
        assert parts.total == pytest.approx(parts.cls_loss + 0.5 * parts.dom_loss)
        assert math.isfinite(parts.total)

    def test_chance_discriminator_gives_two_log_half(self):
        # force D output to sigmoid(0) = 0.5 everywhere
        for i in range(3):
            self.model.params[f"disc.{i}.W"].data[:] = 0.0
            self.model.params[f"disc.{i}.b"].data[:] = 0.0
        parts = adversarial_loss(self.model, self.xs, self.ys, self.xt)
        assert parts.dom_loss == pytest.approx(2.0 * math.log(0.5), abs=1e-10)

    def test_zero_grl_coeff_blocks_feature_domain_gradient(self):
        parts = adversarial_loss(self.model, self.xs, self.ys, self.xt, grl_coeff=0.0)
        self.model.zero_grads()
        dc.backward(-1.0 * parts.dom)
        for name, p in self.model.params.items():
            if name.startswith("disc."):
                assert np.any(p.grad != 0.0)
            else:
                np.testing.assert_array_equal(p.grad, 0.0)

    def test_reversal_coeff_scales_feature_gradient_only(self):
        def grads(coeff):
            model = tiny_model(seed=1)
            parts = adversarial_loss(model, self.xs, self.ys, self.xt,
                                     grl_coeff=coeff)
            model.zero_grads()
            dc.backward(parts.dom)
            return (model.params["feat.0.W"].grad.copy(),
                    model.params["disc.0.W"].grad.copy())

        gf1, gd1 = grads(1.0)
        gf2, gd2 = grads(2.0)
        np.testing.assert_allclose(gf2, 2.0 * gf1, atol=1e-12)
        np.testing.assert_allclose(gd2, gd1, atol=1e-12)
        assert np.any(gf1 != 0.0)

    def test_activations_are_exposed_for_reuse(self):
        parts = adversarial_loss(self.model, self.xs, self.ys, self.xt)
        assert parts.fs.shape == (6, 4) and parts.ft.shape == (6, 4)
        assert parts.ps.shape == (6, 2) and parts.pt.shape == (6, 2)

    def test_empty_batch_rejected(self):
        with pytest.raises(ModelError):
            adversarial_loss(self.model, Tensor(np.zeros((0, 3))), [], self.xt)
