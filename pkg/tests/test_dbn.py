import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitfuse.dbn import (DbnModel, RbmLayer, TrainConfig, TrainingError, cd_gradient, cd_step, encode,
                         hidden_probs, init_layer, lipschitz_bound, load_dbn, logistic, parameter_count,
                         reconstruction_error, save_dbn, train_dbn, train_layer, visible_reconstruct)

from oracles import bb_exact_gradient, bb_log_likelihood, bb_sample_model


def random_layer(kind, V, H, seed, scale=1.0):
    r = np.random.default_rng(seed)
    z = r.normal(0, 0.3, V) if kind == "GB" else np.zeros(V)
    return RbmLayer(kind, r.normal(0, scale, (V, H)), r.normal(0, scale, V), r.normal(0, scale, H), z)


def gb_energy(layer, v, h):
    s2 = np.exp(2 * layer.z)
    return (np.sum((v - layer.b) ** 2 / (2 * s2), axis=-1) - h @ layer.c
            - np.einsum("ni,ij,nj->n", v / s2, layer.W, h))


def flat(g):
    return np.concatenate([g["W"].ravel(), g["b"], g["c"]])


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestConditionals:
    def test_logistic_is_overflow_free(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            out = logistic(np.array([-1e4, 0.0, 1e4]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-200)

    @pytest.mark.parametrize("seed", range(3))
    def test_gb_hidden_probs_match_energy_differences(self, seed):
        layer = random_layer("GB", 5, 4, seed)
        v = np.random.default_rng(seed).normal(size=(7, 5))
        h = np.zeros((7, 4))
        for j in range(4):
            h1 = h.copy()
            h1[:, j] = 1.0
            expected = 1.0 / (1.0 + np.exp(gb_energy(layer, v, h1) - gb_energy(layer, v, h)))
            np.testing.assert_allclose(hidden_probs(layer, v)[:, j], expected, rtol=1e-12)

    def test_gb_visible_mean_minimizes_energy(self):
        layer = random_layer("GB", 4, 3, 7)
        h = np.array([[1.0, 0.0, 1.0]])
        mean = visible_reconstruct(layer, h)
        eps = 1e-6
        for i in range(4):
            dv = np.zeros((1, 4))
            dv[0, i] = eps
            grad = (gb_energy(layer, mean + dv, h) - gb_energy(layer, mean - dv, h)) / (2 * eps)
            assert abs(grad[0]) < 1e-6

    def test_gb_sample_mode_has_sigma_spread(self):
        layer = RbmLayer("GB", np.zeros((2, 1)), np.array([1.0, -1.0]), np.zeros(1), np.log([0.5, 2.0]))
        v = visible_reconstruct(layer, np.zeros((40000, 1)), "sample", np.random.default_rng(0))
        np.testing.assert_allclose(v.mean(axis=0), [1.0, -1.0], atol=0.05)
        np.testing.assert_allclose(v.std(axis=0), [0.5, 2.0], rtol=0.03)

    def test_bb_sample_is_binary(self):
        layer = random_layer("BB", 4, 3, 1)
        v = visible_reconstruct(layer, np.ones((10, 3)), "sample", np.random.default_rng(0))
        assert set(np.unique(v)) <= {0.0, 1.0}

    def test_shape_errors(self):
        layer = init_layer("GB", 4, 3)
        with pytest.raises(ValueError):
            hidden_probs(layer, np.zeros((2, 5)))
        with pytest.raises(ValueError):
            visible_reconstruct(layer, np.zeros((2, 4)))
        with pytest.raises(ValueError):
            visible_reconstruct(layer, np.zeros((2, 3)), "sample")


class TestContrastiveDivergence:
    def test_oracle_gradient_matches_finite_differences(self):
        # check the enumeration oracle itself before trusting it
        layer = random_layer("BB", 4, 2, 11, scale=0.7)
        data = np.random.default_rng(2).integers(0, 2, (6, 4)).astype(float)
        g = bb_exact_gradient(layer.W, layer.b, layer.c, data)
        eps = 1e-6
        for idx in [(0, 0), (3, 1), (2, 0)]:
            Wp, Wm = layer.W.copy(), layer.W.copy()
            Wp[idx] += eps
            Wm[idx] -= eps
            fd = (bb_log_likelihood(Wp, layer.b, layer.c, data) - bb_log_likelihood(Wm, layer.b, layer.c, data)) / (2 * eps)
            assert abs(fd - g["W"][idx]) < 1e-7

    @pytest.mark.parametrize("seed", [0, 1])
    def test_long_chain_cd_matches_exact_gradient(self, seed):
        layer = random_layer("BB", 6, 3, seed, scale=0.5)
        r = np.random.default_rng(100 + seed)
        data = r.integers(0, 2, (20, 6)).astype(float)
        batch = np.repeat(data, 2000, axis=0)
        est = cd_gradient(layer, batch, 20, np.random.default_rng(seed))
        exact = bb_exact_gradient(layer.W, layer.b, layer.c, data)
        assert cosine(flat(est), flat(exact)) >= 0.9

    def test_cd_vanishes_on_model_samples(self):
        # chains started at equilibrium stay there, so the expected update is ~0
        layer = random_layer("BB", 6, 3, 4, scale=0.8)
        r = np.random.default_rng(5)
        samples = bb_sample_model(layer.W, layer.b, layer.c, 100000, r)
        drift = flat(cd_gradient(layer, samples, 1, r))
        off = r.integers(0, 2, (100000, 6)).astype(float)
        baseline = flat(cd_gradient(layer, off, 1, r))
        assert np.linalg.norm(drift) < 0.1 * np.linalg.norm(baseline)
        assert np.abs(drift).max() < 0.01

    def test_sigma_gradient_matches_energy_derivative(self):
        layer = random_layer("GB", 3, 2, 8)
        v = np.random.default_rng(1).normal(size=(5, 3))
        g = cd_gradient(layer, v, 1, np.random.default_rng(3), learn_sigma=True)
        # replay the same chain to recover its end state
        r = np.random.default_rng(3)
        ph0 = hidden_probs(layer, v)
        h = (r.random(ph0.shape) < ph0).astype(float)
        vk = visible_reconstruct(layer, h)
        phk = hidden_probs(layer, vk)
        eps = 1e-6

        def mean_neg_dE_dz(vv, ph, i):
            zp, zm = layer.z.copy(), layer.z.copy()
            zp[i] += eps
            zm[i] -= eps
            lp = RbmLayer("GB", layer.W, layer.b, layer.c, zp)
            lm = RbmLayer("GB", layer.W, layer.b, layer.c, zm)
            return -np.mean(gb_energy(lp, vv, ph) - gb_energy(lm, vv, ph)) / (2 * eps)

        for i in range(3):
            expected = mean_neg_dE_dz(v, ph0, i) - mean_neg_dE_dz(vk, phk, i)
            assert abs(g["z"][i] - expected) < 1e-6

    def test_sigma_frozen_by_default(self):
        layer = random_layer("GB", 3, 2, 8)
        g = cd_gradient(layer, np.ones((4, 3)), 1, np.random.default_rng(0))
        np.testing.assert_array_equal(g["z"], 0.0)

    def test_step_applies_momentum_and_weight_decay(self):
        layer = random_layer("BB", 4, 2, 3)
        batch = np.random.default_rng(0).integers(0, 2, (8, 4)).astype(float)
        cfg = TrainConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.01)
        grads = cd_gradient(layer, batch, 1, np.random.default_rng(9))
        vel0 = {k: np.full_like(v, 0.2) for k, v in layer.params().items()}
        new, err, vel = cd_step(layer, batch, cfg, np.random.default_rng(9), vel0)
        expected_W = layer.W + 0.5 * 0.2 + 0.1 * (grads["W"] - 0.01 * layer.W)
        np.testing.assert_allclose(new.W, expected_W, rtol=1e-12)
        np.testing.assert_allclose(new.c, layer.c + 0.1 + 0.1 * grads["c"], rtol=1e-12)
        assert err == pytest.approx(reconstruction_error(layer, batch))
        np.testing.assert_allclose(vel["W"], new.W - layer.W)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_raises(self):
        layer = init_layer("GB", 2, 2)
        with pytest.raises(TrainingError):
            cd_step(layer, np.full((4, 2), 1e300), TrainConfig(learning_rate=1.0), np.random.default_rng(0))


def structured_data(n=2000, seed=0):
    r = np.random.default_rng(seed)
    centers = np.array([[2.0, 0, 0, 1], [0, 2.0, 1, 0], [-1, -1, 2.0, 2.0]])
    return centers[r.integers(0, 3, n)] + 0.2 * r.normal(size=(n, 4))


class TestTraining:
    def test_reconstruction_error_decreases(self):
        layer, trace = train_layer(init_layer("GB", 4, 8, seed=1), structured_data(),
                                   TrainConfig(learning_rate=0.05, momentum=0.9, epochs=8))
        assert trace[-1] < 0.5 * trace[0]

    def test_training_is_deterministic(self):
        cfg = TrainConfig(learning_rate=0.05, epochs=2, seed=4)
        a, ta = train_dbn(structured_data(300), [5, 3], cfg)
        b, tb = train_dbn(structured_data(300), [5, 3], cfg)
        assert ta == tb
        for la, lb in zip(a.layers, b.layers):
            assert la.W.tobytes() == lb.W.tobytes()

    def test_layer_kinds_and_seeds(self):
        model, traces = train_dbn(structured_data(200), [6, 3], TrainConfig(epochs=1, seed=10))
        assert [l.kind for l in model.layers] == ["GB", "BB"]
        assert [c.seed for c in model.configs] == [10, 11]
        assert len(traces) == 2 and len(traces[0]) == 1

    def test_encode_range_and_shape(self):
        model, _ = train_dbn(structured_data(200), [6, 3], TrainConfig(epochs=1))
        out = encode(model, structured_data(50, seed=3))
        assert out.shape == (50, 3) and ((out > 0) & (out < 1)).all()

    @pytest.mark.parametrize("dims", [[], [4, 4, 4, 4]])
    def test_depth_limits(self, dims):
        with pytest.raises(ValueError):
            train_dbn(structured_data(50), dims, TrainConfig(epochs=0))

    def test_model_validates_chaining(self):
        with pytest.raises(ValueError):
            DbnModel((init_layer("GB", 4, 3), init_layer("BB", 4, 2)))
        with pytest.raises(ValueError):
            DbnModel((init_layer("BB", 4, 3),))

    @pytest.mark.parametrize("dims", [[4, 64, 32], [6, 10], [3, 5, 2, 7]])
    def test_parameter_count(self, dims):
        layers = tuple(init_layer("GB" if i == 0 else "BB", v, h) for i, (v, h) in enumerate(zip(dims, dims[1:])))
        assert DbnModel(layers).parameter_count() == parameter_count(dims)

    def test_checkpoint_roundtrip(self, tmp_path):
        model, _ = train_dbn(structured_data(200), [6, 3], TrainConfig(epochs=1, learn_sigma=True))
        save_dbn(model, tmp_path / "enc")
        back = load_dbn(tmp_path / "enc")
        assert back.configs == model.configs
        for la, lb in zip(model.layers, back.layers):
            assert la.kind == lb.kind
            for k in ("W", "b", "c", "z"):
                np.testing.assert_array_equal(getattr(lb, k), getattr(la, k).astype(np.float32))

    def test_checkpoint_size_mismatch(self, tmp_path):
        model, _ = train_dbn(structured_data(100), [3], TrainConfig(epochs=0))
        save_dbn(model, tmp_path)
        (tmp_path / "layer0_W.bin").write_bytes(b"\0" * 8)
        with pytest.raises(ValueError, match="layer0_W"):
            load_dbn(tmp_path)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_lipschitz_bound_holds(seed):
    r = np.random.default_rng(seed)
    layers = (random_layer("GB", 4, 5, seed), random_layer("BB", 5, 3, seed + 1))
    model = DbnModel(layers)
    x, y = r.normal(size=(20, 4)), r.normal(size=(20, 4))
    lhs = np.linalg.norm(encode(model, x) - encode(model, y), axis=1)
    assert (lhs <= lipschitz_bound(model) * np.linalg.norm(x - y, axis=1) + 1e-12).all()
