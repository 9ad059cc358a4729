"""Neural engine: gradient checks, optimizer rules, training, serialization."""
import numpy as np
import pytest

from canloc.nn import (
    Adam,
    FastInference,
    LayerSpec,
    NnError,
    Param,
    RMSProp,
    Sequential,
    TrainConfig,
    TrainingError,
    build_model,
    load_model,
    loss_and_grad,
    save_model,
    train,
)
from canloc.rng import substream

FD_STEP = 1e-5
REL_TOL = 1e-4

STACK = [
    LayerSpec("conv1d", filters=4, kernel_size=3),
    LayerSpec("batchnorm"),
    LayerSpec("activation", activation="leaky_relu"),
    LayerSpec("conv1d", filters=4, kernel_size=4),
    LayerSpec("activation", activation="relu"),
    LayerSpec("maxpool1d", pool_size=2),
    LayerSpec("dropout", rate=0.4),
    LayerSpec("dense", units=8),
    LayerSpec("batchnorm"),
    LayerSpec("activation", activation="sigmoid"),
    LayerSpec("dense", units=6),
    LayerSpec("activation", activation="leaky_relu"),
]

HEADS = {
    "mse": [LayerSpec("dense", units=3), LayerSpec("activation", activation="linear")],
    "bce": [LayerSpec("dense", units=1), LayerSpec("activation", activation="sigmoid")],
    "weighted_bce": [LayerSpec("dense", units=1), LayerSpec("activation", activation="sigmoid")],
    "cce": [LayerSpec("dense", units=3), LayerSpec("activation", activation="softmax")],
}


def targets_for(loss, rng, n):
    if loss == "mse":
        return rng.normal(size=(n, 3))
    if loss in ("bce", "weighted_bce"):
        return rng.integers(0, 2, size=(n, 1)).astype(float)
    return rng.integers(0, 3, size=n)


def finite_difference_check(model, x, targets, loss, cw=None):
    """Central finite differences against analytic gradients.

    Dropout masks are replayed identically for every evaluation by reseeding
    the generator passed to forward.
    """

    def evaluate():
        out = model.forward(x, training=True, rng=substream(1234, "fd"))
        return loss_and_grad(loss, out, targets, cw)

    model.zero_grads()
    _, grad_out = evaluate()
    model.backward(grad_out)
    worst = 0.0
    for p in model.params():
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        idxs = np.linspace(0, flat.size - 1, min(10, flat.size)).astype(int)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            lp, _ = evaluate()
            flat[i] = orig - FD_STEP
            lm, _ = evaluate()
            flat[i] = orig
            fd = (lp - lm) / (2 * FD_STEP)
            rel = abs(p.grad.reshape(-1)[i] - fd) / max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, rel)
    return worst


class TestGradients:
    @pytest.mark.parametrize("loss", ["mse", "bce", "weighted_bce", "cce"])
    def test_every_layer_kind_against_finite_differences(self, loss):
        model = build_model(STACK + HEADS[loss], (12, 2), seed=5)
        rng = np.random.default_rng(8)
        x = rng.normal(0.2, 0.7, size=(5, 12, 2))
        t = targets_for(loss, rng, 5)
        cw = (0.5, 2.0) if loss == "weighted_bce" else None
        assert finite_difference_check(model, x, t, loss, cw) < REL_TOL

    def test_zero_loss_batch_gives_zero_gradients(self):
        model = build_model(
            [LayerSpec("dense", units=4), LayerSpec("activation", activation="linear")],
            (3,),
            seed=0,
        )
        x = np.random.default_rng(0).normal(size=(6, 3))
        out = model.forward(x, training=True)
        model.zero_grads()
        loss, grad = loss_and_grad("mse", out, out.copy())
        assert loss == 0.0
        model.backward(grad)
        for p in model.params():
            assert np.all(p.grad == 0.0)

    def test_weighted_bce_unit_weights_equals_plain_bce(self):
        rng = np.random.default_rng(1)
        out = rng.uniform(0.05, 0.95, size=(8, 1))
        t = rng.integers(0, 2, size=(8, 1)).astype(float)
        l1, g1 = loss_and_grad("bce", out, t)
        l2, g2 = loss_and_grad("weighted_bce", out, t, (1.0, 1.0))
        assert l1 == pytest.approx(l2, abs=0)
        assert np.array_equal(g1, g2)

    def test_weighted_bce_scales_gradient_by_class_weight(self):
        # Per-example gradient norm scales by exactly that example's weight.
        rng = np.random.default_rng(2)
        model = build_model(
            [LayerSpec("dense", units=1), LayerSpec("activation", activation="sigmoid")],
            (4,),
            seed=3,
        )
        x = rng.normal(size=(1, 4))
        class_weights = (3.0, 0.25)
        for target in (0.0, 1.0):
            grads = []
            for weights in [(1.0, 1.0), class_weights]:
                model.zero_grads()
                out = model.forward(x, training=True)
                _, g = loss_and_grad("weighted_bce", out, np.array([[target]]), weights)
                model.backward(g)
                grads.append(np.concatenate([p.grad.ravel() for p in model.params()]))
            expected = class_weights[int(target)]
            ratio = np.linalg.norm(grads[1]) / np.linalg.norm(grads[0])
            assert ratio == pytest.approx(expected, rel=1e-9)


class TestForwardContracts:
    def test_softmax_uniform_on_equal_logits(self):
        model = build_model([LayerSpec("activation", activation="softmax")], (7,), seed=0)
        out = model.forward(np.full((2, 7), 3.3))
        assert np.allclose(out, 1 / 7)
        assert np.allclose(out.sum(axis=-1), 1.0)

    def test_dropout_identity_at_inference(self):
        model = build_model([LayerSpec("dropout", rate=0.5)], (10,), seed=0)
        x = np.random.default_rng(0).normal(size=(4, 10))
        assert np.array_equal(model.forward(x, training=False), x)

    def test_conv_identity_kernel_reproduces_input(self):
        model = build_model([LayerSpec("conv1d", filters=1, kernel_size=3)], (9, 1), seed=0)
        conv = model.layers[0]
        conv.w.value[...] = 0.0
        conv.w.value[0, 1, 0] = 1.0  # centered single tap
        conv.b.value[...] = 0.0
        x = np.random.default_rng(1).normal(size=(2, 9, 1))
        assert np.allclose(model.forward(x), x)

    def test_shape_mismatch_rejected(self):
        model = build_model([LayerSpec("dense", units=2)], (4,), seed=0)
        with pytest.raises(NnError):
            model.forward(np.zeros((3, 5)))

    def test_batchnorm_inference_independent_of_batch_composition(self):
        model = build_model(
            [LayerSpec("dense", units=6), LayerSpec("batchnorm"),
             LayerSpec("activation", activation="leaky_relu"), LayerSpec("dense", units=2)],
            (5,),
            seed=1,
        )
        rng = np.random.default_rng(5)
        train(model, rng.normal(size=(64, 5)), rng.normal(size=(64, 2)),
              TrainConfig(loss="mse", learning_rate=1e-3, max_epochs=3, seed=0))
        x = rng.normal(size=(8, 5))
        alone = model.forward(x[:1])
        batched = model.forward(x)[:1]
        assert np.allclose(alone, batched, atol=0)


class TestOptimizers:
    def test_adam_single_step_matches_hand_computation(self):
        # One Adam step on loss f(w) = w^2 from w = 1: g = 2.
        p = Param(np.array([1.0]))
        p.grad[...] = 2.0
        opt = Adam(lr=0.1)
        opt.step([p])
        g = 2.0
        m = 0.1 * g
        v = 0.001 * g * g
        mhat = m / 0.1
        vhat = v / 0.001
        expected = 1.0 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert p.value[0] == pytest.approx(expected, abs=1e-15)

    def test_adam_two_steps_match_scalar_oracle(self):
        p = Param(np.array([0.5]))
        opt = Adam(lr=0.05)
        w, m, v = 0.5, 0.0, 0.0
        for t in (1, 2):
            g = 2 * w  # d(w^2)/dw
            p.grad[...] = 2 * p.value
            opt.step([p])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            w = w - 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
            assert p.value[0] == pytest.approx(w, abs=1e-14)

    def test_rmsprop_single_step_matches_hand_computation(self):
        p = Param(np.array([1.0]))
        p.grad[...] = 2.0
        opt = RMSProp(lr=0.1)
        opt.step([p])
        acc = 0.1 * 4.0
        expected = 1.0 - 0.1 * 2.0 / (np.sqrt(acc) + 1e-8)
        assert p.value[0] == pytest.approx(expected, abs=1e-15)

    def test_learning_rate_must_be_positive(self):
        with pytest.raises(NnError):
            Adam(lr=0.0)
        with pytest.raises(NnError):
            RMSProp(lr=-1.0)


class TestTraining:
    def test_constant_target_regression_converges(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 4))
        y = np.full((200, 1), 0.7)
        model = build_model(
            [LayerSpec("dense", units=8), LayerSpec("activation", activation="leaky_relu"),
             LayerSpec("dense", units=1), LayerSpec("activation", activation="linear")],
            (4,),
            seed=0,
        )
        hist = train(model, x, y, TrainConfig(
            optimizer="adam", learning_rate=5e-2, loss="mse", max_epochs=200, seed=0))
        assert hist.best_val_loss < 1e-4
        assert hist.stopped_epoch < 200

    def test_two_gaussian_classification(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.normal(-1, 1, (300, 4)), rng.normal(1, 1, (300, 4))])
        y = np.concatenate([np.zeros((300, 1)), np.ones((300, 1))])
        perm = substream(9, "mix").permutation(600)
        x, y = x[perm], y[perm]
        model = build_model(
            [LayerSpec("dense", units=16), LayerSpec("activation", activation="relu"),
             LayerSpec("dense", units=1), LayerSpec("activation", activation="sigmoid")],
            (4,),
            seed=1,
        )
        train(model, x, y, TrainConfig(
            optimizer="rmsprop", learning_rate=1e-3, loss="bce", max_epochs=100, seed=1))
        pred = (model.predict(x[-180:]) >= 0.5).astype(float)
        assert (pred == y[-180:]).mean() > 0.95

    def test_same_seed_identical_parameters(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(64, 12, 2))
        y = rng.normal(size=(64, 3))
        cfg = TrainConfig(loss="mse", learning_rate=1e-3, max_epochs=5, batch_size=16, seed=7)
        models = []
        for _ in range(2):
            m = build_model(STACK + HEADS["mse"], (12, 2), seed=5)
            train(m, x, y, cfg)
            models.append(m)
        for a, b in zip(models[0].state_arrays(), models[1].state_arrays()):
            assert np.array_equal(a, b)

    def test_restores_best_epoch_parameters(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(100, 3))
        y = rng.normal(size=(100, 1))
        model = build_model([LayerSpec("dense", units=1)], (3,), seed=2)
        hist = train(model, x, y, TrainConfig(
            loss="mse", learning_rate=0.5, max_epochs=60, patience=5, seed=3))
        final_val = np.mean((model.predict(x[-30:]) - y[-30:]) ** 2)
        assert final_val == pytest.approx(hist.best_val_loss, rel=1e-9)

    def test_empty_and_tiny_datasets_rejected(self):
        model = build_model([LayerSpec("dense", units=1)], (3,), seed=0)
        with pytest.raises(TrainingError):
            train(model, np.zeros((0, 3)), np.zeros((0, 1)),
                  TrainConfig(loss="mse", learning_rate=1e-3))
        with pytest.raises(TrainingError):
            train(model, np.zeros((8, 3)), np.zeros((8, 1)),
                  TrainConfig(loss="mse", learning_rate=1e-3, batch_size=32))

    def test_chronological_validation_split(self):
        # Validation must be the trailing ~30%: plant a distribution shift
        # there and verify the reported val loss reflects the tail segment.
        x = np.zeros((100, 2))
        y = np.concatenate([np.zeros((70, 1)), np.ones((30, 1))])
        model = build_model([LayerSpec("dense", units=1)], (2,), seed=0)
        model.layers[0].w.value[...] = 0.0
        model.layers[0].b.value[...] = 0.0
        hist = train(model, x, y, TrainConfig(
            loss="mse", learning_rate=1e-9, max_epochs=1, val_fraction=0.30, seed=0))
        # predictions are ~0 everywhere; val loss == 1 only if val is the tail
        assert hist.val_loss[0] == pytest.approx(1.0, abs=1e-3)


class TestSerialization:
    def test_round_trip_preserves_predictions_and_metadata(self, tmp_path):
        model = build_model(STACK + HEADS["mse"], (12, 2), seed=6)
        rng = np.random.default_rng(0)
        train(model, rng.normal(size=(64, 12, 2)), rng.normal(size=(64, 3)),
              TrainConfig(loss="mse", learning_rate=1e-3, max_epochs=3, seed=1))
        path = tmp_path / "model.bin"
        save_model(path, model, {"l_f": 24, "channel": "CAN_H", "threshold": 0.5})
        loaded, meta = load_model(path)
        assert meta == {"l_f": 24, "channel": "CAN_H", "threshold": 0.5}
        x = rng.normal(size=(5, 12, 2))
        assert np.array_equal(model.predict(x), loaded.predict(x))

    def test_second_save_is_byte_identical(self, tmp_path):
        model = build_model(HEADS["bce"], (6,), seed=1)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(p1, model, {"k": 1})
        save_model(p2, model, {"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        from canloc.nn import ModelFormatError

        with pytest.raises(ModelFormatError):
            load_model(path)


class TestFastInference:
    def test_matches_float64_forward(self):
        model = build_model(
            [LayerSpec("conv1d", filters=8, kernel_size=3),
             LayerSpec("activation", activation="relu"),
             LayerSpec("maxpool1d", pool_size=2),
             LayerSpec("batchnorm"),
             LayerSpec("dropout", rate=0.5),
             LayerSpec("dense", units=5),
             LayerSpec("activation", activation="softmax")],
            (16, 1),
            seed=9,
        )
        rng = np.random.default_rng(1)
        train(model, rng.random((60, 16, 1)), rng.integers(0, 5, 60),
              TrainConfig(loss="cce", learning_rate=1e-3, max_epochs=3, seed=2, batch_size=16))
        fast = FastInference(model)
        x = rng.random((10, 16))
        ref = model.predict(x[:, :, None])
        got = np.stack([fast(v) for v in x])
        assert np.allclose(ref, got, atol=5e-6)
