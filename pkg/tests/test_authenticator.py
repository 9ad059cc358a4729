"""Binary classifiers, the 0.5 rule, identification, cost-sensitive weights."""
import numpy as np
import pytest

from canloc.authenticator import (
    ACCEPT_THRESHOLD,
    AuthBank,
    AuthError,
    BinaryCnnModel,
    UNKNOWN,
    authenticate,
    binary_cnn_specs,
    identify,
    inverse_frequency_weights,
    load_auth_model,
    save_auth_model,
    train_auth,
)
from canloc.features import ChannelMode, FeatureVector
from canloc.nn import LayerSpec, TrainConfig, build_model
from canloc.rng import substream

L_F = 32


def stub_model(ecu_id: str, logit: float) -> BinaryCnnModel:
    """Binary CNN whose output is sigmoid(logit) for every input."""
    net = build_model(binary_cnn_specs(), (L_F, 1), seed=0)
    for layer in net.layers:
        for p in layer.params():
            p.value[...] = 0.0
    net.layers[-2].b.value[...] = logit  # final dense bias
    return BinaryCnnModel(ecu_id=ecu_id, cnn=net)


def bank_with_scores(scores: dict[str, float]) -> AuthBank:
    logits = {e: np.log(s / (1 - s)) if 0 < s < 1 else (40.0 if s >= 1 else -40.0)
              for e, s in scores.items()}
    models = {e: stub_model(e, logits[e]) for e in scores}
    id_table = {0x100 + i: e for i, e in enumerate(scores)}
    return AuthBank(models, id_table)


def sig(claim=0x100):
    return FeatureVector(values=np.random.default_rng(0).random(L_F), ecu_claim=claim)


class TestArchitecture:
    def test_binary_cnn_layer_stack(self):
        specs = binary_cnn_specs()
        kinds = [s.kind for s in specs]
        assert kinds.count("conv1d") == 2
        assert all(s.filters == 32 for s in specs if s.kind == "conv1d")
        assert kinds.count("maxpool1d") == 1
        dense_units = [s.units for s in specs if s.kind == "dense"]
        assert dense_units == [100, 1]
        dropout_rates = [s.rate for s in specs if s.kind == "dropout"]
        assert dropout_rates == [0.5, 0.5]
        assert specs[-1].activation == "sigmoid"

    def test_scores_bounded_for_arbitrary_inputs(self):
        model = BinaryCnnModel("L1", build_model(binary_cnn_specs(), (L_F, 1), seed=3))
        rng = np.random.default_rng(1)
        for scale in (1.0, 1e3, 1e6):
            s = model.score(rng.normal(0, scale, L_F))
            assert 0.0 <= s <= 1.0


class TestAcceptRule:
    def test_score_exactly_half_is_accepted(self):
        bank = bank_with_scores({"L1": 0.5})
        v = authenticate(sig(), 0x100, bank)
        assert v.score == pytest.approx(0.5, abs=1e-7)
        assert v.accepted is True
        assert v.identified_origin is None

    def test_score_below_half_rejected_and_identified(self):
        bank = bank_with_scores({"L1": 0.49, "L2": 0.9})
        v = authenticate(sig(), 0x100, bank)
        assert v.accepted is False
        assert v.identified_origin == "L2"

    def test_unknown_can_id_rejected(self):
        bank = bank_with_scores({"L1": 0.9})
        with pytest.raises(AuthError):
            authenticate(sig(), 0x7FF, bank)

    def test_inference_deterministic(self):
        bank = bank_with_scores({"L1": 0.7})
        a = authenticate(sig(), 0x100, bank)
        b = authenticate(sig(), 0x100, bank)
        assert a.score == b.score and a.accepted == b.accepted


class TestIdentify:
    def test_argmax_winner(self):
        bank = bank_with_scores({"L1": 0.9, "L2": 0.1, "L3": 0.2, "L4": 0.1, "L5": 0.3})
        result = identify(sig(), bank)
        assert result.label == "L1"
        assert result.low_confidence is False

    def test_all_low_on_compromised_bus_is_unknown(self):
        bank = bank_with_scores({"L1": 0.2, "L2": 0.3, "L3": 0.1})
        result = identify(sig(), bank, bus_compromised=True)
        assert result.label == UNKNOWN
        assert result.low_confidence is True

    def test_all_low_on_clean_bus_returns_flagged_argmax(self):
        bank = bank_with_scores({"L1": 0.2, "L2": 0.3, "L3": 0.1})
        result = identify(sig(), bank, bus_compromised=False)
        assert result.label == "L2"
        assert result.low_confidence is True

    def test_tie_breaks_to_lowest_index(self):
        bank = bank_with_scores({"L1": 0.8, "L2": 0.8, "L3": 0.1})
        assert identify(sig(), bank).label == "L1"

    def test_empty_bank_rejected(self):
        bank = bank_with_scores({"L1": 0.5})
        bank.models = {}
        with pytest.raises(AuthError):
            identify(sig(), bank)


class TestClassWeights:
    def test_inverse_frequency_rule(self):
        y = np.array([1, 1, 0, 0, 0, 0, 0, 0])
        w0, w1 = inverse_frequency_weights(y)
        assert w0 == pytest.approx(8 / (2 * 6))
        assert w1 == pytest.approx(8 / (2 * 2))

    def test_single_class_rejected(self):
        with pytest.raises(AuthError):
            inverse_frequency_weights(np.ones(10))

    def test_cost_sensitive_improves_minority_recall(self):
        # 1:4 imbalanced toy set; weighted training's minority recall must
        # be at least the unweighted run's.
        rng = np.random.default_rng(6)
        n1, n0 = 40, 160
        x1 = rng.normal(+0.6, 1.0, size=(n1, L_F))
        x0 = rng.normal(-0.6, 1.0, size=(n0, L_F))
        x = np.concatenate([x0, x1])
        y = np.concatenate([np.zeros(n0), np.ones(n1)])
        perm = substream(3, "mix").permutation(len(y))
        x, y = np.clip((x[perm] + 4) / 8, 0, 1), y[perm]

        def minority_recall(loss, weights):
            cfg = TrainConfig(
                optimizer="rmsprop", learning_rate=1e-4, loss=loss,
                class_weights=weights, max_epochs=25, patience=25, batch_size=32,
            )
            model = train_auth("E", x, y, cfg=cfg, seed=4)
            scores = model.cnn.predict(x[:, :, None]).ravel()
            pos = y == 1
            return np.mean(scores[pos] >= 0.5)

        weighted = minority_recall("weighted_bce", None)
        unweighted = minority_recall("bce", None)
        assert weighted >= unweighted


class TestTrainAuth:
    def test_class_absent_rejected(self):
        x = np.random.default_rng(0).random((40, L_F))
        with pytest.raises(AuthError):
            train_auth("L1", x, np.ones(40))

    def test_unit_weights_match_plain_bce_training(self):
        rng = np.random.default_rng(2)
        x = rng.random((64, L_F))
        y = (rng.random(64) > 0.5).astype(float)
        base = TrainConfig(optimizer="rmsprop", learning_rate=1e-4, loss="bce",
                           max_epochs=4, batch_size=16)
        weighted = TrainConfig(optimizer="rmsprop", learning_rate=1e-4,
                               loss="weighted_bce", class_weights=(1.0, 1.0),
                               max_epochs=4, batch_size=16)
        a = train_auth("L1", x, y, cfg=base, seed=9)
        b = train_auth("L1", x, y, cfg=weighted, seed=9)
        for pa, pb in zip(a.cnn.state_arrays(), b.cnn.state_arrays()):
            assert np.array_equal(pa, pb)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.random((48, L_F))
        y = (rng.random(48) > 0.5).astype(float)
        cfg = TrainConfig(optimizer="rmsprop", learning_rate=1e-4,
                          loss="weighted_bce", max_epochs=3, batch_size=16)
        model = train_auth("L3", x, y, cfg=cfg, seed=1)
        path = tmp_path / "auth_L3.model"
        save_auth_model(path, model)
        loaded = load_auth_model(path)
        assert loaded.ecu_id == "L3"
        assert loaded.channel == ChannelMode.DIFFERENTIAL
        probe = rng.random(L_F)
        assert loaded.score(probe) == pytest.approx(model.score(probe), abs=1e-7)
