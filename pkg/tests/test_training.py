import numpy as np
import pytest

from octfpn import checkpoint as C
from octfpn import training as T
from octfpn.backbone import BackboneConfig
from octfpn.data import AugmentationConfig, preprocess, synth_generate
from octfpn.fusion import FusionConfig, build_model

TINY = BackboneConfig(((1, 4), (1, 8), (1, 8)), (16, 16, 1), "tiny")
TINY_FUSION = FusionConfig(top_k=2, lateral_channels=4, head_units=8)


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_generate(8, 16, seed=0)
    images = np.stack([preprocess(im, 16) for im in ds.images]).astype(np.float32)
    return images, ds.labels()


def scripted(losses, lr=1e-4, lr_patience=1, stop_patience=10):
    s = T.Schedule(lr)
    lrs, stops = [], []
    for v in losses:
        _, stop = s.update(v, lr_patience, stop_patience)
        lrs.append(s.lr)
        stops.append(stop)
    return lrs, stops


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = T.adam_step(p, {"w": np.zeros(2)}, T.AdamState(), 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step_hand_value(self):
        p = {"w": np.array(1.0)}
        new, state = T.adam_step(p, {"w": np.array(4.0)}, T.AdamState(), 0.1)
        # t=1: m_hat = g, v_hat = g^2, step = lr * 4 / (4 + 1e-8)
        assert float(new["w"]) == pytest.approx(1.0 - 0.1 * 4 / (4 + 1e-8), abs=1e-15)
        assert state.t == 1

    def test_quadratic_descends(self):
        p = {"w": np.array([3.0])}
        state = T.AdamState()
        values = [float(p["w"][0] ** 2)]
        for _ in range(2):
            p, state = T.adam_step(p, {"w": 2 * p["w"]}, state, 0.1)
            values.append(float(p["w"][0] ** 2))
        assert values[0] > values[1] > values[2]

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            T.adam_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, T.AdamState(), 0.1)

    def test_state_round_trip(self):
        _, state = T.adam_step({"a/b": np.ones(2)}, {"a/b": np.ones(2)}, T.AdamState(), 0.1)
        back = T.AdamState.from_flat(state.flat(), state.t)
        np.testing.assert_array_equal(back.m["a/b"], state.m["a/b"])
        np.testing.assert_array_equal(back.v["a/b"], state.v["a/b"])


class TestSchedule:
    def test_improvement_keeps_lr(self):
        assert T.lr_on_plateau(1e-4, [0.40, 0.38]) == 1e-4

    def test_plateau_halves(self):
        assert T.lr_on_plateau(1e-4, [0.40, 0.40]) == 5e-5
        assert T.lr_on_plateau(1e-4, [0.40, 0.45]) == 5e-5

    def test_two_bad_epochs(self):
        lrs, _ = scripted([0.5, 0.6, 0.7])
        assert lrs == [1e-4, 5e-5, 2.5e-5]

    def test_stop_after_ten(self):
        _, stops = scripted([0.5] + [0.6] * 10)
        assert stops == [False] * 10 + [True]
        assert T.early_stop([0.5] + [0.6] * 10)
        assert not T.early_stop([0.5] + [0.6] * 9)

    def test_counter_resets(self):
        _, stops = scripted([0.5] + [0.6] * 9 + [0.4] + [0.6] * 9)
        assert not any(stops)

    def test_monotone_never_stops(self):
        losses = list(np.linspace(1.0, 0.1, 40))
        lrs, stops = scripted(losses)
        assert not any(stops) and set(lrs) == {1e-4}

    def test_lr_patience(self):
        lrs, _ = scripted([0.5, 0.6, 0.6, 0.6, 0.6], lr_patience=2)
        assert lrs == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5]

    def test_nan_counts_as_not_improving(self):
        lrs, _ = scripted([0.5, float("nan")])
        assert lrs[-1] == 5e-5


class TestTrainFold:
    def test_deterministic(self, tiny_data):
        images, labels = tiny_data
        cfg = T.TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=3, seed=1)
        idx = np.arange(len(labels))
        runs = []
        for _ in range(2):
            model = build_model(TINY, TINY_FUSION, seed=1)
            runs.append(T.train_fold(model, images, labels, idx[:16], idx[16:], cfg, [1, 1, 1], AugmentationConfig()))
        assert [r["train_loss"] for r in runs[0].log] == [r["train_loss"] for r in runs[1].log]
        assert all(np.array_equal(runs[0].params[k], runs[1].params[k]) for k in runs[0].params)

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        images, labels = tiny_data
        cfg = T.TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=4, seed=2)
        idx = np.arange(len(labels))
        model = build_model(TINY, TINY_FUSION, seed=2)
        full = T.train_fold(model, images, labels, idx[:16], idx[16:], cfg, [1, 1, 1])
        model = build_model(TINY, TINY_FUSION, seed=2)
        half = T.train_fold(model, images, labels, idx[:16], idx[16:], cfg, [1, 1, 1], max_epochs=2)
        C.save(tmp_path / "last.bin", T.result_checkpoint(model, half, 0, 2, best=False))
        resumed = T.resume_from(C.load(tmp_path / "last.bin"))
        done = T.train_fold(model, images, labels, idx[:16], idx[16:], cfg, [1, 1, 1], resume=resumed)
        assert [r["val_loss"] for r in done.log] == [r["val_loss"] for r in full.log]
        assert all(np.array_equal(done.params[k], full.params[k]) for k in full.params)
        assert all(np.array_equal(done.best_params[k], full.best_params[k]) for k in full.params)

    def test_uniform_weights_equal_unweighted(self, tiny_data):
        images, labels = tiny_data
        model = build_model(TINY, TINY_FUSION, seed=0)
        loss = T.evaluate_loss(model, model.params, images, labels, [1, 1, 1])
        probs = model.predict(images)
        assert loss == pytest.approx(-np.mean(np.log(probs[np.arange(len(labels)), labels])), rel=1e-9)

    def test_loss_decreases(self, tiny_data):
        images, labels = tiny_data
        cfg = T.TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=15, seed=0, augment=False)
        idx = np.arange(len(labels))
        model = build_model(TINY, TINY_FUSION, seed=0)
        res = T.train_fold(model, images, labels, idx, idx, cfg, [1, 1, 1])
        assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]

    def test_empty_train_set(self, tiny_data):
        images, labels = tiny_data
        model = build_model(TINY, TINY_FUSION, seed=0)
        with pytest.raises(ValueError):
            T.train_fold(model, images, labels, [], [0], T.TrainConfig(), [1, 1, 1])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(TINY, TINY_FUSION, seed=0)
        ck = C.Checkpoint(model.params, TINY.to_dict(), TINY_FUSION.to_dict(), epoch=3, best_val_loss=0.25,
                          state={"k": [1, 2]}, optimizer={"m/x": np.ones(2, np.float32)}, optimizer_step=7)
        C.save(tmp_path / "c.bin", ck)
        back = C.load(tmp_path / "c.bin")
        assert back.epoch == 3 and back.best_val_loss == 0.25 and back.optimizer_step == 7
        assert back.state == {"k": [1, 2]}
        assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)

    def test_bytes_deterministic(self):
        model = build_model(TINY, TINY_FUSION, seed=0)
        ck = C.Checkpoint(model.params, TINY.to_dict(), TINY_FUSION.to_dict())
        assert C.to_bytes(ck) == C.to_bytes(ck)
        assert C.to_bytes(ck)[:8] == b"OCTFPNCK"

    def test_corrupt(self):
        with pytest.raises(ValueError):
            C.from_bytes(b"NOTACKPT" + b"\0" * 16)

    def test_model_from_checkpoint_predicts_identically(self):
        model = build_model(TINY, TINY_FUSION, seed=5)
        back = T.model_from_checkpoint(C.from_bytes(C.to_bytes(
            C.Checkpoint(model.params, TINY.to_dict(), TINY_FUSION.to_dict()))))
        x = np.random.default_rng(0).normal(size=(3, 16, 16, 1))
        np.testing.assert_array_equal(back.predict(x), model.predict(x))


class TestTransfer:
    def _source(self, n_classes, lateral=4):
        fusion = FusionConfig(top_k=2, lateral_channels=lateral, head_units=8, n_classes=n_classes)
        model = build_model(TINY, fusion, seed=11)
        return model, C.Checkpoint(model.params, TINY.to_dict(), fusion.to_dict())

    def test_four_to_three_classes(self):
        src_model, src = self._source(4)
        model, report = T.transfer_weights(src, TINY, TINY_FUSION, seed=0)
        assert sorted(report.reinitialized) == ["classifier/output/bias", "classifier/output/kernel"]
        assert model.params["classifier/output/kernel"].shape == (8, 3)
        for name in report.copied:
            np.testing.assert_array_equal(model.params[name], src_model.params[name])
        assert len(report.copied) == len(model.params) - 2

    def test_equal_classes_bit_identical(self):
        src_model, src = self._source(3)
        model, report = T.transfer_weights(src, TINY, TINY_FUSION, seed=0)
        assert report.reinitialized == []
        x = np.random.default_rng(1).normal(size=(4, 16, 16, 1))
        np.testing.assert_array_equal(model.predict(x), src_model.predict(x))

    def test_lateral_mismatch_errors(self):
        _, src = self._source(3, lateral=6)
        with pytest.raises(ValueError, match="lateral"):
            T.transfer_weights(src, TINY, TINY_FUSION)

    def test_encoder_only(self):
        src_model, src = self._source(3, lateral=6)
        model, report = T.transfer_weights(src, TINY, TINY_FUSION, sections=("encoder",))
        assert all(n.startswith("encoder/") for n in report.copied)
        np.testing.assert_array_equal(model.params["encoder/block1/conv1/kernel"],
                                      src_model.params["encoder/block1/conv1/kernel"])
