import numpy as np
import pytest

import pamkit.autodiff as ad
from pamkit.autodiff import Tensor
from pamkit.models import (ModelParams, detector_forward, detector_init, detector_probs,
                           load_model, save_model, segmenter_forward, segmenter_init,
                           segmenter_probs)
from pamkit.training import (LinearSvm, TrainConfig, crop_batch, standardize_apply,
                             standardize_fit, svm_predict, svm_score, svm_train,
                             train_classifier, train_segmenter)
from pamkit.dsp import crop_at

from conftest import toy_band_energy_task


class TestDetectorForward:
    def test_probabilities_sum_to_one(self, rng):
        model = detector_init(0)
        x = rng.standard_normal((5, 64, 47)).astype(np.float32)
        logits = detector_forward(model, Tensor(x))
        probs = ad.softmax_np(logits.data)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_input_zero_head_gives_uniform(self):
        model = detector_init(3)
        probs = detector_probs(model, np.zeros((4, 64, 47), dtype=np.float32))
        np.testing.assert_allclose(probs, 0.5, atol=1e-7)

    def test_forward_matches_straightline_recomputation(self, rng):
        # independent second implementation: explicit shifted windows + einsum
        model = detector_init(1, dtype=np.float64)
        head_rng = np.random.default_rng(8)
        model.params["head.w"].data = head_rng.standard_normal((49, 2))
        x = rng.standard_normal((2, 64, 47))

        def conv_ref(h, w, b):
            n, hh, ww, cin = h.shape
            hp = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
            win = np.stack([hp[:, dy:dy + hh, dx:dx + ww, :]
                            for dy in range(3) for dx in range(3)])
            return np.einsum("jnhwc,jcd->nhwd", win, w.reshape(9, cin, -1)) + b

        h = x[..., None]
        p = {k: v.data for k, v in model.params.items()}
        for blk in range(2):
            for j in range(3):
                y = np.maximum(conv_ref(h, p[f"block{blk}.conv{j}.w"],
                                        p[f"block{blk}.conv{j}.b"]), 0.0)
                h = np.concatenate([h, y], axis=-1)
            if blk == 0:
                n, hh, ww, c = h.shape
                h = h[:, :hh // 2 * 2, :ww // 2 * 2].reshape(
                    n, hh // 2, 2, ww // 2, 2, c).mean(axis=(2, 4))
        feats = h.mean(axis=(1, 2))
        expected = np.exp(feats @ p["head.w"] + p["head.b"])
        expected /= expected.sum(axis=1, keepdims=True)

        got = ad.softmax_np(detector_forward(model, Tensor(x)).data)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        model = detector_init(0)
        with pytest.raises(ValueError):
            detector_forward(model, Tensor(np.zeros((64, 47))))


class TestSegmenterForward:
    def test_output_shape_and_normalization(self, rng):
        model = segmenter_init(0)
        x = rng.standard_normal((3, 64, 47)).astype(np.float32)
        logits = segmenter_forward(model, Tensor(x))
        assert logits.data.shape == (3, 64, 2)
        probs = ad.softmax_np(logits.data)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_frequency_front_end_is_per_frame(self, rng):
        # 25 filters applied frame-wise: permuting frames permutes features
        model = segmenter_init(1)
        x = rng.standard_normal((1, 64, 47)).astype(np.float32)
        w, b = model.params["freq.w"].data, model.params["freq.b"].data
        feats = np.maximum(x @ w + b, 0.0)
        assert feats.shape == (1, 64, 25)
        perm = np.random.default_rng(0).permutation(64)
        feats_perm = np.maximum(x[:, perm] @ w + b, 0.0)
        np.testing.assert_allclose(feats[:, perm], feats_perm, rtol=1e-6)

    def test_causality_of_temporal_stage(self, rng):
        model = segmenter_init(2)
        model.params["head.w"].data = np.random.default_rng(6).standard_normal(
            model.params["head.w"].data.shape).astype(np.float32)
        x = rng.standard_normal((1, 64, 47)).astype(np.float32)
        base = segmenter_forward(model, Tensor(x)).data
        x2 = x.copy()
        x2[0, 40:] += 5.0
        changed = segmenter_forward(model, Tensor(x2)).data
        np.testing.assert_array_equal(base[0, :40], changed[0, :40])
        assert np.abs(base[0, 40:] - changed[0, 40:]).max() > 0

    def test_ablation_has_no_frequency_conv(self):
        model = segmenter_init(0, freq_conv=False)
        assert "freq.w" not in model.params
        assert model.arch == "segmenter_noconv"
        from pamkit.models import SEG_KERNEL, SEG_WIDTH
        assert model.params["tconv0.w"].data.shape == (SEG_KERNEL, 47, SEG_WIDTH)


class TestTrainClassifier:
    def test_linearly_separable_toy_reaches_full_accuracy(self):
        specs, labels = toy_band_energy_task(128, seed=2)
        model, hist = train_classifier(specs, labels, TrainConfig(epochs=8, seed=3))
        assert hist["train_acc"][-1] == 1.0

    def test_history_is_deterministic_and_epoch_long(self):
        specs, labels = toy_band_energy_task(64, seed=5)
        cfg = TrainConfig(epochs=3, seed=7)
        m1, h1 = train_classifier(specs, labels, cfg)
        m2, h2 = train_classifier(specs, labels, cfg)
        assert h1 == h2
        assert all(len(h1[k]) == 3 for k in h1)
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            train_classifier(np.zeros((0, 64, 47), dtype=np.float32),
                             np.zeros(0, dtype=np.int64), TrainConfig(epochs=1))

    def test_plateau_scheduler_decays_after_patience(self):
        from pamkit.training import PlateauScheduler
        cfg = TrainConfig(plateau_patience=3, plateau_min_delta=1e-3)
        sched = PlateauScheduler(cfg)
        assert sched.update(0.60) == 0.1      # improvement: baseline
        assert sched.update(0.50) == 0.1      # improvement
        assert sched.update(0.4999) == 0.1    # below min_delta: stale 1
        assert sched.update(0.4999) == 0.1    # stale 2
        assert sched.update(0.55) == pytest.approx(0.01)   # stale 3: decay
        assert sched.update(0.10) == pytest.approx(0.01)   # fresh best,  no decay


class TestCropBatch:
    def test_matches_single_crop_semantics(self, rng):
        specs = rng.standard_normal((5, 64, 47)).astype(np.float32)
        offsets = np.array([0, 4, 8, 12, 16])
        out = crop_batch(specs, offsets)
        for i, off in enumerate(offsets):
            np.testing.assert_array_equal(out[i], crop_at(specs[i], off))

    def test_center_offset_identity(self, rng):
        specs = rng.standard_normal((3, 64, 47)).astype(np.float32)
        out = crop_batch(specs, np.full(3, 8))
        np.testing.assert_array_equal(out, specs)


class TestTrainSegmenter:
    def test_shapes_and_determinism(self):
        rng = np.random.default_rng(0)
        specs = rng.standard_normal((32, 64, 47)).astype(np.float32) * 0.1
        frame_labels = (rng.uniform(size=(32, 64)) < 0.2).astype(np.int64)
        specs[frame_labels == 1] += 1.0
        cfg = TrainConfig(epochs=2, seed=4)
        m1, h1 = train_segmenter(specs, frame_labels, cfg)
        m2, h2 = train_segmenter(specs, frame_labels, cfg)
        assert h1 == h2
        probs = segmenter_probs(m1, specs[:4])
        assert probs.shape == (4, 64)
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)

    def test_learns_frame_energy_rule(self):
        rng = np.random.default_rng(1)
        specs = (rng.standard_normal((96, 64, 47)) * 0.1).astype(np.float32)
        frame_labels = (rng.uniform(size=(96, 64)) < 0.3).astype(np.int64)
        specs[frame_labels == 1] += 1.5
        model, hist = train_segmenter(specs, frame_labels, TrainConfig(epochs=10, seed=2))
        assert hist["train_acc"][-1] > 0.97


class TestCheckpoint:
    def test_roundtrip_preserves_params_and_arch(self, tmp_path, rng):
        model = detector_init(5)
        path = tmp_path / "m.pamm"
        save_model(path, model)
        back = load_model(path)
        assert back.arch == "detector"
        assert list(back.params) == list(model.params)
        for k in model.params:
            np.testing.assert_array_equal(back.params[k].data, model.params[k].data)
        x = rng.standard_normal((3, 64, 47)).astype(np.float32)
        np.testing.assert_allclose(detector_probs(back, x), detector_probs(model, x),
                                   atol=1e-7)

    def test_magic_and_version_checked(self, tmp_path):
        path = tmp_path / "bad.pamm"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_model(path)

    def test_segmenter_roundtrip(self, tmp_path):
        model = segmenter_init(1, freq_conv=False)
        path = tmp_path / "s.pamm"
        save_model(path, model)
        assert load_model(path).arch == "segmenter_noconv"


class TestSvm:
    def _separable(self, rng, n=80):
        x = rng.standard_normal((n, 2))
        y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.int64)
        x[y == 1] += [1.0, 0.5]
        x[y == 0] -= [1.0, 0.5]
        return x, y

    def test_separable_data_reaches_full_train_accuracy(self, rng):
        x, y = self._separable(rng)
        model = svm_train(x, y)
        assert (svm_predict(model, x) == y).mean() == 1.0

    def test_weight_norm_shrinks_with_regularization(self, rng):
        x, y = self._separable(rng)
        norms = [np.linalg.norm(svm_train(x, y, reg=r).w)
                 for r in (1e-4, 1e-2, 1.0, 10.0)]
        assert all(a >= b for a, b in zip(norms, norms[1:]))

    def test_zero_features_predict_sign_of_bias(self, rng):
        x, y = self._separable(rng)
        model = svm_train(x, y)
        score = svm_score(model, np.zeros((1, 2)))
        assert score[0] == pytest.approx(model.b)

    def test_standardize_roundtrip(self, rng):
        feats = rng.uniform(-3, 5, size=(50, 39))
        mean, std = standardize_fit(feats)
        z = standardize_apply(feats, mean, std)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
