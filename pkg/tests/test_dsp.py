import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pamkit.dsp import (MFCC_N_COEFFS, MFCC_N_FILTERS, NormStats, StftConfig, Spectrogram,
                        compute_norm_stats, crop_at, dct_matrix, full_spectrum,
                        load_spectrogram, mfcc_features, mfcc_frame_coeffs, normalize,
                        random_crop, save_spectrogram, stft, triangular_filterbank)

CFG = StftConfig()


def clip_samples(frames=64):
    return CFG.samples_for_frames(frames)


class TestStft:
    def test_default_geometry_is_64_by_47(self):
        w = np.random.default_rng(0).standard_normal(clip_samples())
        assert stft(w, CFG).data.shape == (64, 47)

    def test_band_selection_rule_yields_47_bins(self):
        bins = CFG.band_bins()
        assert len(bins) == 47
        assert bins[0] == 5 and bins[-1] == 51
        freqs = CFG.band_freqs()
        assert freqs[0] >= 8.0 and freqs[-1] < 100.0

    def test_zero_waveform_gives_zero_spectrogram(self):
        s = stft(np.zeros(clip_samples()), CFG)
        assert np.all(s.data == 0.0)

    def test_sinusoid_peaks_in_its_bin_every_frame(self):
        # closed form: 50 Hz -> bin round(50 / (1000/512)) = 26 -> band index 21
        t = np.arange(clip_samples()) / CFG.sample_rate
        s = stft(np.sin(2 * np.pi * 50.0 * t), CFG)
        assert np.all(np.argmax(s.data, axis=1) == 26 - 5)

    def test_too_short_waveform_rejected(self):
        with pytest.raises(ValueError):
            stft(np.zeros(CFG.window - 1), CFG)

    def test_frame_count_formula(self):
        w = np.zeros(CFG.window + 5 * CFG.hop + 3)
        assert stft(w, CFG).data.shape[0] == 6

    def test_parseval_per_frame_before_band_selection(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(clip_samples())
        mags = full_spectrum(w, CFG)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(CFG.window) / CFG.window)
        for i in range(0, 64, 7):
            frame = w[i * CFG.hop:i * CFG.hop + CFG.window] * window
            e_time = np.sum(frame ** 2)
            row = mags[i]
            e_freq = (row[0] ** 2 + 2 * np.sum(row[1:-1] ** 2) + row[-1] ** 2) / CFG.window
            assert abs(e_time - e_freq) <= 1e-6 * abs(e_time)

    def test_linear_in_amplitude(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal(clip_samples())
        a = 3.7
        np.testing.assert_allclose(stft(a * w, CFG).data, a * stft(w, CFG).data,
                                   rtol=1e-10, atol=1e-12)


class TestNormStats:
    def _split(self, rng, n=6):
        specs = rng.uniform(0.0, 4.0, size=(n, 64, 47))
        labels = rng.uniform(size=(n, 64)) < 0.3
        labels[0, 0] = True
        labels[0, 1] = False
        return specs, labels

    def test_zero_negative_frames_give_zero_noise_mean(self):
        specs = np.zeros((2, 64, 47))
        labels = np.zeros((2, 64), dtype=bool)
        labels[0, :10] = True
        specs[0, :10] = 2.0
        stats = compute_norm_stats(specs, labels)
        np.testing.assert_array_equal(stats.noise_mean, np.zeros(47))

    def test_median_of_two_positive_frames(self):
        specs = np.zeros((1, 64, 47))
        labels = np.zeros((1, 64), dtype=bool)
        labels[0, :2] = True
        specs[0, 0] = 2.0
        specs[0, 1] = 4.0
        stats = compute_norm_stats(specs, labels)
        assert stats.median_call_intensity == pytest.approx(3.0)

    def test_matches_bruteforce_recomputation(self, rng):
        specs, labels = self._split(rng)
        stats = compute_norm_stats(specs, labels)
        neg_frames = [specs[i, t] for i in range(len(specs)) for t in range(64)
                      if not labels[i, t]]
        pos_means = [specs[i, t].mean() for i in range(len(specs)) for t in range(64)
                     if labels[i, t]]
        np.testing.assert_allclose(stats.noise_mean, np.mean(neg_frames, axis=0), rtol=1e-12)
        assert stats.median_call_intensity == pytest.approx(np.median(pos_means))

    def test_no_positive_frames_rejected(self):
        with pytest.raises(ValueError):
            compute_norm_stats(np.ones((1, 64, 47)), np.zeros((1, 64), dtype=bool))


class TestNormalize:
    def _spec(self, data):
        t, f = data.shape
        return Spectrogram(data, np.arange(t) * 0.384, CFG.band_freqs()[:f])

    def test_noise_mean_broadcast_gives_zero(self, rng):
        mean = rng.uniform(1, 2, size=47)
        s = self._spec(np.tile(mean, (64, 1)))
        out = normalize(s, NormStats(mean, 2.0))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_identity_stats(self, rng):
        data = rng.standard_normal((64, 47))
        out = normalize(self._spec(data), NormStats(np.zeros(47), 1.0))
        np.testing.assert_array_equal(out.data, data)

    def test_inverts_algebraically(self, rng):
        data = rng.uniform(0, 5, size=(64, 47))
        stats = NormStats(rng.uniform(0, 1, size=47), 3.3)
        out = normalize(self._spec(data), stats)
        back = out.data * stats.median_call_intensity + stats.noise_mean[None, :]
        np.testing.assert_allclose(back, data, rtol=1e-6)


class TestRandomCrop:
    def _spec(self, rng):
        return Spectrogram(rng.standard_normal((64, 47)),
                           np.arange(64) * 0.384, CFG.band_freqs())

    def test_center_offset_is_identity(self, rng):
        s = self._spec(rng)
        np.testing.assert_array_equal(crop_at(s.data, offset=8), s.data)

    def test_offset_zero_shows_padding(self, rng):
        s = self._spec(rng)
        out = crop_at(s.data, offset=0)
        assert np.all(out[:8] == 0.0)
        np.testing.assert_array_equal(out[8:], s.data[:56])

    def test_wrong_frame_count_rejected(self, rng):
        bad = Spectrogram(rng.standard_normal((63, 47)),
                          np.arange(63) * 0.384, CFG.band_freqs())
        with pytest.raises(ValueError):
            random_crop(bad, seed=0)

    def test_offsets_uniform_over_17_positions(self):
        # ramp rows make the drawn offset recoverable from the output
        data = np.tile(np.arange(1.0, 65.0)[:, None], (1, 47))
        s = Spectrogram(data, np.arange(64) * 0.384, CFG.band_freqs())
        counts = np.zeros(17, dtype=int)
        for seed in range(10000):
            out = random_crop(s, seed=seed).data[:, 0]
            leading = int(np.argmax(out > 0)) if out[0] == 0 else 0
            offset = 8 - leading if out[0] == 0 else int(out[0]) + 7
            counts[offset] += 1
        freqs = counts / 10000
        assert np.all(np.abs(freqs - 1 / 17) <= 0.01)

    def test_deterministic_given_seed(self, rng):
        s = self._spec(rng)
        np.testing.assert_array_equal(random_crop(s, seed=77).data,
                                      random_crop(s, seed=77).data)


class TestMfcc:
    def test_output_length_39(self, rng):
        w = rng.standard_normal(clip_samples())
        assert mfcc_features(w, CFG).shape == (39,)

    def test_constant_signal_zero_variance_and_derivative(self):
        # periodic in the hop -> identical frames -> zero variance/derivative
        t = np.arange(clip_samples())
        w = np.sin(2 * np.pi * t * (125.0 / 1000.0))
        feats = mfcc_features(w, CFG)
        np.testing.assert_allclose(feats[13:26], 0.0, atol=1e-12)
        np.testing.assert_allclose(feats[26:], 0.0, atol=1e-10)

    def test_mean_block_matches_independent_recomputation(self, rng):
        w = rng.standard_normal(clip_samples())
        feats = mfcc_features(w, CFG)
        # independent per-frame pipeline written out longhand
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(CFG.window) / CFG.window)
        edges = np.linspace(0.0, 500.0, MFCC_N_FILTERS + 2)
        freqs = np.arange(CFG.window // 2 + 1) * CFG.bin_hz
        per_frame = []
        for i in range(64):
            frame = w[i * CFG.hop:i * CFG.hop + CFG.window] * window
            power = np.abs(np.fft.rfft(frame)) ** 2
            energies = []
            for m in range(MFCC_N_FILTERS):
                lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
                weight = np.zeros_like(freqs)
                rising = (freqs >= lo) & (freqs <= mid)
                falling = (freqs > mid) & (freqs <= hi)
                weight[rising] = (freqs[rising] - lo) / (mid - lo)
                weight[falling] = (hi - freqs[falling]) / (hi - mid)
                energies.append(np.sum(power * weight))
            logs = np.log(np.array(energies) + 1e-12)
            coeffs = [np.sqrt(2.0 / 20) * (1 / np.sqrt(2.0) if k == 0 else 1.0)
                      * np.sum(logs * np.cos(np.pi * k * (2 * np.arange(20) + 1) / 40))
                      for k in range(MFCC_N_COEFFS)]
            per_frame.append(coeffs)
        np.testing.assert_allclose(feats[:13], np.mean(per_frame, axis=0), rtol=1e-9)

    def test_fewer_than_two_frames_rejected(self):
        with pytest.raises(ValueError):
            mfcc_features(np.zeros(CFG.window), CFG)

    def test_filterbank_rows_peak_at_one(self):
        fb = triangular_filterbank(257, CFG.bin_hz)
        assert fb.shape == (MFCC_N_FILTERS, 257)
        assert np.all(fb.max(axis=1) > 0.9)

    def test_dct_matrix_orthonormal_rows(self):
        m = dct_matrix(20, 20)
        np.testing.assert_allclose(m @ m.T, np.eye(20), atol=1e-12)


class TestSpectrogramFile:
    def test_roundtrip(self, tmp_path, rng):
        data = rng.standard_normal((64, 47)).astype(np.float32)
        path = tmp_path / "x.spec"
        save_spectrogram(path, data)
        np.testing.assert_array_equal(load_spectrogram(path), data)
        blob = path.read_bytes()
        assert blob[:4] == b"SPEC" and len(blob) == 16 + 64 * 47 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.spec"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError):
            load_spectrogram(path)


@settings(max_examples=30, deadline=None)
@given(amp=st.floats(0.1, 10.0), freq=st.floats(9.0, 95.0))
def test_stft_scale_invariance_of_argmax(amp, freq):
    t = np.arange(CFG.samples_for_frames(8)) / CFG.sample_rate
    w = np.sin(2 * np.pi * freq * t)
    a = stft(w, CFG).data
    b = stft(amp * w, CFG).data
    assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))
