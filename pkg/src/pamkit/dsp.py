"""Waveform -> feature transforms: magnitude spectrograms and pooled MFCCs.

The pipeline's working representation is a 64 x 47 magnitude spectrogram:
512-sample Hann windows, hop 384, at 1000 Hz, keeping the FFT bins whose
center frequency lies in [8, 100) Hz. Normalization subtracts the mean of
call-free frames per band and divides by the median call intensity of the
training split.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

SPEC_MAGIC = b"SPEC"


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 1000
    window: int = 512
    hop: int = 384
    band_lo_hz: float = 8.0
    band_hi_hz: float = 100.0

    def __post_init__(self):
        if self.hop > self.window:
            raise ValueError(f"hop {self.hop} exceeds window {self.window}")
        if self.band_hi_hz > self.sample_rate / 2:
            raise ValueError("band_hi_hz above Nyquist")

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.window

    def band_bins(self) -> np.ndarray:
        """FFT bin indices whose center frequency is in [band_lo, band_hi)."""
        freqs = np.arange(self.window // 2 + 1) * self.bin_hz
        return np.nonzero((freqs >= self.band_lo_hz) & (freqs < self.band_hi_hz))[0]

    def band_freqs(self) -> np.ndarray:
        return self.band_bins() * self.bin_hz

    def n_bands(self) -> int:
        return len(self.band_bins())

    def frame_count(self, n_samples: int) -> int:
        return (n_samples - self.window) // self.hop + 1

    def samples_for_frames(self, frames: int) -> int:
        return (frames - 1) * self.hop + self.window


@dataclass
class Spectrogram:
    data: np.ndarray            # (t, f) magnitudes, or normalized values
    frame_times_s: np.ndarray   # (t,) frame start times
    band_freqs_hz: np.ndarray   # (f,) band center frequencies

    @property
    def shape(self):
        return self.data.shape


@dataclass
class NormStats:
    noise_mean: np.ndarray       # per-band mean magnitude over negative frames
    median_call_intensity: float

    def __post_init__(self):
        if self.median_call_intensity <= 0:
            raise ValueError("median_call_intensity must be > 0")


def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(w: np.ndarray, cfg: StftConfig) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("waveform must be 1-D")
    if len(w) < cfg.window:
        raise ValueError(f"waveform of {len(w)} samples shorter than one window ({cfg.window})")
    t = cfg.frame_count(len(w))
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(t)[:, None]
    return w[idx]


def full_spectrum(w: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Magnitudes of all rfft bins of Hann-windowed frames, shape (t, window//2 + 1)."""
    frames = _frames(w, cfg) * _hann(cfg.window)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def stft(w: np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Band-limited magnitude spectrogram; frame count floor((len - window)/hop) + 1."""
    mags = full_spectrum(w, cfg)
    bins = cfg.band_bins()
    t = mags.shape[0]
    return Spectrogram(
        data=mags[:, bins],
        frame_times_s=np.arange(t) * cfg.hop / cfg.sample_rate,
        band_freqs_hz=bins * cfg.bin_hz,
    )


def compute_norm_stats(spectrograms: np.ndarray, frame_labels: np.ndarray) -> NormStats:
    """Per-band noise mean and median call intensity from a training split.

    spectrograms: (n, t, f) raw magnitudes; frame_labels: (n, t) booleans.
    noise_mean averages all negative frames per band; median_call_intensity is
    the median over positive frames of the frame's mean magnitude.
    """
    specs = np.asarray(spectrograms, dtype=np.float64)
    labels = np.asarray(frame_labels, dtype=bool)
    if specs.shape[:2] != labels.shape:
        raise ValueError("spectrogram/label shape mismatch")
    flat = specs.reshape(-1, specs.shape[2])
    lab = labels.reshape(-1)
    if not (~lab).any():
        raise ValueError("no negative frames in training split")
    if not lab.any():
        raise ValueError("no positive frames: cannot compute median call intensity")
    noise_mean = flat[~lab].mean(axis=0)
    median_call = float(np.median(flat[lab].mean(axis=1)))
    if median_call <= 0:
        raise ValueError("median call intensity is not positive")
    return NormStats(noise_mean=noise_mean, median_call_intensity=median_call)


def normalize(s: Spectrogram, stats: NormStats) -> Spectrogram:
    """(x - noise_mean) / median_call_intensity, per band; output may be negative."""
    out = (s.data - stats.noise_mean[None, :]) / stats.median_call_intensity
    return Spectrogram(out, s.frame_times_s.copy(), s.band_freqs_hz.copy())


def crop_offsets(frames: int, pad: int) -> int:
    """Number of valid crop positions after padding both sides."""
    return 2 * pad + 1


def random_crop(s: Spectrogram, pad: int = 8, seed: int = 0, frames: int = 64) -> Spectrogram:
    """Zero-pad the time axis by `pad` on both sides, take a random window of
    the original length. Offset pad reproduces the input exactly."""
    if s.data.shape[0] != frames:
        raise ValueError(f"expected {frames} frames, got {s.data.shape[0]}")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, crop_offsets(frames, pad)))
    return Spectrogram(
        crop_at(s.data, offset, pad),
        s.frame_times_s.copy(),
        s.band_freqs_hz.copy(),
    )


def crop_at(data: np.ndarray, offset: int, pad: int = 8) -> np.ndarray:
    """Deterministic crop at a given offset in [0, 2*pad]."""
    t = data.shape[0]
    if not 0 <= offset <= 2 * pad:
        raise ValueError(f"offset {offset} outside [0, {2 * pad}]")
    padded = np.pad(data, ((pad, pad), (0, 0)))
    return padded[offset:offset + t]


# ---------------------------------------------------------------------------
# MFCC feature baseline
# ---------------------------------------------------------------------------

MFCC_N_FILTERS = 20
MFCC_FMAX_HZ = 500.0
MFCC_N_COEFFS = 13
_LOG_FLOOR = 1e-12


def triangular_filterbank(n_bins: int, bin_hz: float, n_filters: int = MFCC_N_FILTERS,
                          fmax: float = MFCC_FMAX_HZ) -> np.ndarray:
    """Triangular filters linearly spaced on [0, fmax]; rows are filters.

    Mel warping is nearly linear this far below 1 kHz, so linear spacing
    stands in for the mel scale.
    """
    edges = np.linspace(0.0, fmax, n_filters + 2)
    freqs = np.arange(n_bins) * bin_hz
    fb = np.zeros((n_filters, n_bins))
    for m in range(n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs >= lo) & (freqs <= mid)
        falling = (freqs > mid) & (freqs <= hi)
        fb[m, rising] = (freqs[rising] - lo) / (mid - lo)
        fb[m, falling] = (hi - freqs[falling]) / (hi - mid)
    return fb


def dct_matrix(n_coeffs: int, n_inputs: int) -> np.ndarray:
    """Orthonormal DCT-II, rows are coefficients."""
    m = np.arange(n_inputs)
    k = np.arange(n_coeffs)[:, None]
    mat = np.cos(np.pi * k * (2 * m + 1) / (2 * n_inputs)) * np.sqrt(2.0 / n_inputs)
    mat[0] /= np.sqrt(2.0)
    return mat


def mfcc_frame_coeffs(w: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Per-frame cepstral coefficients, shape (t, 13)."""
    power = full_spectrum(w, cfg) ** 2
    fb = triangular_filterbank(power.shape[1], cfg.bin_hz)
    energies = power @ fb.T
    logs = np.log(energies + _LOG_FLOOR)
    return logs @ dct_matrix(MFCC_N_COEFFS, MFCC_N_FILTERS).T


def mfcc_features(w: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Clip-level 39-dim feature: per-coefficient mean, variance, and mean
    first temporal difference of the per-frame coefficients."""
    coeffs = mfcc_frame_coeffs(w, cfg)
    if coeffs.shape[0] < 2:
        raise ValueError("need at least 2 frames for the temporal difference")
    mean = coeffs.mean(axis=0)
    var = coeffs.var(axis=0)
    deriv = np.diff(coeffs, axis=0).mean(axis=0)
    return np.concatenate([mean, var, deriv])


# ---------------------------------------------------------------------------
# Spectrogram file format
# ---------------------------------------------------------------------------

def save_spectrogram(path, data: np.ndarray) -> None:
    """16-byte header (magic 'SPEC', t, f, reserved; little-endian u32) then
    row-major little-endian float32."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("spectrogram data must be 2-D")
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<III", arr.shape[0], arr.shape[1], 0))
        fh.write(arr.tobytes())


def load_spectrogram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SPEC_MAGIC:
        raise ValueError(f"bad spectrogram magic {blob[:4]!r}")
    t, f, _ = struct.unpack("<III", blob[4:16])
    body = np.frombuffer(blob[16:], dtype="<f4")
    if body.size != t * f:
        raise ValueError(f"payload holds {body.size} values, header says {t * f}")
    return body.reshape(t, f).astype(np.float32)
