"""Labeled synthetic soundscapes: low-frequency harmonic rumbles over
configurable background confusers (wind, engine, crocodile-like bursts, rain).

Stands in for field recordings at desk scale. Clip length is pinned to the
frame geometry: (frames - 1) * hop + window samples, so the standard clip is
exactly 64 STFT frames long. All generators are pure functions of
(spec, seed); per-clip seeds derive from the master seed via seeds.derive_seed.
"""

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .seeds import derive_seed

DATASET_MAGIC = b"PAMDS1"

BACKGROUND_KINDS = ("broadband_wind", "engine_harmonic", "croc_burst", "rain", "silence")


@dataclass(frozen=True)
class RumbleSpec:
    fundamental_hz: float
    duration_s: float
    n_harmonics: int = 3
    harmonic_rolloff: float = 1.0
    fm_depth: float = 0.03
    fm_rate_hz: float = 1.5
    amplitude: float = 1.0
    onset_s: float = 0.0

    def __post_init__(self):
        if not 8.0 <= self.fundamental_hz <= 34.0:
            raise ValueError(f"fundamental {self.fundamental_hz} Hz outside [8, 34]")
        if not 2.0 <= self.duration_s <= 8.0:
            raise ValueError(f"duration {self.duration_s} s outside [2, 8]")
        if self.n_harmonics < 1:
            raise ValueError("need at least one harmonic")
        if self.harmonic_rolloff <= 0:
            raise ValueError("harmonic_rolloff must be > 0")
        if not 0.0 <= self.fm_depth <= 0.15:
            raise ValueError(f"fm_depth {self.fm_depth} outside [0, 0.15]")
        if self.fm_rate_hz <= 0:
            raise ValueError("fm_rate_hz must be > 0")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be > 0")
        if self.onset_s < 0:
            raise ValueError("onset_s must be >= 0")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str
    level: float = 0.1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("level must be >= 0")


@dataclass
class LabeledClip:
    waveform: np.ndarray          # float32 samples, (frames-1)*hop + window long
    frame_labels: np.ndarray      # bool, one per STFT frame
    clip_label: bool
    rumbles: list = field(default_factory=list)      # RumbleSpec metadata
    background: BackgroundSpec | None = None
    snr_db: float = 0.0


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def _raised_cosine_envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = r
        env[-ramp:] = r[::-1]
    return env


def gen_rumble(spec: RumbleSpec, fs: int, seed: int) -> np.ndarray:
    """Harmonic stack with slight frequency modulation under a raised-cosine
    attack/decay envelope (10% of duration each side).

    Harmonic k tracks k * f0(t) with f0(t) = F * (1 + d*sin(2*pi*r*t)) and
    amplitude proportional to k**-rolloff; initial phases are seeded.
    """
    if fs < 1000:
        raise ValueError("sample rate must be >= 1000 Hz")
    if spec.n_harmonics * spec.fundamental_hz * (1.0 + spec.fm_depth) >= fs / 2:
        raise ValueError("harmonic stack reaches Nyquist; reduce n_harmonics or fundamental")
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration_s * fs))
    t = np.arange(n) / fs
    # integral of f0: F*t + F*d*(1 - cos(2 pi r t)) / (2 pi r)
    f0_int = spec.fundamental_hz * (
        t + spec.fm_depth * (1.0 - np.cos(2.0 * np.pi * spec.fm_rate_hz * t))
        / (2.0 * np.pi * spec.fm_rate_hz)
    )
    k = np.arange(1, spec.n_harmonics + 1)
    amps = k.astype(float) ** -spec.harmonic_rolloff
    amps *= spec.amplitude / np.sqrt(np.sum(amps ** 2) / 2.0)  # RMS ~= amplitude
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_harmonics)
    sig = np.zeros(n)
    for kk, a, ph in zip(k, amps, phases):
        sig += a * np.sin(2.0 * np.pi * kk * f0_int + ph)
    sig *= _raised_cosine_envelope(n, int(round(0.1 * n)))
    return sig


def _shaped_noise(rng, n: int, fs: int, shape) -> np.ndarray:
    """White Gaussian noise with an amplitude-spectrum reweighting."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec *= shape(freqs)
    return np.fft.irfft(spec, n=n)


def _harmonic_stack(rng, n: int, fs: int, fundamental: float, n_harmonics: int,
                    rolloff: float, wobble: float = 0.0, wobble_rate: float = 0.5) -> np.ndarray:
    t = np.arange(n) / fs
    f_int = fundamental * t
    if wobble > 0:
        f_int = fundamental * (t + wobble * (1.0 - np.cos(2.0 * np.pi * wobble_rate * t))
                               / (2.0 * np.pi * wobble_rate))
    k_max = max(1, min(n_harmonics, int((fs / 2 - 1) / fundamental)))
    sig = np.zeros(n)
    for kk in range(1, k_max + 1):
        a = kk ** -rolloff
        sig += a * np.sin(2.0 * np.pi * kk * f_int + rng.uniform(0, 2 * np.pi))
    return sig


def gen_background(spec: BackgroundSpec, n_samples: int, fs: int, seed: int) -> np.ndarray:
    """Confuser track scaled to RMS == level (silence stays all-zero)."""
    if n_samples <= 0:
        raise ValueError("n_samples must be > 0")
    rng = np.random.default_rng(seed)
    kind = spec.kind
    if kind == "silence":
        return np.zeros(n_samples)
    if kind == "broadband_wind":
        # 1/f power shaping: most energy sits in the rumble band
        f_floor = fs / n_samples
        sig = _shaped_noise(rng, n_samples, fs,
                            lambda f: 1.0 / np.sqrt(np.maximum(f, f_floor)))
    elif kind == "engine_harmonic":
        fundamental = float(spec.params.get("fundamental_hz", rng.uniform(20.0, 60.0)))
        sig = _harmonic_stack(rng, n_samples, fs, fundamental,
                              n_harmonics=int(spec.params.get("n_harmonics", 6)),
                              rolloff=float(spec.params.get("rolloff", 0.7)),
                              wobble=0.01, wobble_rate=0.4)
        sig += 0.1 * rng.standard_normal(n_samples)
    elif kind == "croc_burst":
        sig = np.zeros(n_samples)
        n_bursts = int(spec.params.get("n_bursts", rng.integers(2, 6)))
        for _ in range(n_bursts):
            dur = rng.uniform(0.2, 0.8)
            m = int(dur * fs)
            if m >= n_samples:
                m = n_samples - 1
            start = int(rng.integers(0, n_samples - m))
            burst = _harmonic_stack(rng, m, fs, rng.uniform(20.0, 50.0), 4, 0.8)
            burst *= _raised_cosine_envelope(m, int(0.2 * m))
            sig[start:start + m] += burst
    elif kind == "rain":
        sig = _shaped_noise(rng, n_samples, fs,
                            lambda f: np.sqrt(np.maximum(f, 1.0) / (fs / 2)))
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    r = _rms(sig)
    if r > 0:
        sig *= spec.level / r
    return sig


def frame_overlap_labels(onsets_s, durations_s, fs: int, frames: int,
                         window: int, hop: int) -> np.ndarray:
    """True for each frame whose sample span overlaps any [onset, onset+dur)."""
    labels = np.zeros(frames, dtype=bool)
    starts = np.arange(frames) * hop
    ends = starts + window
    for onset, dur in zip(onsets_s, durations_s):
        a = onset * fs
        b = (onset + dur) * fs
        labels |= (starts < b) & (ends > a)
    return labels


def gen_clip(rumbles, background: BackgroundSpec, snr_db: float, fs: int, seed: int,
             frames: int = 64, window: int = 512, hop: int = 384) -> LabeledClip:
    """Mix rumbles over a background at a clip-level SNR.

    SNR is RMS(call segment) / RMS(background over the same segment) in dB;
    each rumble is scaled independently against the background. Over a silent
    background the rumble keeps its spec amplitude.
    """
    n = (frames - 1) * hop + window
    clip_s = n / fs
    for r in rumbles:
        if r.end_s > clip_s + 1e-9:
            raise ValueError(f"rumble ending at {r.end_s:.2f}s extends past the {clip_s:.2f}s clip")
    bg = gen_background(background, n, fs, derive_seed(seed, "background"))
    wave = bg.copy()
    gain = 10.0 ** (snr_db / 20.0)
    for i, r in enumerate(rumbles):
        sig = gen_rumble(r, fs, derive_seed(seed, f"rumble/{i}"))
        a = int(round(r.onset_s * fs))
        b = min(a + len(sig), n)
        seg = sig[: b - a]
        bg_rms = _rms(bg[a:b])
        call_rms = _rms(seg)
        if bg_rms > 0 and call_rms > 0:
            seg = seg * (gain * bg_rms / call_rms)
        wave[a:b] += seg
    labels = frame_overlap_labels([r.onset_s for r in rumbles],
                                  [r.duration_s for r in rumbles],
                                  fs, frames, window, hop)
    return LabeledClip(
        waveform=wave.astype(np.float32),
        frame_labels=labels,
        clip_label=bool(labels.any()),
        rumbles=list(rumbles),
        background=background,
        snr_db=snr_db,
    )


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_clips: int = 2000
    split_fraction: float = 0.5      # share of clips assigned to train
    snr_db_lo: float = -5.0
    snr_db_hi: float = 20.0
    sample_rate: int = 1000
    frames: int = 64
    window: int = 512
    hop: int = 384
    p_second_rumble: float = 0.3
    background_weights: tuple = (
        ("broadband_wind", 0.25),
        ("engine_harmonic", 0.30),
        ("croc_burst", 0.25),
        ("rain", 0.10),
        ("silence", 0.10),
    )
    level_lo: float = 0.05
    level_hi: float = 0.3

    def __post_init__(self):
        if self.n_clips <= 0:
            raise ValueError("n_clips must be > 0")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")

    @property
    def samples_per_clip(self) -> int:
        return (self.frames - 1) * self.hop + self.window

    @property
    def clip_s(self) -> float:
        return self.samples_per_clip / self.sample_rate


@dataclass
class DatasetSplit:
    train: list
    test: list
    config: DatasetConfig
    seed: int


def _draw_rumble(rng, clip_s: float, distance: float = 0.0) -> RumbleSpec:
    """distance in [0, 1]: far calls keep fewer harmonics and roll off
    steeper, since high-frequency components attenuate first with range."""
    duration = float(rng.uniform(2.0, 8.0))
    fundamental = float(rng.uniform(8.0, 34.0))
    max_harm = min(6, max(1, int(450.0 / (fundamental * 1.15))))
    top = max(1, int(round(1 + (max_harm - 1) * (1.0 - distance))))
    return RumbleSpec(
        fundamental_hz=fundamental,
        duration_s=duration,
        n_harmonics=int(rng.integers(1, top + 1)),
        harmonic_rolloff=float(rng.uniform(0.5, 1.0) + 0.8 * distance),
        fm_depth=float(rng.uniform(0.0, 0.12)),
        fm_rate_hz=float(rng.uniform(0.5, 3.0)),
        amplitude=float(rng.uniform(0.5, 1.5)),
        onset_s=float(rng.uniform(0.0, clip_s - duration)),
    )


def _draw_background(rng, cfg: DatasetConfig) -> BackgroundSpec:
    kinds = [k for k, _ in cfg.background_weights]
    weights = np.array([w for _, w in cfg.background_weights], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    return BackgroundSpec(kind=kind, level=float(rng.uniform(cfg.level_lo, cfg.level_hi)))


def make_clip(cfg: DatasetConfig, positive: bool, seed: int) -> LabeledClip:
    """One clip from a derived seed; positives carry 1-2 rumbles.

    A per-clip distance factor couples SNR with harmonic content: distant
    gatherings arrive quiet AND stripped of upper harmonics, so the weakest
    calls live almost entirely in the fundamental band.
    """
    rng = np.random.default_rng(derive_seed(seed, "specs"))
    background = _draw_background(rng, cfg)
    rumbles = []
    distance = float(rng.uniform())
    if positive:
        rumbles.append(_draw_rumble(rng, cfg.clip_s, distance))
        if rng.uniform() < cfg.p_second_rumble:
            rumbles.append(_draw_rumble(rng, cfg.clip_s, distance))
    snr = cfg.snr_db_hi - distance * (cfg.snr_db_hi - cfg.snr_db_lo)
    return gen_clip(rumbles, background, snr, cfg.sample_rate,
                    derive_seed(seed, "mix"), cfg.frames, cfg.window, cfg.hop)


def build_dataset(cfg: DatasetConfig, seed: int) -> DatasetSplit:
    """Balanced positives/negatives, stratified uniform random train/test split."""
    n_pos = cfg.n_clips // 2
    n_neg = cfg.n_clips - n_pos
    clips = [make_clip(cfg, i < n_pos, derive_seed(seed, f"clip/{i}"))
             for i in range(cfg.n_clips)]
    rng = np.random.default_rng(derive_seed(seed, "split"))
    train, test = [], []
    for idx_group in (range(n_pos), range(n_pos, cfg.n_clips)):
        idx = rng.permutation(list(idx_group))
        n_train = int(round(cfg.split_fraction * len(idx)))
        train.extend(clips[i] for i in idx[:n_train])
        test.extend(clips[i] for i in idx[n_train:])
    order = np.random.default_rng(derive_seed(seed, "shuffle"))
    train = [train[i] for i in order.permutation(len(train))]
    test = [test[i] for i in order.permutation(len(test))]
    return DatasetSplit(train=train, test=test, config=cfg, seed=seed)


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------

_LABEL_BITMAP_BYTES = 64


def save_dataset(path, clips, sample_rate: int) -> None:
    """Header: magic 'PAMDS1', then sample rate, clip count, frame count and
    samples per clip as little-endian u32. Per clip: float32 samples, a
    64-byte frame-label bitmap (LSB-first bit order, zero padded), and one
    clip-label byte."""
    if not clips:
        raise ValueError("refusing to write an empty dataset")
    frames = len(clips[0].frame_labels)
    n_samples = len(clips[0].waveform)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", sample_rate, len(clips), frames, n_samples))
        for c in clips:
            if len(c.waveform) != n_samples or len(c.frame_labels) != frames:
                raise ValueError("inconsistent clip geometry in dataset")
            fh.write(np.asarray(c.waveform, dtype="<f4").tobytes())
            bitmap = np.packbits(c.frame_labels.astype(np.uint8), bitorder="little")
            fh.write(bitmap.tobytes().ljust(_LABEL_BITMAP_BYTES, b"\0"))
            fh.write(struct.pack("<B", int(c.clip_label)))


def load_dataset(path):
    """Returns (clips, sample_rate); rumble metadata is not stored on disk."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ValueError(f"bad dataset magic {blob[:6]!r}")
    off = len(DATASET_MAGIC)
    sample_rate, n_clips, frames, n_samples = struct.unpack_from("<IIII", blob, off)
    off += 16
    record = n_samples * 4 + _LABEL_BITMAP_BYTES + 1
    if len(blob) - off != n_clips * record:
        raise ValueError("dataset payload length mismatch")
    clips = []
    for _ in range(n_clips):
        wave = np.frombuffer(blob, dtype="<f4", count=n_samples, offset=off).astype(np.float32)
        off += n_samples * 4
        bitmap = np.frombuffer(blob, dtype=np.uint8, count=_LABEL_BITMAP_BYTES, offset=off)
        off += _LABEL_BITMAP_BYTES
        labels = np.unpackbits(bitmap, bitorder="little")[:frames].astype(bool)
        clip_label = bool(blob[off])
        off += 1
        clips.append(LabeledClip(waveform=wave, frame_labels=labels, clip_label=clip_label))
    return clips, sample_rate


def export_labels_csv(path, clips) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "clip_label", "frame_labels"])
        for i, c in enumerate(clips):
            writer.writerow([i, int(c.clip_label),
                             "".join(str(int(b)) for b in c.frame_labels)])
