"""Per-band bit-truncation codec and allocation baselines.

Spectrogram values map to signed 32-bit fixed point against a global scale;
lowering a band's rate keeps only the top bits of each value (sign first,
then magnitude). Truncation is toward zero and reconstructs at the lower
magnitude bound, so it is idempotent and encode -> decode -> encode is a
fixpoint on the wire.

Wire format (little-endian):
    magic 'PAMC' | version u8=1 | t u16 | f u16 | scale f32 | bits u8 x f
    | payload: per band, t values of bits[i] bits each, MSB-first,
      zero-padded to a byte boundary.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

BLOCK_MAGIC = b"PAMC"
BLOCK_VERSION = 1
FULL_SCALE = np.int64(2 ** 31 - 1)
MIN_BITS = 1
MAX_BITS = 32
DEFAULT_FLOOR = 5
SCALE_PERCENTILE = 99.9


class FormatError(ValueError):
    """Malformed encoded block."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


@dataclass
class AllocationPlan:
    bits: np.ndarray                      # per-band bit widths
    budget: int
    method: str                           # learned | human | uniform
    lam: np.ndarray | None = None         # provenance when learned

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.bits.min() < MIN_BITS or self.bits.max() > MAX_BITS:
            raise ValueError(f"bit widths outside [{MIN_BITS}, {MAX_BITS}]")
        if int(self.bits.sum()) != self.budget:
            raise ValueError(f"bits sum {int(self.bits.sum())} != budget {self.budget}")

    @property
    def n_bands(self) -> int:
        return len(self.bits)


@dataclass
class IntSpectrogram:
    data: np.ndarray    # (t, f) int32
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        self.data = np.asarray(self.data, dtype=np.int32)


@dataclass
class EncodedBlock:
    t: int
    f: int
    scale: float
    bits: np.ndarray
    payload: bytes
    version: int = BLOCK_VERSION

    def to_bytes(self) -> bytes:
        head = BLOCK_MAGIC + struct.pack("<BHHf", self.version, self.t, self.f, self.scale)
        return head + np.asarray(self.bits, dtype=np.uint8).tobytes() + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncodedBlock":
        if len(blob) < 4 or blob[:4] != BLOCK_MAGIC:
            raise BadMagicError(f"bad magic {blob[:4]!r}")
        if len(blob) < 13:
            raise TruncatedPayloadError("header cut short")
        version, t, f, scale = struct.unpack_from("<BHHf", blob, 4)
        if version != BLOCK_VERSION:
            raise VersionError(f"unsupported version {version}")
        if len(blob) < 13 + f:
            raise TruncatedPayloadError("bits vector cut short")
        bits = np.frombuffer(blob, dtype=np.uint8, count=f, offset=13).astype(np.int64)
        if f and (bits.min() < MIN_BITS or bits.max() > MAX_BITS):
            raise FormatError("bit widths outside [1, 32]")
        payload = blob[13 + f:]
        expected = (t * int(bits.sum()) + 7) // 8
        if len(payload) != expected:
            raise TruncatedPayloadError(
                f"payload is {len(payload)} bytes, header implies {expected}")
        return cls(t=t, f=f, scale=scale, bits=bits, payload=payload, version=version)


def float_to_fixed(data: np.ndarray, scale: float) -> IntSpectrogram:
    """round(clamp(x / scale, -1, 1) * (2**31 - 1)), saturating."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    clamped = np.clip(np.asarray(data, dtype=np.float64) / scale, -1.0, 1.0)
    return IntSpectrogram(np.rint(clamped * FULL_SCALE).astype(np.int64).astype(np.int32),
                          float(scale))


def fixed_to_float(x: IntSpectrogram) -> np.ndarray:
    return x.data.astype(np.float64) / float(FULL_SCALE) * x.scale


def truncate(v, b):
    """Keep the sign and the top b-1 magnitude bits of a signed 32-bit value.

    Truncation is toward zero, so it is sign-symmetric, zero-preserving and
    idempotent; b = 1 keeps the sign alone, which reconstructs as 0.
    Accepts scalars or arrays; b may be an array broadcastable against v.
    """
    v_arr = np.asarray(v, dtype=np.int64)
    b_arr = np.asarray(b, dtype=np.int64)
    if b_arr.min() < MIN_BITS or b_arr.max() > MAX_BITS:
        raise ValueError(f"bit width outside [{MIN_BITS}, {MAX_BITS}]")
    shift = (MAX_BITS - b_arr).astype(np.int64)
    out = np.sign(v_arr) * ((np.abs(v_arr) >> shift) << shift)
    if np.isscalar(v) and np.isscalar(b):
        return int(out)
    return out.astype(np.int64)


def _band_codes(x: IntSpectrogram, bits: np.ndarray) -> list:
    """Per band: truncated values folded to (sign, magnitude) codes of bits[i] bits."""
    codes = []
    for i, b in enumerate(bits):
        b = int(b)
        tr = truncate(x.data[:, i], b)
        sign = (tr < 0).astype(np.uint64)
        mag = (np.abs(tr) >> (MAX_BITS - b)).astype(np.uint64)
        codes.append((sign << (b - 1)) | mag if b > 1 else sign * 0)
    return codes


def encode(x: IntSpectrogram, plan: AllocationPlan) -> EncodedBlock:
    """Pack each band's values at plan.bits[i] bits, MSB-first, band-major."""
    t, f = x.data.shape
    if plan.n_bands != f:
        raise ValueError(f"plan covers {plan.n_bands} bands, spectrogram has {f}")
    chunks = []
    for i, code in enumerate(_band_codes(x, plan.bits)):
        b = int(plan.bits[i])
        shifts = np.arange(b - 1, -1, -1, dtype=np.uint64)
        chunks.append(((code[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1))
    bitstream = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    payload = np.packbits(bitstream).tobytes()
    return EncodedBlock(t=t, f=f, scale=float(x.scale),
                        bits=plan.bits.copy(), payload=payload)


def decode_to_fixed(e: EncodedBlock) -> IntSpectrogram:
    raw = np.frombuffer(e.payload, dtype=np.uint8)
    bitstream = np.unpackbits(raw)
    needed = e.t * int(e.bits.sum())
    if len(bitstream) < needed:
        raise TruncatedPayloadError("payload shorter than t * sum(bits)")
    data = np.zeros((e.t, e.f), dtype=np.int64)
    pos = 0
    for i, b in enumerate(e.bits):
        b = int(b)
        seg = bitstream[pos:pos + e.t * b].reshape(e.t, b).astype(np.int64)
        pos += e.t * b
        weights = (np.int64(1) << np.arange(b - 1, -1, -1, dtype=np.int64))
        code = seg @ weights
        sign = (code >> (b - 1)) & 1
        mag = code & ((np.int64(1) << (b - 1)) - 1) if b > 1 else np.zeros_like(code)
        data[:, i] = (1 - 2 * sign) * (mag << (MAX_BITS - b))
    return IntSpectrogram(data.astype(np.int32), e.scale)


def decode(e: EncodedBlock) -> np.ndarray:
    """Reconstructed float spectrogram (low bits zero-filled, then rescaled)."""
    return fixed_to_float(decode_to_fixed(e))


def quantize_batch(specs: np.ndarray, plan: AllocationPlan, scale: float) -> np.ndarray:
    """Vectorized equivalent of float_to_fixed -> encode -> decode over a
    batch of spectrograms; decode(encode(x)) == truncate(x, bits) per band."""
    fixed = float_to_fixed(specs, scale)
    tr = truncate(fixed.data, np.asarray(plan.bits)[None, None, :]
                  if specs.ndim == 3 else np.asarray(plan.bits)[None, :])
    return tr.astype(np.float64) / float(FULL_SCALE) * scale


# ---------------------------------------------------------------------------
# Allocation baselines
# ---------------------------------------------------------------------------

def ath_db(freq_hz) -> np.ndarray:
    """Absolute threshold of hearing in dB SPL (Terhardt-style fit):
    3.64 (f/1000)^-0.8 - 6.5 exp(-0.6 (f/1000 - 3.3)^2) + 1e-3 (f/1000)^4.
    """
    khz = np.asarray(freq_hz, dtype=np.float64) / 1000.0
    if np.any(khz <= 0):
        raise ValueError("frequencies must be positive")
    return (3.64 * khz ** -0.8
            - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2)
            + 1e-3 * khz ** 4)


def hearing_sensitivity(freq_hz) -> np.ndarray:
    """10^(-ATH/20): big where hearing is sensitive, tiny in infrasound."""
    return 10.0 ** (-ath_db(freq_hz) / 20.0)


def largest_remainder(weights: np.ndarray, total: int, headroom: np.ndarray) -> np.ndarray:
    """Integer apportionment of `total` proportional to weights, capped per
    element by headroom; exact sum, ties broken by lower index."""
    n = len(weights)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("negative apportionment weight")
    alloc = np.zeros(n, dtype=np.int64)
    head = np.asarray(headroom, dtype=np.int64).copy()
    remaining = int(total)
    while remaining > 0:
        active = head > 0
        if not active.any():
            raise ValueError(f"cannot place {remaining} bits: all bands at cap")
        w = np.where(active, weights, 0.0)
        if w.sum() == 0.0:
            w = active.astype(np.float64)   # degenerate flat weights: spread evenly
        quota = remaining * w / w.sum()
        base = np.floor(quota).astype(np.int64)
        # fractional leftover is < count(active), so every +1 lands on an active band
        leftover = remaining - int(base.sum())
        rem = np.where(active, quota - base, -1.0)
        order = np.argsort(-rem, kind="stable")
        add = np.zeros(n, dtype=np.int64)
        add[order[:leftover]] = 1
        step = np.minimum(base + add, head)   # overflow past caps re-enters as `remaining`
        alloc += step
        head -= step
        remaining -= int(step.sum())
    return alloc


def _check_budget(n_bands: int, budget: int, floor: int) -> None:
    if budget < floor * n_bands:
        raise ValueError(f"budget {budget} below floor {floor} x {n_bands} bands")
    if budget > MAX_BITS * n_bands:
        raise ValueError(f"budget {budget} exceeds {MAX_BITS} x {n_bands} bands")


def human_allocation(band_freqs: np.ndarray, budget: int,
                     floor: int = DEFAULT_FLOOR) -> AllocationPlan:
    """Floor bits everywhere; surplus proportional to human hearing
    sensitivity at each band center."""
    band_freqs = np.asarray(band_freqs, dtype=np.float64)
    n = len(band_freqs)
    _check_budget(n, budget, floor)
    s = hearing_sensitivity(band_freqs)
    extra = largest_remainder(s, budget - floor * n,
                              np.full(n, MAX_BITS - floor, dtype=np.int64))
    return AllocationPlan(bits=floor + extra, budget=budget, method="human")


def uniform_allocation(n_bands: int, budget: int,
                       floor: int = DEFAULT_FLOOR) -> AllocationPlan:
    """floor(budget / f) everywhere, +1 to the first budget mod f bands."""
    _check_budget(n_bands, budget, floor)
    base, rem = divmod(budget, n_bands)
    bits = np.full(n_bands, base, dtype=np.int64)
    bits[:rem] += 1
    return AllocationPlan(bits=bits, budget=budget, method="uniform")


def compression_ratio(plan: AllocationPlan, sample_rate: int = 1000, hop: int = 384) -> float:
    """(sample_rate * 32) / (budget * frame_rate) with frame_rate =
    sample_rate / hop; header overhead excluded."""
    frame_rate = sample_rate / hop
    return (sample_rate * 32.0) / (plan.budget * frame_rate)


def percentile_scale(specs: np.ndarray, pct: float = SCALE_PERCENTILE) -> float:
    """Global fixed-point scale: the pct-th percentile of |values| over the
    training split (keeps the wire format self-describing)."""
    scale = float(np.percentile(np.abs(specs), pct))
    if scale <= 0:
        raise ValueError("degenerate scale: spectrograms are all zero")
    return scale


def save_block(path, block: EncodedBlock) -> None:
    with open(path, "wb") as fh:
        fh.write(block.to_bytes())


def load_block(path) -> EncodedBlock:
    with open(path, "rb") as fh:
        return EncodedBlock.from_bytes(fh.read())
