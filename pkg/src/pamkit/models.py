"""Detector and segmenter architectures plus checkpoint serialization.

Detector: two dense blocks (3 conv layers of 3x3 kernels, growth 8, every
layer concatenated to all later ones in the block), 2x2 average pooling
between blocks, global average pooling and an affine head over
{no-call, call}. Roughly 9k parameters, trainable on a laptop CPU.

Segmenter: a per-frame frequency convolution (full-band, 25 filters)
followed by two causal temporal convolutions (kernel 7) and a per-frame
affine head. The ablation variant drops the frequency convolution and
feeds raw bands to the temporal stage.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"PAMM"
CHECKPOINT_VERSION = 1

GROWTH = 8
BLOCK_LAYERS = 3
N_CLASSES = 2
SEG_FILTERS = 25
SEG_KERNEL = 7
SEG_WIDTH = 12


@dataclass
class ModelParams:
    arch: str
    params: dict                      # name -> Tensor, insertion order fixed
    momentum: dict = field(default_factory=dict)   # name -> ndarray buffers
    meta: dict = field(default_factory=dict)       # e.g. pipeline fingerprint

    def shapes(self) -> dict:
        return {k: tuple(v.data.shape) for k, v in self.params.items()}

    def require_grad(self, flag: bool = True):
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            params={k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.params.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
            meta=dict(self.meta),
        )


def _kaiming(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _zeros(shape, dtype):
    return np.zeros(shape, dtype=dtype)


def detector_init(seed: int, in_shape=(64, 47), dtype=np.float32) -> ModelParams:
    """Kaiming fan-in init for convolutions; the affine head starts at zero
    so an untrained model outputs the uniform distribution."""
    rng = np.random.default_rng(seed)
    params = {}
    c = 1
    for blk in range(2):
        for j in range(BLOCK_LAYERS):
            params[f"block{blk}.conv{j}.w"] = Tensor(_kaiming(rng, (3, 3, c, GROWTH), dtype))
            params[f"block{blk}.conv{j}.b"] = Tensor(_zeros((GROWTH,), dtype))
            c += GROWTH
    params["head.w"] = Tensor(_zeros((c, N_CLASSES), dtype))
    params["head.b"] = Tensor(_zeros((N_CLASSES,), dtype))
    return ModelParams(arch="detector", params=params)


def _dense_block(h: Tensor, params: dict, prefix: str) -> Tensor:
    for j in range(BLOCK_LAYERS):
        y = ad.relu(ad.conv2d(h, params[f"{prefix}.conv{j}.w"], params[f"{prefix}.conv{j}.b"]))
        h = ad.concat([h, y], axis=-1)
    return h


def detector_forward(model: ModelParams, x: Tensor) -> Tensor:
    """x: (N, 64, 47) spectrogram batch (as a Tensor) -> logits (N, 2)."""
    if x.data.ndim != 3:
        raise ValueError(f"expected (batch, frames, bands), got shape {x.data.shape}")
    p = model.params
    h = ad.from_op(x.data[..., None], (x,),
                   lambda g: ad.accumulate(x, g[..., 0]))
    h = _dense_block(h, p, "block0")
    h = ad.avg_pool2x2(h)
    h = _dense_block(h, p, "block1")
    h = ad.global_avg_pool(h)
    return ad.affine(h, p["head.w"], p["head.b"])


def detector_probs(model: ModelParams, specs: np.ndarray, batch: int = 256) -> np.ndarray:
    """Call probabilities P(call) for a stack of spectrograms, chunked."""
    out = []
    for i in range(0, len(specs), batch):
        logits = detector_forward(model, Tensor(specs[i:i + batch]))
        out.append(ad.softmax_np(logits.data)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def segmenter_init(seed: int, freq_conv: bool = True, n_bands: int = 47,
                   width: int = SEG_WIDTH, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = {}
    c_in = n_bands
    if freq_conv:
        params["freq.w"] = Tensor(_kaiming(rng, (n_bands, SEG_FILTERS), dtype))
        params["freq.b"] = Tensor(_zeros((SEG_FILTERS,), dtype))
        c_in = SEG_FILTERS
    params["tconv0.w"] = Tensor(_kaiming(rng, (SEG_KERNEL, c_in, width), dtype))
    params["tconv0.b"] = Tensor(_zeros((width,), dtype))
    params["tconv1.w"] = Tensor(_kaiming(rng, (SEG_KERNEL, width, width), dtype))
    params["tconv1.b"] = Tensor(_zeros((width,), dtype))
    params["head.w"] = Tensor(_zeros((width, N_CLASSES), dtype))
    params["head.b"] = Tensor(_zeros((N_CLASSES,), dtype))
    return ModelParams(arch="segmenter" if freq_conv else "segmenter_noconv", params=params)


def segmenter_forward(model: ModelParams, x: Tensor) -> Tensor:
    """x: (N, 64, 47) -> per-frame logits (N, 64, 2)."""
    p = model.params
    h = x
    if "freq.w" in p:
        h = ad.relu(ad.affine(h, p["freq.w"], p["freq.b"]))
    h = ad.relu(ad.temporal_conv(h, p["tconv0.w"], p["tconv0.b"]))
    h = ad.relu(ad.temporal_conv(h, p["tconv1.w"], p["tconv1.b"]))
    return ad.affine(h, p["head.w"], p["head.b"])


def segmenter_probs(model: ModelParams, specs: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(specs), batch):
        logits = segmenter_forward(model, Tensor(specs[i:i + batch]))
        out.append(ad.softmax_np(logits.data)[..., 1])
    return np.concatenate(out) if out else np.zeros((0, 0))


def forward_for(model: ModelParams):
    if model.arch == "detector":
        return detector_forward
    if model.arch in ("segmenter", "segmenter_noconv"):
        return segmenter_forward
    raise ValueError(f"unknown architecture {model.arch!r}")


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_model(path, model: ModelParams) -> None:
    """magic 'PAMM', version u8, architecture name (u16 length + utf-8),
    layer count u16, then per layer: name, ndim u8, dims u32, followed by all
    parameter blobs as little-endian float32 in layer order. Optimizer state
    is not serialized."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        name = model.arch.encode("utf-8")
        fh.write(struct.pack("<H", len(name)))
        fh.write(name)
        fh.write(struct.pack("<H", len(model.params)))
        for pname, tensor in model.params.items():
            nb = pname.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            shape = tensor.data.shape
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for tensor in model.params.values():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<B", blob, off); off += 1
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (nlen,) = struct.unpack_from("<H", blob, off); off += 2
    arch = blob[off:off + nlen].decode("utf-8"); off += nlen
    (n_layers,) = struct.unpack_from("<H", blob, off); off += 2
    descr = []
    for _ in range(n_layers):
        (plen,) = struct.unpack_from("<H", blob, off); off += 2
        pname = blob[off:off + plen].decode("utf-8"); off += plen
        (ndim,) = struct.unpack_from("<B", blob, off); off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off); off += 4 * ndim
        descr.append((pname, dims))
    params = {}
    for pname, dims in descr:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[pname] = Tensor(arr.reshape(dims).astype(np.float32))
    if off != len(blob):
        raise ValueError("trailing bytes after parameter blobs")
    return ModelParams(arch=arch, params=params)
