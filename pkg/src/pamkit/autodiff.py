"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray and a backward closure; `backward()` walks the
tape in reverse topological order and accumulates gradients into every
tensor with requires_grad. Only the operations the models need are
implemented. Convolutions are im2col matmuls; their input gradients are
themselves convolutions with flipped kernels, so no scatter-adds appear
anywhere. Ops preserve the input dtype: float32 for training, float64 for
finite-difference checking.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, seed_grad=None):
        """Accumulate gradients of self (summed if non-scalar) into the tape."""
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data) if seed_grad is None else np.asarray(seed_grad)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def from_op(data, parents, backward):
    """Build the result of a differentiable op; `backward(g)` must route the
    incoming gradient to each parent via `accumulate`."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))
    return from_op(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        accumulate(a, g * c)
    return from_op(a.data * c, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False)
                   if np.ndim(g) == 0 else g * np.ones_like(a.data))
    return from_op(np.asarray(a.data.sum()), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    def backward(g):
        accumulate(a, g * mask)
    return from_op(a.data * mask, (a,), backward)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """(..., K) @ (K, M); leading dimensions of `a` are flattened internally."""
    lead = a.data.shape[:-1]
    k = a.data.shape[-1]
    flat = a.data.reshape(-1, k)
    out = flat @ w.data

    def backward(g):
        gf = g.reshape(-1, w.data.shape[1])
        accumulate(a, (gf @ w.data.T).reshape(a.data.shape))
        accumulate(w, flat.T @ gf)
    return from_op(out.reshape(*lead, w.data.shape[1]), (a, w), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate(t, piece)
    return from_op(np.concatenate(datas, axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Convolutions (channels-last layouts)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding stride-1 conv; x (N,H,W,Cin), w (kh,kw,Cin,Cout), b (Cout,).

    Evaluated as one GEMM per kernel tap on the padded input with shifted
    output accumulation; this avoids the kh*kw im2col blowup, which
    dominates runtime on a single core.
    """
    n, h, wd, cin = x.data.shape
    kh, kw, _, cout = w.data.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    hp, wp = h + 2 * ph, wd + 2 * pw
    flat = xp.reshape(-1, cin)
    out = np.broadcast_to(b.data, (n, h, wd, cout)).astype(x.data.dtype, copy=True)
    z = np.empty((flat.shape[0], cout), dtype=x.data.dtype)
    zv = z.reshape(n, hp, wp, cout)
    for dy in range(kh):
        for dx in range(kw):
            np.matmul(flat, w.data[dy, dx], out=z)
            out += zv[:, dy:dy + h, dx:dx + wd, :]

    def backward(g):
        gf = np.ascontiguousarray(g).reshape(-1, cout)
        dw = np.empty_like(w.data)
        dz = np.zeros((n, hp, wp, cout), dtype=g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                dz[...] = 0.0
                dz[:, dy:dy + h, dx:dx + wd, :] = g
                np.matmul(flat.T, dz.reshape(-1, cout), out=dw[dy, dx])
        accumulate(w, dw)
        accumulate(b, gf.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            u = np.empty((gf.shape[0], cin), dtype=g.dtype)
            uv = u.reshape(n, h, wd, cin)
            for dy in range(kh):
                for dx in range(kw):
                    np.matmul(gf, w.data[dy, dx].T, out=u)
                    dxp[:, dy:dy + h, dx:dx + wd, :] += uv
            accumulate(x, dxp[:, ph:ph + h, pw:pw + wd, :])
    return from_op(out, (x, w, b), backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling; odd trailing rows/columns are dropped."""
    n, h, w, c = x.data.shape
    h2, w2 = h // 2, w // 2
    view = x.data[:, :h2 * 2, :w2 * 2].reshape(n, h2, 2, w2, 2, c)
    out = view.mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :h2 * 2, :w2 * 2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        accumulate(x, gx)
    return from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,H,W,C) -> (N,C)."""
    n, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape))
    return from_op(out, (x,), backward)


def temporal_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Causal 1-D convolution over time; x (N,T,Cin), w (k,Cin,Cout).

    Left zero-padding by k-1 makes each output frame depend only on the
    current and earlier frames. Same per-tap GEMM scheme as conv2d.
    """
    n, t, cin = x.data.shape
    k, _, cout = w.data.shape
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    tp = t + k - 1
    flat = xp.reshape(-1, cin)
    out = np.broadcast_to(b.data, (n, t, cout)).astype(x.data.dtype, copy=True)
    z = np.empty((flat.shape[0], cout), dtype=x.data.dtype)
    zv = z.reshape(n, tp, cout)
    for j in range(k):
        np.matmul(flat, w.data[j], out=z)
        out += zv[:, j:j + t, :]

    def backward(g):
        gf = np.ascontiguousarray(g).reshape(-1, cout)
        dw = np.empty_like(w.data)
        dz = np.zeros((n, tp, cout), dtype=g.dtype)
        for j in range(k):
            dz[...] = 0.0
            dz[:, j:j + t, :] = g
            np.matmul(flat.T, dz.reshape(-1, cout), out=dw[j])
        accumulate(w, dw)
        accumulate(b, gf.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros((n, tp, cin), dtype=g.dtype)
            u = np.empty((gf.shape[0], cin), dtype=g.dtype)
            uv = u.reshape(n, t, cin)
            for j in range(k):
                np.matmul(gf, w.data[j].T, out=u)
                dxp[:, j:j + t, :] += uv
            accumulate(x, dxp[:, k - 1:, :])
    return from_op(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray):
    """Mean cross-entropy over all leading dimensions.

    labels holds integer class indices with shape logits.shape[:-1].
    Returns (scalar loss Tensor, probabilities ndarray).
    """
    probs = softmax_np(logits.data)
    flat_p = probs.reshape(-1, probs.shape[-1])
    flat_y = np.asarray(labels).reshape(-1)
    n = flat_y.shape[0]
    picked = flat_p[np.arange(n), flat_y]
    loss = float(-np.log(np.maximum(picked, 1e-30)).mean())

    def backward(g):
        d = flat_p.copy()
        d[np.arange(n), flat_y] -= 1.0
        accumulate(logits, (d * (g / n)).reshape(logits.data.shape).astype(
            logits.data.dtype, copy=False))
    out = from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
    return out, probs
