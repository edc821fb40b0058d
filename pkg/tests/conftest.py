"""Shared helpers: central finite-difference gradient oracle and tiny
synthetic fixtures."""

import numpy as np
import pytest

import pamkit.autodiff as ad

REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def fd_gradient(loss_fn, tensor: ad.Tensor, coords=None, eps: float = 1e-4,
                rng=None) -> list:
    """Central differences of loss_fn() w.r.t. selected coordinates of
    `tensor` (all coordinates when small, a random sample otherwise)."""
    flat = tensor.data.reshape(-1)
    if coords is None:
        if rng is None:
            rng = np.random.default_rng(0)
        size = min(12, flat.size)
        coords = rng.choice(flat.size, size=size, replace=False)
    grads = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        lp = float(loss_fn().data)
        flat[i] = old - eps
        lm = float(loss_fn().data)
        flat[i] = old
        grads.append(((lp - lm) / (2 * eps), int(i)))
    return grads


def assert_grad_matches(loss_fn, tensors, rel_tol: float = REL_TOL,
                        eps: float = 1e-4, rng=None):
    """Backprop once, then verify every sampled coordinate against the
    finite-difference oracle at `rel_tol` relative (1e-6 absolute floor)."""
    out = loss_fn()
    out.backward()
    analytic = {id(t): t.grad.reshape(-1).copy() for t in tensors}
    for t in tensors:
        for fd, i in fd_gradient(loss_fn, t, eps=eps, rng=rng):
            a = analytic[id(t)][i]
            err = abs(fd - a) / max(abs(fd), abs(a), ABS_FLOOR)
            assert err < rel_tol, f"grad mismatch at coord {i}: fd={fd} analytic={a}"
        t.zero_grad()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def detector_gradcheck_instance(seed: int = 9, shape=(1, 6, 7)):
    """Small float64 detector + input where every relu preactivation sits
    far enough from zero that an eps=1e-4 perturbation cannot cross a kink,
    keeping the finite-difference oracle valid at full tolerance."""
    from pamkit.models import BLOCK_LAYERS, detector_init

    rng = np.random.default_rng(seed)
    model = detector_init(seed, dtype=np.float64)
    head_rng = np.random.default_rng(99)
    for name, p in model.params.items():
        if name.startswith("head."):
            p.data = head_rng.standard_normal(p.data.shape) * 0.3
    x = rng.standard_normal((*shape,))
    margins = []
    h = ad.Tensor(x[..., None])
    for blk in range(2):
        for j in range(BLOCK_LAYERS):
            pre = ad.conv2d(h, model.params[f"block{blk}.conv{j}.w"],
                            model.params[f"block{blk}.conv{j}.b"])
            margins.append(float(np.min(np.abs(pre.data))))
            h = ad.concat([h, ad.relu(pre)], axis=-1)
        if blk == 0:
            h = ad.avg_pool2x2(h)
    assert min(margins) > 1.5e-3, "instance too close to a relu kink for fd checking"
    model.require_grad(True)
    y = np.random.default_rng(4).integers(0, 2, shape[0])
    return model, x, y


def toy_band_energy_task(n: int, seed: int, band=slice(8, 12), strength: float = 1.5):
    """Linearly separable spectrogram batch: positives carry extra energy in
    a fixed band."""
    r = np.random.default_rng(seed)
    specs = (r.standard_normal((n, 64, 47)) * 0.1).astype(np.float32)
    labels = r.integers(0, 2, n).astype(np.int64)
    specs[labels == 1, :, band] += strength
    return specs, labels
