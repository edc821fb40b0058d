"""Learned per-band bit allocation via a differentiable truncation proxy.

Truncating a band to fewer bits injects a quantization error; during
training that error is modeled as additive Gaussian noise scaled by
exp(-lambda[band]), which IS differentiable in lambda. The classifier and
lambda are optimized jointly on

    mean cross-entropy( labels, model(x + exp(-lambda) o beta) )
    + mu * sum(lambda)

with fresh standard-normal beta every batch, so small lambda (cheap bands)
means heavy noise, and the penalty pushes every band as cheap as the
classification loss tolerates. Deployed bit widths come from apportioning
a budget proportional to the min-shifted lambda values.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import AllocationPlan, DEFAULT_FLOOR, MAX_BITS, largest_remainder, _check_budget
from .models import ModelParams, detector_init, detector_forward
from .seeds import derive_seed
from .training import TrainConfig, PlateauScheduler, crop_batch, sgd_step, _split_val, _eval_batched

LAMBDA_INIT = 2.0
WEIGHT_EPS = 1e-9


@dataclass
class AllocTrainConfig:
    mu: float = 1e-7
    lambda_init: float = LAMBDA_INIT
    train: TrainConfig = field(default_factory=TrainConfig)
    warm_start: ModelParams | None = None

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


def noise_channel(x: Tensor, lam: Tensor, beta: np.ndarray) -> Tensor:
    """x + exp(-lam) o beta with beta fixed; gradients flow to x and lam.

    lam has one entry per band (last axis of x); d out / d lam[f] is
    -exp(-lam[f]) * beta[..., f].
    """
    if x.data.shape[-1] != lam.data.shape[0]:
        raise ValueError(f"{lam.data.shape[0]} lambdas for {x.data.shape[-1]} bands")
    if beta.shape != x.data.shape:
        raise ValueError("noise shape must match input shape")
    att = np.exp(-lam.data)
    out = x.data + att * beta

    def backward(g):
        ad.accumulate(x, g)
        axes = tuple(range(g.ndim - 1))
        ad.accumulate(lam, -att * (g * beta).sum(axis=axes))
    return ad.from_op(out, (x, lam), backward)


def noise_channel_seeded(x_hat: np.ndarray, lam: np.ndarray, seed: int) -> np.ndarray:
    """Convenience wrapper: fresh beta drawn from `seed`, plain arrays."""
    beta = np.random.default_rng(seed).standard_normal(x_hat.shape)
    return x_hat + np.exp(-np.asarray(lam)) * beta


def joint_loss(model: ModelParams, lam: Tensor, specs: np.ndarray, labels: np.ndarray,
               mu: float, beta: np.ndarray):
    """Classification loss on noised inputs plus the rate penalty mu * sum(lam).

    Returns (total Tensor, cross-entropy float, penalty float, probs).
    """
    x = Tensor(np.asarray(specs, dtype=lam.data.dtype), requires_grad=True)
    noised = noise_channel(x, lam, beta)
    logits = detector_forward(model, noised)
    ce, probs = ad.softmax_cross_entropy(logits, labels)
    penalty = ad.scale(ad.tsum(lam), mu)
    total = ad.add(ce, penalty)
    return total, float(ce.data), float(penalty.data), probs


def train_allocation(specs: np.ndarray, labels: np.ndarray, cfg: AllocTrainConfig):
    """Joint SGD on classifier weights and lambda (same step rule and
    learning rate; lambda is exempt from weight decay since the mu-penalty
    is the explicit regularizer). Fresh noise every batch.

    Returns (lambda ndarray, model, history).
    """
    tc = cfg.train
    specs = np.asarray(specs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(specs)
    if n == 0:
        raise ValueError("empty training split")
    n_bands = specs.shape[2]
    model = (cfg.warm_start.clone() if cfg.warm_start is not None
             else detector_init(derive_seed(tc.seed, "init")))
    lam_holder = ModelParams(arch="lambda", params={
        "lambda": Tensor(np.full(n_bands, cfg.lambda_init, dtype=np.float32),
                         requires_grad=True)})
    lam = lam_holder.params["lambda"]
    train_idx, val_idx = _split_val(n, tc)
    sched = PlateauScheduler(tc)
    history = {k: [] for k in ("train_loss", "ce", "penalty", "sum_lambda",
                               "mean_lambda", "val_loss", "val_acc", "lr")}
    # classification loss on noised data before any update, for convergence checks
    beta0 = np.random.default_rng(derive_seed(tc.seed, "noise/init")).standard_normal(
        specs[train_idx].shape).astype(np.float32)
    init_ce, _ = _eval_noised(model, lam, specs[train_idx], labels[train_idx], beta0)
    history["initial_ce"] = init_ce
    history["initial_sum_lambda"] = float(lam.data.sum())
    model.require_grad(True)
    for epoch in range(tc.epochs):
        order = np.random.default_rng(derive_seed(tc.seed, f"shuffle/{epoch}")).permutation(train_idx)
        crop_rng = np.random.default_rng(derive_seed(tc.seed, f"crop/{epoch}"))
        ep = {"loss": 0.0, "ce": 0.0, "pen": 0.0, "count": 0}
        for bi, lo in enumerate(range(0, len(order), tc.batch_size)):
            sel = order[lo:lo + tc.batch_size]
            xb = crop_batch(specs[sel],
                            crop_rng.integers(0, 2 * tc.crop_pad + 1, size=len(sel)),
                            tc.crop_pad)
            beta = np.random.default_rng(
                derive_seed(tc.seed, f"noise/{epoch}/{bi}")).standard_normal(
                xb.shape).astype(np.float32)
            model.zero_grads()
            lam.grad = None
            total, ce, pen, _ = joint_loss(model, lam, xb, labels[sel], cfg.mu, beta)
            total.backward()
            sgd_step(model, tc, sched.lr)
            sgd_step(lam_holder, tc, sched.lr, no_decay=("lambda",))
            ep["loss"] += float(total.data) * len(sel)
            ep["ce"] += ce * len(sel)
            ep["pen"] += pen * len(sel)
            ep["count"] += len(sel)
        c = max(ep["count"], 1)
        history["train_loss"].append(ep["loss"] / c)
        history["ce"].append(ep["ce"] / c)
        history["penalty"].append(ep["pen"] / c)
        history["sum_lambda"].append(float(lam.data.sum()))
        history["mean_lambda"].append(float(lam.data.mean()))
        if len(val_idx):
            beta_val = np.random.default_rng(
                derive_seed(tc.seed, f"val-noise/{epoch}")).standard_normal(
                specs[val_idx].shape).astype(np.float32)
            vl, va = _eval_noised(model, lam, specs[val_idx], labels[val_idx], beta_val)
        else:
            vl, va = history["ce"][-1], float("nan")
        history["val_loss"].append(vl)
        history["val_acc"].append(va)
        history["lr"].append(sched.lr)
        sched.update(vl)
    model.require_grad(False)
    return lam.data.astype(np.float64).copy(), model, history


def _eval_noised(model, lam, specs, labels, beta, batch=256):
    total, correct, count = 0.0, 0, 0
    model.require_grad(False)
    lam_t = Tensor(lam.data)
    try:
        for i in range(0, len(specs), batch):
            noised = noise_channel(Tensor(specs[i:i + batch]), lam_t, beta[i:i + batch])
            loss, probs = ad.softmax_cross_entropy(detector_forward(model, noised),
                                                   labels[i:i + batch])
            total += float(loss.data) * len(specs[i:i + batch])
            correct += int((probs.argmax(axis=-1) == labels[i:i + batch]).sum())
            count += len(specs[i:i + batch])
    finally:
        model.require_grad(True)
    return total / max(count, 1), correct / max(count, 1)


def lambda_to_allocation(lam: np.ndarray, budget: int,
                         floor: int = DEFAULT_FLOOR) -> AllocationPlan:
    """Bits proportional to min-shifted lambda above a per-band floor.

    lambda is unconstrained, so raw proportionality is ill-defined for
    negative entries; weights are max(lam - min(lam), 0) + eps, which keeps
    rank order and gives a flat lambda the uniform allocation.
    """
    lam = np.asarray(lam, dtype=np.float64)
    n = len(lam)
    _check_budget(n, budget, floor)
    weights = np.maximum(lam - lam.min(), 0.0) + WEIGHT_EPS
    extra = largest_remainder(weights, budget - floor * n,
                              np.full(n, MAX_BITS - floor, dtype=np.int64))
    return AllocationPlan(bits=floor + extra, budget=budget, method="learned", lam=lam.copy())
