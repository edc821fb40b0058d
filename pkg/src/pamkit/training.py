"""SGD training loops for the detector and segmenter, plus the linear
hinge-loss baseline for the pooled MFCC features.

The update rule folds weight decay into the velocity:
    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
The learning rate is multiplied by lr_decay whenever the validation loss
fails to improve by plateau_min_delta for plateau_patience consecutive
epochs. A fixed seed makes the whole trajectory reproducible: shuffling,
cropping and init all draw from streams derived off TrainConfig.seed.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelParams, detector_init, detector_forward, segmenter_init, segmenter_forward
from .seeds import derive_seed


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 1e-4
    epochs: int = 10
    seed: int = 0
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-3
    lr_decay: float = 0.1
    val_fraction: float = 0.1
    crop_pad: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(model: ModelParams, cfg: TrainConfig, lr: float, no_decay=()) -> None:
    """Apply one momentum/weight-decay update to every parameter with a
    gradient; names in no_decay skip the decay term."""
    for name, p in model.params.items():
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay and name not in no_decay:
            g = g + cfg.weight_decay * p.data
        v = model.momentum.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g
        model.momentum[name] = v
        p.data = p.data - lr * v


def crop_batch(specs: np.ndarray, offsets: np.ndarray, pad: int = 8) -> np.ndarray:
    """Random-crop augmentation, batched: zero-pad the time axis by pad on
    both sides and take each clip's window at its offset in [0, 2*pad]."""
    b, t, f = specs.shape
    padded = np.pad(specs, ((0, 0), (pad, pad), (0, 0)))
    idx = offsets[:, None] + np.arange(t)[None, :]
    return padded[np.arange(b)[:, None], idx]


class PlateauScheduler:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.cfg.plateau_min_delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.cfg.plateau_patience:
                self.lr *= self.cfg.lr_decay
                self.stale = 0
        return self.lr


def _split_val(n: int, cfg: TrainConfig):
    rng = np.random.default_rng(derive_seed(cfg.seed, "val-split"))
    order = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    if n - n_val < 1:
        n_val = 0
    return order[n_val:], order[:n_val]


def _eval_batched(model, forward, specs, labels, batch=256):
    total_loss, correct, count = 0.0, 0, 0
    for i in range(0, len(specs), batch):
        logits = detach_forward(model, forward, specs[i:i + batch])
        loss, probs = ad.softmax_cross_entropy(logits, labels[i:i + batch])
        n = int(np.prod(np.asarray(labels[i:i + batch]).shape))
        total_loss += float(loss.data) * n
        correct += int((probs.argmax(axis=-1) == labels[i:i + batch]).sum())
        count += n
    return total_loss / max(count, 1), correct / max(count, 1)


def detach_forward(model, forward, specs):
    model.require_grad(False)
    try:
        return forward(model, Tensor(specs))
    finally:
        model.require_grad(True)


def _train_loop(model: ModelParams, forward, specs, labels, cfg: TrainConfig,
                crop: bool) -> dict:
    n = len(specs)
    if n == 0:
        raise ValueError("empty training split")
    train_idx, val_idx = _split_val(n, cfg)
    sched = PlateauScheduler(cfg)
    history = {k: [] for k in ("train_loss", "train_acc", "val_loss", "val_acc", "lr")}
    model.require_grad(True)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, f"shuffle/{epoch}")).permutation(train_idx)
        crop_rng = np.random.default_rng(derive_seed(cfg.seed, f"crop/{epoch}"))
        ep_loss, ep_correct, ep_count = 0.0, 0, 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            xb = specs[sel]
            if crop:
                offsets = crop_rng.integers(0, 2 * cfg.crop_pad + 1, size=len(sel))
                xb = crop_batch(xb, offsets, cfg.crop_pad)
            yb = labels[sel]
            model.zero_grads()
            loss, probs = ad.softmax_cross_entropy(forward(model, Tensor(xb)), yb)
            loss.backward()
            sgd_step(model, cfg, sched.lr)
            n_items = int(np.prod(np.asarray(yb).shape))
            ep_loss += float(loss.data) * n_items
            ep_correct += int((probs.argmax(axis=-1) == yb).sum())
            ep_count += n_items
        history["train_loss"].append(ep_loss / max(ep_count, 1))
        history["train_acc"].append(ep_correct / max(ep_count, 1))
        if len(val_idx):
            vl, va = _eval_batched(model, forward, specs[val_idx], labels[val_idx])
        else:
            vl, va = history["train_loss"][-1], history["train_acc"][-1]
        history["val_loss"].append(vl)
        history["val_acc"].append(va)
        history["lr"].append(sched.lr)
        sched.update(vl)
    model.require_grad(False)
    return history


def train_classifier(specs: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Detector training with per-epoch reshuffling and random-crop
    augmentation; returns (model, history)."""
    specs = np.asarray(specs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    model = detector_init(derive_seed(cfg.seed, "init"))
    history = _train_loop(model, detector_forward, specs, labels, cfg, crop=True)
    return model, history


def train_segmenter(specs: np.ndarray, frame_labels: np.ndarray, cfg: TrainConfig,
                    freq_conv: bool = True, width: int | None = None):
    """Per-frame segmenter training; returns (model, history)."""
    specs = np.asarray(specs, dtype=np.float32)
    frame_labels = np.asarray(frame_labels, dtype=np.int64)
    kwargs = {} if width is None else {"width": width}
    model = segmenter_init(derive_seed(cfg.seed, "init"), freq_conv=freq_conv,
                           n_bands=specs.shape[2], **kwargs)
    history = _train_loop(model, segmenter_forward, specs, frame_labels, cfg, crop=False)
    return model, history


# ---------------------------------------------------------------------------
# MFCC + linear SVM baseline
# ---------------------------------------------------------------------------

@dataclass
class LinearSvm:
    w: np.ndarray
    b: float


def standardize_fit(features: np.ndarray):
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-8)
    return mean, std


def standardize_apply(features: np.ndarray, mean, std) -> np.ndarray:
    return (features - mean) / std


def svm_train(features: np.ndarray, labels: np.ndarray, reg: float = 1e-3,
              epochs: int = 500, lr: float = 0.1) -> LinearSvm:
    """Full-batch hinge-loss subgradient descent with L2 regularization.

    Expects standardized features; labels in {0, 1}.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.where(np.asarray(labels) > 0, 1.0, -1.0)
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for t in range(epochs):
        margins = y * (x @ w + b)
        viol = margins < 1.0
        grad_w = 2.0 * reg * w - (y[viol, None] * x[viol]).sum(axis=0) / n
        grad_b = -y[viol].sum() / n
        step = lr / (1.0 + 0.01 * t)
        w -= step * grad_w
        b -= step * grad_b
    return LinearSvm(w=w, b=float(b))


def svm_score(model: LinearSvm, features: np.ndarray) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) @ model.w + model.b


def svm_predict(model: LinearSvm, features: np.ndarray) -> np.ndarray:
    return (svm_score(model, features) > 0).astype(np.int64)
