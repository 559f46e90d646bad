"""Training loop: MSE objective, Adam, plateau-driven learning-rate ladder.

Training pairs are (color-augmented patch, original patch), both mapped to
[-1, 1]. The learning rate starts at 1e-2 and divides by 10 whenever the
validation loss fails to improve on its best value for 4 consecutive epochs,
stopping after a plateau at 1e-5. The returned network carries the weights of
the epoch with the lowest validation loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .. import augment as aug
from ..errors import EmptyDatasetError, NonFiniteLossError, ShapeMismatchError, UntrainedNetworkError
from .network import StainNormNet
from .tensor import Tensor

LR_LADDER = (1e-2, 1e-3, 1e-4, 1e-5)
L2_FACTOR = 1e-6
PLATEAU_PATIENCE = 4
TRAIN_LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss")


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64, copy=False) - target.astype(np.float64, copy=False)
    return float(np.mean(diff * diff))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(mse)/d(pred) = 2 (pred - target) / N."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {target.shape}")
    return (2.0 / pred.size) * (pred - target)


def l2_penalty(params: list[Tensor], factor: float = L2_FACTOR) -> float:
    return factor * float(sum(np.sum(p.data.astype(np.float64) ** 2) for p in params))


def backward(net: StainNormNet, loss_grad: np.ndarray,
             l2_factor: float = L2_FACTOR) -> np.ndarray:
    """Exact gradients of (loss + l2_factor * sum w^2) into net parameter grads."""
    dx = net.backward(loss_grad)
    if l2_factor:
        for p in net.parameters():
            p.grad += 2.0 * l2_factor * p.data
    return dx


@dataclass
class AdamState:
    """Adam moments plus the plateau-scheduled learning rate."""

    lr: float = LR_LADDER[0]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    state.ensure(params)
    if grads is None:
        grads = [p.grad for p in params]
    state.step_count += 1
    t = state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(np.float64, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 40
    seed: int = 0
    val_fraction: float = 0.1
    l2_factor: float = L2_FACTOR
    patience: int = PLATEAU_PATIENCE
    initial_lr: float = LR_LADDER[0]
    min_lr: float = LR_LADDER[-1]
    augment_category: str | None = aug.HSV_ONLY_MAX  # None trains identity pairs


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def append(self, epoch: int, lr: float, train_loss: float, val_loss: float):
        self.rows.append({"epoch": epoch, "lr": lr,
                          "train_loss": train_loss, "val_loss": val_loss})

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAIN_LOG_FIELDS)
            for row in self.rows:
                writer.writerow([row["epoch"], f"{row['lr']:.9g}",
                                 f"{row['train_loss']:.9g}", f"{row['val_loss']:.9g}"])


def _to_signed(p: np.ndarray) -> np.ndarray:
    return (2.0 * p - 1.0).astype(np.float32)


def _check_finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss at {where}: {value}")
    return value


def train(net: StainNormNet, patches, cfg: TrainConfig | None = None) -> TrainLog:
    """Train the normalizer to invert heavy color augmentation.

    `patches` is an (N, H, W, 3) array in [0, 1]. The deterministic 90/10
    head/tail split provides train and validation sets; validation inputs are
    augmented once and frozen so epoch losses are comparable.
    """
    cfg = cfg or TrainConfig()
    if not isinstance(patches, np.ndarray):
        patches = np.stack(list(patches)) if len(patches) else np.empty((0,))
    if patches.size == 0:
        raise EmptyDatasetError("training requires at least one patch")
    n = patches.shape[0]
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise EmptyDatasetError("dataset too small for a train/val split")
    train_x = patches[: n - n_val]
    val_x = patches[n - n_val:]

    aug_cfg = (aug.AugmentConfig(category=cfg.augment_category, seed=cfg.seed)
               if cfg.augment_category is not None else None)

    def make_input(p: np.ndarray, call_index: int) -> np.ndarray:
        if aug_cfg is None:
            return p
        return aug.apply_profile(p, aug_cfg, call_index)

    # frozen validation pairs; call indices disjoint from the training stream
    val_inputs = np.stack([
        _to_signed(make_input(val_x[i], 1_000_000_000 + i)) for i in range(n_val)
    ])
    val_targets = _to_signed(val_x)

    state = AdamState(lr=cfg.initial_lr)
    params = net.parameters()
    log = TrainLog()
    best_state = None
    bad_epochs = 0
    order_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(11,)))
    call_counter = 0

    for epoch in range(cfg.max_epochs):
        order = order_rng.permutation(train_x.shape[0])
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            targets = _to_signed(train_x[idx])
            inputs = np.stack([
                _to_signed(make_input(train_x[i], call_counter + k))
                for k, i in enumerate(idx)
            ])
            call_counter += len(idx)

            net.zero_grad()
            pred = net.forward(inputs, training=True)
            loss = mse_loss(pred, targets) + l2_penalty(params, cfg.l2_factor)
            _check_finite(loss, f"epoch {epoch} step {start // cfg.batch_size}")
            backward(net, mse_grad(pred, targets), cfg.l2_factor)
            adam_step(state, params)
            epoch_losses.append(loss)

        val_pred = net.forward(val_inputs, training=False)
        val_loss = _check_finite(mse_loss(val_pred, val_targets), f"epoch {epoch} val")
        log.append(epoch, state.lr, float(np.mean(epoch_losses)), val_loss)

        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_state = net.copy_state()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                if state.lr <= cfg.min_lr:
                    break
                state.lr /= 10.0
                bad_epochs = 0

    if best_state is not None:
        net.load_state(best_state)
    net.trained = True
    return log


def normalize_network(net: StainNormNet, p: np.ndarray) -> np.ndarray:
    """Run one patch through the trained network in eval mode.

    Spatial dims that are not multiples of the network's stride product are
    replicate-padded for the forward pass and cropped back afterwards.
    """
    if not net.trained:
        raise UntrainedNetworkError("network has no trained weights")
    h, w = p.shape[0], p.shape[1]
    mult = net.spec.size_multiple
    pad_h = (-h) % mult
    pad_w = (-w) % mult
    x = p
    if pad_h or pad_w:
        x = np.pad(p, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    signed = _to_signed(np.asarray(x))[None]
    out = net.forward(signed, training=False)[0]
    out = (out[:h, :w, :] + 1.0) / 2.0
    return np.clip(out, 0.0, 1.0).astype(p.dtype, copy=False)
