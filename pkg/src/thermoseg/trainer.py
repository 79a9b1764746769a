"""Training loop: binary cross-entropy loss and Adam over a LayerGraph."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .nets import LayerGraph
from .rng import Rng, derive_seed
from .tensor import ShapeMismatchError, Tensor, _result, backward

# predictions are clamped into [BCE_CLAMP, 1 - BCE_CLAMP] before the log
BCE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy, differentiable in the prediction."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != y.shape:
        raise ShapeMismatchError(
            f"bce_loss: prediction {pred.data.shape} vs target {y.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))

    def _bw(g):
        # computed with the clamped probability so saturated predictions still
        # receive a (large but finite) restoring gradient
        grad = (p - y) / (p * (1.0 - p)) / n
        pred.accumulate_grad_owned(float(g) * grad)

    return _result(loss, (pred,), _bw)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Dict[str, Tensor], state: AdamState, cfg: TrainConfig):
    """One Adam update from the gradients currently stored on the parameters."""
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "seconds"])
            for i, (loss, sec) in enumerate(zip(self.losses, self.seconds)):
                writer.writerow([i + 1, f"{loss:.6f}", f"{sec:.3f}"])


def _as_pair(image, mask) -> Tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.dtype == np.uint8:
        image = image / 255.0
    if mask.dtype == np.uint8:
        mask = (mask >= 128).astype(np.float64)
    return image.astype(np.float64), mask.astype(np.float64)


def train(graph: LayerGraph, pairs: Sequence[Tuple], cfg: TrainConfig) -> TrainHistory:
    """Epochs of seeded-shuffled mini-batches of (image, mask) pairs.

    uint8 images are scaled by 1/255 and uint8 masks thresholded to {0,1};
    float inputs are taken as already scaled.  The last partial batch is
    kept.  Fully deterministic for a fixed config seed.
    """
    cfg.validate()
    if not pairs:
        raise ValueError("empty training set")
    hw = graph.cfg.input_hw
    images, masks = [], []
    for image, mask in pairs:
        image, mask = _as_pair(image, mask)
        if image.shape != (hw, hw) or mask.shape != (hw, hw):
            raise ShapeMismatchError(
                f"expected {hw}x{hw} image/mask pairs, got {image.shape} and {mask.shape}")
        images.append(image)
        masks.append(mask)
    x_all = np.stack(images)[:, None, :, :]
    y_all = np.stack(masks)[:, None, :, :]

    params = dict(graph.named_params())
    plist = list(params.values())
    state = AdamState.for_params(params)
    shuffle_rng = Rng(derive_seed(cfg.seed, "shuffle"))
    history = TrainHistory()
    n = len(pairs)
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in plist:
                p.zero_grad()
            out = graph.forward(x_all[batch])
            loss = bce_loss(out, y_all[batch])
            backward(loss, params=plist)
            adam_step(params, state, cfg)
            epoch_loss += loss.item() * len(batch)
        history.losses.append(epoch_loss / n)
        history.seconds.append(time.perf_counter() - t0)
    return history
