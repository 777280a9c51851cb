"""Momentum-contrast machinery: augmentations, the InfoNCE objective over
a FIFO negative queue, and EMA maintenance of momentum parameters.

The loss takes already-normalized query/key embeddings (stacks end in an
l2norm layer) and returns both the scalar value and its gradient with
respect to the query batch; keys and queue rows are treated as constants
because the momentum path is never trained by backprop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .arch import ParamSet
from .errors import ConfigError, NumericsError, ShapeError


@dataclass
class MocoConfig:
    tau: float = 0.2
    ema_momentum: float = 0.99
    queue_capacity: int = 256
    embedding_dim: int = 32

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", "moco.tau")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ConfigError(
                f"ema_momentum must be in [0, 1), got {self.ema_momentum}",
                "moco.ema_momentum",
            )
        if self.queue_capacity < 1:
            raise ConfigError(
                f"queue_capacity must be >= 1, got {self.queue_capacity}",
                "moco.queue_capacity",
            )
        if self.embedding_dim < 1:
            raise ConfigError(
                f"embedding_dim must be >= 1, got {self.embedding_dim}",
                "moco.embedding_dim",
            )


class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm embedding rows."""

    def __init__(self, capacity: int, width: int):
        if capacity < 1 or width < 1:
            raise ConfigError("queue capacity and width must be positive")
        self.capacity = int(capacity)
        self.width = int(width)
        self._buf = np.zeros((capacity, width), dtype=nn.DTYPE)
        self._cursor = 0
        self._fill = 0

    @property
    def fill(self) -> int:
        return self._fill

    def push(self, batch: np.ndarray) -> None:
        if batch.ndim != 2 or batch.shape[1] != self.width:
            raise ShapeError(
                f"queue expects (n, {self.width}) rows, got {batch.shape}"
            )
        norms = np.linalg.norm(batch, axis=1)
        nonzero = norms > 0
        if nonzero.any() and np.abs(norms[nonzero] - 1.0).max() > 1e-5:
            raise ConfigError("queue rows must be L2-normalized")
        if batch.shape[0] >= self.capacity:
            # oversized batch: only the newest `capacity` rows survive
            self._buf[:] = batch[-self.capacity :]
            self._cursor = 0
            self._fill = self.capacity
            return
        for row in batch:  # strict oldest-first eviction via ring cursor
            self._buf[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._fill = min(self._fill + 1, self.capacity)

    def rows(self) -> np.ndarray:
        """Stored rows in age order, oldest first (copy)."""
        if self._fill < self.capacity:
            return self._buf[: self._fill].copy()
        return np.concatenate([self._buf[self._cursor :], self._buf[: self._cursor]])


def info_nce(z_q: np.ndarray, z_k: np.ndarray, negatives, tau: float) -> tuple[float, np.ndarray]:
    """Mean InfoNCE over a batch of aligned (query, key) rows.

    ``negatives`` is either a NegativeQueue or a (m, d) array.  Logits are
    stabilized by max subtraction before exponentiation.  Returns the loss
    and its gradient with respect to ``z_q``.
    """
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.rows()
    if z_q.ndim != 2 or z_q.shape != z_k.shape:
        raise ShapeError(f"query/key batches must match, got {z_q.shape} vs {z_k.shape}")
    if negatives.size and negatives.shape[1] != z_q.shape[1]:
        raise ShapeError(
            f"negative width {negatives.shape[1]} != embedding width {z_q.shape[1]}"
        )
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")

    n = z_q.shape[0]
    inv_tau = nn.DTYPE(1.0 / tau)
    l_pos = (z_q * z_k).sum(axis=1, keepdims=True) * inv_tau
    if negatives.size:
        l_neg = (z_q @ negatives.T) * inv_tau
        logits = np.concatenate([l_pos, l_neg], axis=1)
    else:
        logits = l_pos
    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    denom = exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(denom) - (l_pos - m)))
    if not np.isfinite(loss):
        raise NumericsError("info_nce produced a non-finite loss")

    # d loss / d logits = (softmax - e_0) / n, then back through the dot products
    dlogits = exp / denom
    dlogits[:, 0] -= 1.0
    dlogits /= n
    grad_q = dlogits[:, :1] * z_k
    if negatives.size:
        grad_q = grad_q + dlogits[:, 1:] @ negatives
    grad_q = grad_q * inv_tau
    return loss, grad_q.astype(nn.DTYPE)


@dataclass
class MomentumPair:
    """Online parameters and their structurally congruent EMA copy."""

    online: ParamSet
    momentum: ParamSet

    def __post_init__(self):
        if not self.online.congruent_with(self.momentum):
            raise ConfigError("online/momentum parameter sets are not congruent")


def ema_update(pair: MomentumPair, m: float) -> None:
    """momentum <- m * momentum + (1 - m) * online, applied after each step."""
    mm = nn.DTYPE(m)
    one_minus = nn.DTYPE(1.0 - m)
    for online, momentum in zip(pair.online.arrays, pair.momentum.arrays):
        momentum *= mm
        momentum += one_minus * online


# --------------------------------------------------------------------------
# Augmentations
# --------------------------------------------------------------------------


@dataclass
class AugmentationConfig:
    pad_crop: int = 2          # zero-pad pixels before a random crop back to size
    flip_prob: float = 0.5
    noise_sigma: float = 0.05
    scale_jitter: float = 0.1  # per-channel factor drawn from 1 +/- jitter

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}",
                              "augment.flip_prob")
        if self.pad_crop < 0 or self.noise_sigma < 0 or self.scale_jitter < 0:
            raise ConfigError("augmentation strengths must be non-negative", "augment")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(pad_crop=0, flip_prob=0.0, noise_sigma=0.0, scale_jitter=0.0)


def augment_view(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """One random view of a single (c, h, w) image; identity when all
    strengths are zero."""
    if x.ndim != 3:
        raise ShapeError(f"augment expects a (c, h, w) image, got {x.shape}")
    c, h, w = x.shape
    view = x
    if cfg.pad_crop > 0:
        p = cfg.pad_crop
        padded = np.pad(view, ((0, 0), (p, p), (p, p)))
        dy = int(rng.integers(0, 2 * p + 1))
        dx = int(rng.integers(0, 2 * p + 1))
        view = padded[:, dy : dy + h, dx : dx + w]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        view = view[:, :, ::-1]
    if cfg.scale_jitter > 0:
        factors = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, size=(c, 1, 1))
        view = view * factors
    if cfg.noise_sigma > 0:
        view = view + rng.normal(0.0, cfg.noise_sigma, size=view.shape)
    return np.ascontiguousarray(view, dtype=nn.DTYPE)


def augment_pair(x: np.ndarray, cfg: AugmentationConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent random views of one sample."""
    return augment_view(x, cfg, rng), augment_view(x, cfg, rng)
