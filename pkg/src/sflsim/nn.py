"""Dense-tensor layer stacks with explicit per-layer forward/backward passes.

All tensors are float32 numpy arrays in row-major order, and every stack
input carries a leading batch dimension: images are ``(n, c, h, w)``,
feature vectors ``(n, d)``.  There is no computation graph; each layer
caches what it needs during a training-mode forward and consumes that
cache in ``backward``.  Calling backward twice, or without a prior
training forward, raises :class:`ProtocolOrderError`.

Conventions:
  - dense weights are stored ``(in_features, out_features)`` so that
    ``y = x @ w + b``;
  - conv weights are ``(out_c, in_c, k, k)`` with odd square kernels,
    symmetric zero padding and integer stride;
  - byte accounting elsewhere assumes 4 bytes per element, which holds
    because everything is float32.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericsError, ProtocolOrderError, ShapeError

DTYPE = np.float32
BYTES_PER_ELEMENT = 4


def as_f32(values) -> np.ndarray:
    return np.asarray(values, dtype=DTYPE)


def check_finite(x: np.ndarray, context: str) -> None:
    if not np.isfinite(x).all():
        raise NumericsError(f"non-finite values in {context}")


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    """Base layer: stateless apart from parameters and the backward cache."""

    kind = "?"

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays, in a fixed order."""
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape.

        Raises ShapeError when the input shape is incompatible; never
        fails silently.
        """
        raise NotImplementedError

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (per-parameter gradients, gradient w.r.t. the input)."""
        raise NotImplementedError

    def clone(self) -> "Layer":
        """Structural copy with independent parameter arrays and no cache."""
        raise NotImplementedError

    # -- cache helpers ------------------------------------------------------

    _cache = None

    def _store(self, cache) -> None:
        self._cache = cache

    def _take(self):
        if self._cache is None:
            raise ProtocolOrderError(
                f"{self.kind}: backward called without a prior training-mode forward"
            )
        cache = self._cache
        self._cache = None
        return cache


class Dense(Layer):
    """Affine layer ``y = x @ w + b``; multi-dim inputs are flattened per sample."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((self.in_features, self.out_features), dtype=DTYPE)
        self.bias = np.zeros(self.out_features, dtype=DTYPE)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.in_features:
            raise ShapeError(
                f"dense expects {self.in_features} input features, got shape {in_shape}"
            )
        return (self.out_features,)

    def forward(self, x, train=False):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects {self.in_features} input features, got {x2.shape[1]}"
            )
        y = x2 @ self.weight + self.bias
        if train:
            self._store((x2, x.shape))
        return y

    def backward(self, grad_out):
        x2, x_shape = self._take()
        grad_w = x2.T @ grad_out
        grad_b = grad_out.sum(axis=0)
        grad_in = (grad_out @ self.weight.T).reshape(x_shape)
        return [grad_w, grad_b], grad_in

    def clone(self):
        other = Dense(self.in_features, self.out_features)
        other.weight = self.weight.copy()
        other.bias = self.bias.copy()
        return other


def _conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    return oh, ow


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*k*k, oh*ow) patch matrix."""
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col`."""
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, oh, ow)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        return padded[:, :, pad : pad + h, pad : pad + w]
    return padded


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int | None = None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel must be odd and positive, got {kernel_size}")
        if stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {stride}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = kernel_size // 2 if padding is None else int(padding)
        if self.padding < 0:
            raise ConfigError(f"conv padding must be >= 0, got {padding}")
        self.weight = np.zeros(
            (self.out_channels, self.in_channels, kernel_size, kernel_size), dtype=DTYPE
        )
        self.bias = np.zeros(self.out_channels, dtype=DTYPE)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv2d expects ({self.in_channels}, h, w) input, got {in_shape}"
            )
        oh, ow = _conv_out_hw(in_shape[1], in_shape[2], self.kernel_size, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d output would be empty for input {in_shape}")
        return (self.out_channels, oh, ow)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expects (n, {self.in_channels}, h, w) input, got {x.shape}"
            )
        n = x.shape[0]
        oh, ow = _conv_out_hw(x.shape[2], x.shape[3], self.kernel_size, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d output would be empty for input {x.shape}")
        cols = _im2col(x, self.kernel_size, self.stride, self.padding)
        w2 = self.weight.reshape(self.out_channels, -1)
        y = np.einsum("ok,nkl->nol", w2, cols, optimize=True) + self.bias[:, None]
        if train:
            self._store((cols, x.shape, (oh, ow)))
        return y.reshape(n, self.out_channels, oh, ow)

    def backward(self, grad_out):
        cols, x_shape, (oh, ow) = self._take()
        n = x_shape[0]
        g2 = grad_out.reshape(n, self.out_channels, oh * ow)
        grad_w = np.einsum("nol,nkl->ok", g2, cols, optimize=True).reshape(self.weight.shape)
        grad_b = g2.sum(axis=(0, 2))
        w2 = self.weight.reshape(self.out_channels, -1)
        dcols = np.einsum("ok,nol->nkl", w2, g2, optimize=True)
        grad_in = _col2im(dcols, x_shape, self.kernel_size, self.stride, self.padding)
        return [grad_w, grad_b], grad_in

    def clone(self):
        other = Conv2d(self.in_channels, self.out_channels, self.kernel_size,
                       self.stride, self.padding)
        other.weight = self.weight.copy()
        other.bias = self.bias.copy()
        return other


class Relu(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        if train:
            self._store(x > 0)
        return np.maximum(x, 0)

    def backward(self, grad_out):
        mask = self._take()
        return [], np.where(mask, grad_out, 0).astype(grad_out.dtype)

    def clone(self):
        return Relu()


class AvgPool2d(Layer):
    kind = "avgpool2d"

    def __init__(self, kernel_size: int, stride: int | None = None):
        if kernel_size < 1:
            raise ConfigError(f"pool kernel must be >= 1, got {kernel_size}")
        self.kernel_size = int(kernel_size)
        self.stride = int(stride) if stride is not None else int(kernel_size)
        if self.stride < 1:
            raise ConfigError(f"pool stride must be >= 1, got {stride}")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"avgpool2d expects (c, h, w) input, got {in_shape}")
        oh, ow = _conv_out_hw(in_shape[1], in_shape[2], self.kernel_size, self.stride, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"avgpool2d window does not fit input {in_shape}")
        return (in_shape[0], oh, ow)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"avgpool2d expects (n, c, h, w) input, got {x.shape}")
        n, c, h, w = x.shape
        oh, ow = _conv_out_hw(h, w, self.kernel_size, self.stride, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"avgpool2d window does not fit input {x.shape}")
        cols = _im2col(x.reshape(n * c, 1, h, w), self.kernel_size, self.stride, 0)
        y = cols.mean(axis=1).reshape(n, c, oh, ow)
        if train:
            self._store((x.shape, (oh, ow)))
        return y

    def backward(self, grad_out):
        x_shape, (oh, ow) = self._take()
        n, c, h, w = x_shape
        k2 = self.kernel_size * self.kernel_size
        g = (grad_out / k2).reshape(n * c, 1, oh * ow)
        cols = np.broadcast_to(g, (n * c, k2, oh * ow))
        grad_in = _col2im(cols, (n * c, 1, h, w), self.kernel_size, self.stride, 0)
        return [], grad_in.reshape(x_shape)

    def clone(self):
        return AvgPool2d(self.kernel_size, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        if train:
            self._store(x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        x_shape = self._take()
        return [], grad_out.reshape(x_shape)

    def clone(self):
        return Flatten()


class L2Norm(Layer):
    """Per-sample L2 normalization over all trailing dims.

    Zero rows map to zero rows (no division), so degenerate inputs never
    produce NaN; their backward gradient is defined as zero.
    """

    kind = "l2norm"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        x2 = x.reshape(x.shape[0], -1)
        norms = np.sqrt((x2 * x2).sum(axis=1, keepdims=True))
        inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0).astype(DTYPE)
        y2 = x2 * inv
        if train:
            self._store((y2, inv, x.shape))
        return y2.reshape(x.shape)

    def backward(self, grad_out):
        y2, inv, x_shape = self._take()
        g2 = grad_out.reshape(grad_out.shape[0], -1)
        dot = (g2 * y2).sum(axis=1, keepdims=True)
        grad_in = (g2 - dot * y2) * inv
        return [], grad_in.reshape(x_shape)

    def clone(self):
        return L2Norm()


class Upsample2d(Layer):
    """Nearest-neighbor spatial upsampling by an integer factor."""

    kind = "upsample2d"

    def __init__(self, factor: int):
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.factor = int(factor)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"upsample2d expects (c, h, w) input, got {in_shape}")
        return (in_shape[0], in_shape[1] * self.factor, in_shape[2] * self.factor)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"upsample2d expects (n, c, h, w) input, got {x.shape}")
        y = np.repeat(np.repeat(x, self.factor, axis=2), self.factor, axis=3)
        if train:
            self._store(x.shape)
        return y

    def backward(self, grad_out):
        n, c, h, w = self._take()
        f = self.factor
        grad_in = grad_out.reshape(n, c, h, f, w, f).sum(axis=(3, 5))
        return [], grad_in.astype(grad_out.dtype)

    def clone(self):
        return Upsample2d(self.factor)


class Reshape(Layer):
    """Per-sample reshape to a fixed target shape (element count preserved)."""

    kind = "reshape"

    def __init__(self, target_shape: tuple[int, ...]):
        self.target_shape = tuple(int(d) for d in target_shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.target_shape)):
            raise ShapeError(
                f"reshape to {self.target_shape} incompatible with input {in_shape}"
            )
        return self.target_shape

    def forward(self, x, train=False):
        if int(np.prod(x.shape[1:])) != int(np.prod(self.target_shape)):
            raise ShapeError(
                f"reshape to {self.target_shape} incompatible with input {x.shape}"
            )
        if train:
            self._store(x.shape)
        return x.reshape((x.shape[0],) + self.target_shape)

    def backward(self, grad_out):
        x_shape = self._take()
        return [], grad_out.reshape(x_shape)

    def clone(self):
        return Reshape(self.target_shape)


# --------------------------------------------------------------------------
# Stack operations
# --------------------------------------------------------------------------


def infer_shapes(stack: list[Layer], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer; raises ConfigError naming
    the offending layer index on mismatch."""
    shapes = []
    shape = tuple(input_shape)
    for idx, layer in enumerate(stack):
        try:
            shape = layer.out_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"layer {idx} ({layer.kind}): {exc}") from exc
        shapes.append(shape)
    return shapes


def forward(stack: list[Layer], x: np.ndarray, train: bool = False) -> np.ndarray:
    """Run the stack on a batch; caches intermediates per layer when ``train``."""
    for idx, layer in enumerate(stack):
        try:
            x = layer.forward(x, train=train)
        except ShapeError as exc:
            raise ConfigError(f"layer {idx} ({layer.kind}): {exc}") from exc
    check_finite(x, "stack output")
    return x


def backward(stack: list[Layer], grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate through a stack after a training-mode forward.

    Returns gradients aligned with :func:`param_arrays` order plus the
    gradient with respect to the stack input (the split-boundary gradient).
    """
    per_layer: list[list[np.ndarray]] = []
    g = grad_out
    for layer in reversed(stack):
        param_grads, g = layer.backward(g)
        per_layer.append(param_grads)
    grads: list[np.ndarray] = []
    for param_grads in reversed(per_layer):
        grads.extend(param_grads)
    check_finite(g, "input gradient")
    return grads, g


def param_arrays(stack: list[Layer]) -> list[np.ndarray]:
    return [p for layer in stack for _, p in layer.param_items()]


def named_params(stack: list[Layer]) -> list[tuple[str, np.ndarray]]:
    return [
        (f"{idx}.{name}", p)
        for idx, layer in enumerate(stack)
        for name, p in layer.param_items()
    ]


def clone_stack(stack: list[Layer]) -> list[Layer]:
    return [layer.clone() for layer in stack]


def param_count(stack: list[Layer]) -> int:
    return sum(p.size for p in param_arrays(stack))


# --------------------------------------------------------------------------
# Optimizers and schedules
# --------------------------------------------------------------------------


def _check_aligned(params, grads, buffers):
    if len(params) != len(grads) or len(params) != len(buffers):
        raise ShapeError("optimizer: params/grads/state length mismatch")
    for p, g, b in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != b.shape:
            raise ShapeError(
                f"optimizer: shape mismatch param {p.shape} grad {g.shape} state {b.shape}"
            )


class SgdMomentum:
    """Classic momentum SGD with weight decay folded into the gradient:

        v <- mu * v + (g + wd * p);  p <- p - lr * v

    ``decay_mask`` selects which parameters receive weight decay
    (default: all of them).
    """

    kind = "sgd-momentum"

    def __init__(self, params: list[np.ndarray], momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_mask: list[bool] | None = None):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p) for p in params]
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(params)
        if len(self.decay_mask) != len(params):
            raise ShapeError("optimizer: decay_mask length mismatch")

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        _check_aligned(params, grads, self.velocity)
        wd = DTYPE(self.weight_decay)
        mu = DTYPE(self.momentum)
        for p, g, v, decay in zip(params, grads, self.velocity, self.decay_mask):
            g = g.astype(DTYPE, copy=False)
            v *= mu
            if self.weight_decay and decay:
                v += g + wd * p
            else:
                v += g
            p -= DTYPE(lr) * v

    def reset(self) -> None:
        for v in self.velocity:
            v.fill(0)


class Adam:
    """Adam with bias correction."""

    kind = "adam"

    def __init__(self, params: list[np.ndarray], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        _check_aligned(params, grads, self.m)
        self.t += 1
        b1, b2 = DTYPE(self.beta1), DTYPE(self.beta2)
        c1 = DTYPE(1.0 - self.beta1 ** self.t)
        c2 = DTYPE(1.0 - self.beta2 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(DTYPE, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p -= DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(self.eps))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------------
# Losses (scalar value plus gradient w.r.t. the prediction)
# --------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(DTYPE)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"xent: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ConfigError("xent: label out of range")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-12)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)
