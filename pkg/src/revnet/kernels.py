"""Differentiable primitive kernels over NCHW float arrays.

Tensors are plain ``numpy.ndarray`` values of dtype float32 or float64 in
(batch, channels, height, width) layout. Every kernel is pure (inputs are never
mutated) and comes with a hand-written vector-Jacobian product.

Multiply-add accounting, reported to :func:`revnet.metrics.count_madds`:

* conv2d / linear: exactly one madd per weight application; their VJPs count
  one full pass for the input gradient and one for the weight gradient.
* batchnorm: 1 per element to apply the folded scale/shift, plus 1 per element
  for the variance in train mode; the VJP counts 4 per element.
* relu, pooling, bias and residual additions are additions or comparisons only
  and are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import count_madds

BN_EPS = 1e-5


class ShapeError(ValueError):
    """A tensor dimension does not match what the kernel expects."""

    def __init__(self, what: str, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


@dataclass
class KernelParams:
    """Parameters of one kernel.

    ``kind`` is ``"conv"``, ``"batchnorm"`` or ``"linear"``. Conv weights are
    (c_out, c_in, k, k); linear weights are (c_out, c_in). Batchnorm keeps
    ``gamma`` and uses ``bias`` as beta.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind == "conv":
            if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
                raise ShapeError("conv weight", "(c_out, c_in, k, k)", self.weight.shape)
            if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
                raise ShapeError("conv bias", (self.weight.shape[0],), self.bias.shape)
            if self.stride < 1 or self.padding < 0:
                raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")
        elif self.kind == "linear":
            if self.weight.ndim != 2:
                raise ShapeError("linear weight", "(c_out, c_in)", self.weight.shape)
        elif self.kind == "batchnorm":
            if self.gamma.ndim != 1 or self.bias.shape != self.gamma.shape:
                raise ShapeError("batchnorm gamma/beta", self.gamma.shape, self.bias.shape)
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def beta(self):
        return self.bias

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, in a fixed order."""
        if self.kind == "batchnorm":
            return {"gamma": self.gamma, "beta": self.bias}
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def astype(self, dtype) -> "KernelParams":
        def cast(a):
            return None if a is None else a.astype(dtype)
        return KernelParams(self.kind, cast(self.weight), cast(self.bias), cast(self.gamma),
                            self.stride, self.padding)

    def copy(self) -> "KernelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return (self.gamma if self.kind == "batchnorm" else self.weight).dtype


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = BN_EPS

    def __post_init__(self):
        if np.any(self.var < 0):
            raise ValueError("batch variance must be non-negative")


def _check4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} rank", 4, x.ndim)


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window(xp, kh, kw, ho, wo, s):
    return xp[:, :, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]


def conv2d(x: np.ndarray, p: KernelParams) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation).

    Each output element accumulates ``w * x`` over input channel, kernel row
    and kernel column in that nesting order, starting from zero, and adds the
    bias last. Evaluation order is fixed, so the result is bit-reproducible.
    """
    if p.kind != "conv":
        raise ValueError(f"conv2d needs conv params, got {p.kind!r}")
    _check4(x)
    cout, cin, k, _ = p.weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError("conv input channels", cin, c)
    ho, wo = conv_output_hw(h, w, k, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv output spatial size", ">= 1", (ho, wo))
    xp = _pad(x, p.padding)
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, p.weight))
    wt = p.weight
    for ci in range(cin):
        for kh in range(k):
            for kw in range(k):
                xs = _window(xp[:, ci:ci + 1], kh, kw, ho, wo, p.stride)
                out += wt[:, ci, kh, kw][None, :, None, None] * xs
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    count_madds(n * cout * ho * wo * cin * k * k)
    return out


def conv2d_vjp(x: np.ndarray, p: KernelParams, dy: np.ndarray):
    """Returns (dx, dw, db); ``db`` is None for a bias-free conv."""
    cout, cin, k, _ = p.weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError("conv input channels", cin, c)
    ho, wo = conv_output_hw(h, w, k, p.stride, p.padding)
    if dy.shape != (n, cout, ho, wo):
        raise ShapeError("conv output gradient", (n, cout, ho, wo), dy.shape)
    s, pad = p.stride, p.padding
    xp = _pad(x, pad)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(p.weight)
    for kh in range(k):
        for kw in range(k):
            xs = _window(xp, kh, kw, ho, wo, s)
            dw[:, :, kh, kw] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
            contrib = np.tensordot(dy, p.weight[:, :, kh, kw], axes=([1], [0]))
            _window(dxp, kh, kw, ho, wo, s)[...] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    db = dy.sum(axis=(0, 2, 3)) if p.bias is not None else None
    count_madds(2 * n * cout * ho * wo * cin * k * k)
    return np.ascontiguousarray(dx), dw, db


def batchnorm(x: np.ndarray, p: KernelParams, stats: BatchStats | None = None):
    """Per-channel batch normalization.

    With ``stats=None`` (train mode) the mean and biased variance are taken
    over (n, h, w) and returned; otherwise the supplied stats are replayed.
    Returns ``(y, stats_used)``.
    """
    if p.kind != "batchnorm":
        raise ValueError(f"batchnorm needs batchnorm params, got {p.kind!r}")
    _check4(x)
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError("batchnorm channels", c, p.gamma.shape[0])
    if stats is None:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        stats = BatchStats(mean, var)
        count_madds(x.size)
    elif stats.mean.shape != (c,) or stats.var.shape != (c,):
        raise ShapeError("replayed batch stats channels", c, stats.mean.shape)
    rstd = 1.0 / np.sqrt(stats.var + stats.epsilon)
    y = (x - stats.mean[None, :, None, None]) * (p.gamma * rstd)[None, :, None, None]
    y += p.bias[None, :, None, None]
    count_madds(x.size)
    return y, stats


def batchnorm_vjp(x: np.ndarray, p: KernelParams, stats: BatchStats, dy: np.ndarray):
    """Gradients of train-mode batchnorm at the given stats: (dx, dgamma, dbeta).

    Mean and variance are treated as functions of ``x``.
    """
    if dy.shape != x.shape:
        raise ShapeError("batchnorm output gradient", x.shape, dy.shape)
    if stats.mean.shape != (x.shape[1],):
        raise ShapeError("batch stats channels", x.shape[1], stats.mean.shape)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    rstd = (1.0 / np.sqrt(stats.var + stats.epsilon))[None, :, None, None]
    xhat = (x - stats.mean[None, :, None, None]) * rstd
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    g = p.gamma[None, :, None, None]
    dx = (g * rstd / m) * (m * dy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    count_madds(4 * x.size)
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Masks ``dy`` where ``x <= 0``; the derivative at exactly 0 is 0.

    ``x`` may be the relu input or its output: both give the same mask.
    """
    if dy.shape != x.shape:
        raise ShapeError("relu output gradient", x.shape, dy.shape)
    return np.where(x > 0, dy, np.zeros_like(dy))


def linear(x: np.ndarray, p: KernelParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError("linear input features", p.weight.shape[1], x.shape)
    out = x @ p.weight.T
    if p.bias is not None:
        out = out + p.bias
    count_madds(x.shape[0] * p.weight.size)
    return out


def linear_vjp(x, p: KernelParams, dy):
    if dy.shape != (x.shape[0], p.weight.shape[0]):
        raise ShapeError("linear output gradient", (x.shape[0], p.weight.shape[0]), dy.shape)
    dx = dy @ p.weight
    dw = dy.T @ x
    db = dy.sum(axis=0) if p.bias is not None else None
    count_madds(2 * x.shape[0] * p.weight.size)
    return dx, dw, db


def pool_and_head(x: np.ndarray, p: KernelParams) -> np.ndarray:
    """Global average pool over (h, w) followed by a linear layer."""
    _check4(x)
    if p.kind != "linear":
        raise ValueError(f"head needs linear params, got {p.kind!r}")
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError("head input channels", p.weight.shape[1], x.shape[1])
    return linear(x.mean(axis=(2, 3)), p)


def pool_and_head_vjp(x: np.ndarray, p: KernelParams, dlogits: np.ndarray):
    """Returns (dx, dw, db)."""
    n, c, h, w = x.shape
    dpooled, dw, db = linear_vjp(x.mean(axis=(2, 3)), p, dlogits)
    dx = np.broadcast_to((dpooled / (h * w))[:, :, None, None], x.shape).copy()
    return dx, dw, db


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient ``(softmax - onehot) / n``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("labels", (n,), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits
