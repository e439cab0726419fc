"""Residual functions and reversible couplings over channel-partitioned tensors.

A :class:`ResidualFn` is a stack of pre-activation units ``conv(relu(bn(x)))``.
It keeps the batch statistics of its most recent train-mode forward so that a
later reconstruction can replay them and reproduce the forward exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .kernels import BatchStats, KernelParams, ShapeError

AFFINE_CLAMP = 5.0


class ReplayError(RuntimeError):
    """Replay requested but no cached batch statistics exist."""


def he_conv(rng, c_in, c_out, k, stride=1, dtype=np.float64, zero=False, bias=False):
    fan_in = c_in * k * k
    if zero:
        w = np.zeros((c_out, c_in, k, k), dtype=dtype)
    else:
        w = (rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype) if bias else None
    return KernelParams("conv", w, b, stride=stride, padding=k // 2)


def bn_params(c, dtype=np.float64):
    return KernelParams("batchnorm", bias=np.zeros(c, dtype=dtype), gamma=np.ones(c, dtype=dtype))


@dataclass
class Tape:
    """Activations one ResidualFn forward leaves behind for its VJP.

    ``inputs[i]`` is the input of unit i (inputs[0] is the caller's tensor and
    is not owned by the tape); ``acts[i]`` is that unit's relu output.
    """

    inputs: list
    acts: list
    stats: list

    @property
    def nbytes(self) -> int:
        owned = self.inputs[1:] + self.acts
        return sum(a.nbytes for a in owned)


@dataclass
class ResidualFn:
    """``x -> conv_k(relu(bn(x)))`` repeated, one unit per (bn, conv) pair.

    ``params`` alternates batchnorm and conv KernelParams. Two ResidualFn
    objects may share the same KernelParams instances (weight sharing); the
    cached statistics are always per object.
    """

    params: list
    spec: str = "custom"
    cached_stats: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.params) % 2:
            raise ValueError("params must alternate batchnorm and conv")
        for bn, conv in self.units():
            if bn.kind != "batchnorm" or conv.kind != "conv":
                raise ValueError("params must alternate batchnorm and conv")

    def units(self):
        return list(zip(self.params[0::2], self.params[1::2]))

    @property
    def c_in(self) -> int:
        return self.params[0].gamma.shape[0]

    @property
    def c_out(self) -> int:
        return self.params[-1].weight.shape[0]

    @property
    def stride(self) -> int:
        s = 1
        for _, conv in self.units():
            s *= conv.stride
        return s

    @classmethod
    def basic(cls, rng, c_in, c_out=None, stride=1, dtype=np.float64, zero_last=True):
        c_out = c_in if c_out is None else c_out
        params = [bn_params(c_in, dtype), he_conv(rng, c_in, c_out, 3, stride, dtype),
                  bn_params(c_out, dtype), he_conv(rng, c_out, c_out, 3, 1, dtype, zero=zero_last)]
        return cls(params, "basic")

    @classmethod
    def bottleneck(cls, rng, c_in, width, c_out=None, stride=1, dtype=np.float64, zero_last=True):
        """1x1 reduce to ``width``, 3x3 (carrying the stride), 1x1 project to ``c_out``."""
        c_out = c_in if c_out is None else c_out
        params = [bn_params(c_in, dtype), he_conv(rng, c_in, width, 1, 1, dtype),
                  bn_params(width, dtype), he_conv(rng, width, width, 3, stride, dtype),
                  bn_params(width, dtype), he_conv(rng, width, c_out, 1, 1, dtype, zero=zero_last)]
        return cls(params, "bottleneck")

    def forward(self, x, replay: bool = False, record: bool = True):
        """Returns ``(out, tape)``.

        Train mode (``replay=False``) computes fresh batch statistics and, if
        ``record``, caches them for later replay.
        """
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError("residual function input channels", self.c_in, x.shape)
        if replay and self.cached_stats is None:
            raise ReplayError("replay requested before any train-mode forward")
        inputs, acts, stats = [], [], []
        h = x
        for i, (bn, conv) in enumerate(self.units()):
            inputs.append(h)
            pre, st = K.batchnorm(h, bn, self.cached_stats[i] if replay else None)
            a = K.relu(pre)
            del pre
            acts.append(a)
            stats.append(st)
            h = K.conv2d(a, conv)
        if not replay and record:
            self.cached_stats = stats
        return h, Tape(inputs, acts, stats)

    def __call__(self, x, replay: bool = False, record: bool = True):
        return self.forward(x, replay, record)[0]

    def vjp(self, tape: Tape, dy):
        """Returns ``(dx, grads)`` with one dict of arrays per KernelParams."""
        grads = [None] * len(self.params)
        g = dy
        for i in reversed(range(len(tape.acts))):
            bn, conv = self.params[2 * i], self.params[2 * i + 1]
            da, dw, db = K.conv2d_vjp(tape.acts[i], conv, g)
            grads[2 * i + 1] = {"weight": dw} if db is None else {"weight": dw, "bias": db}
            dpre = K.relu_vjp(tape.acts[i], da)
            g, dgamma, dbeta = K.batchnorm_vjp(tape.inputs[i], bn, tape.stats[i], dpre)
            grads[2 * i] = {"gamma": dgamma, "beta": dbeta}
        return g, grads

    def num_params(self) -> int:
        return sum(p.size() for p in self.params)

    def astype(self, dtype) -> "ResidualFn":
        return ResidualFn([p.astype(dtype) for p in self.params], self.spec)

    def share(self) -> "ResidualFn":
        """A new ResidualFn over the same parameter objects."""
        return ResidualFn(self.params, self.spec)


class ZeroFn:
    """F = 0 with no parameters; useful for degenerate-coupling checks."""

    params: list = []
    cached_stats = None

    def __init__(self, channels: int):
        self.c_in = self.c_out = channels

    def forward(self, x, replay=False, record=True):
        return np.zeros_like(x), Tape([x], [], [])

    def __call__(self, x, replay=False, record=True):
        return np.zeros_like(x)

    def vjp(self, tape, dy):
        return np.zeros_like(dy), []

    def num_params(self):
        return 0

    def astype(self, dtype):
        return self

    def share(self):
        return self


def split_channels(x: np.ndarray):
    """First half of the channels, second half. Channel count must be even."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError("channel count (must be even)", "even", c)
    return x[:, : c // 2], x[:, c // 2:]


def merge_channels(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    if x1.shape[0] != x2.shape[0] or x1.shape[2:] != x2.shape[2:]:
        raise ShapeError("merge batch/spatial dims", x1.shape, x2.shape)
    return np.concatenate([x1, x2], axis=1)


@dataclass
class ReversibleBlock:
    """Coupling of two residual functions over channel halves.

    ``coupling`` selects the rule: "additive" (F and G), "nice" (F only) or
    "affine" (F is the log-scale, G the shift).
    """

    f: ResidualFn
    g: ResidualFn | None = None
    coupling: str = "additive"

    def __post_init__(self):
        if self.coupling not in ("additive", "nice", "affine"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.coupling != "nice" and self.g is None:
            raise ValueError(f"{self.coupling} coupling needs both F and G")
        for fn in (self.f, self.g):
            if fn is not None and fn.c_in != fn.c_out:
                raise ShapeError("residual function must preserve channels", fn.c_in, fn.c_out)
            if fn is not None and getattr(fn, "stride", 1) != 1:
                raise ValueError("reversible blocks must have stride 1")

    @property
    def half_channels(self) -> int:
        return self.f.c_in

    @classmethod
    def random(cls, rng, channels, kind="basic", dtype=np.float64, zero_last=False,
               coupling="additive"):
        half = channels // 2
        if channels % 2:
            raise ShapeError("block channels (must be even)", "even", channels)

        def make():
            if kind == "basic":
                return ResidualFn.basic(rng, half, dtype=dtype, zero_last=zero_last)
            return ResidualFn.bottleneck(rng, half, max(1, half // 4), dtype=dtype,
                                         zero_last=zero_last)
        return cls(make(), None if coupling == "nice" else make(), coupling)

    def functions(self):
        return [fn for fn in (self.f, self.g) if fn is not None]

    def params(self):
        return [p for fn in self.functions() for p in fn.params]

    def num_params(self) -> int:
        return sum(fn.num_params() for fn in self.functions())

    def astype(self, dtype) -> "ReversibleBlock":
        return ReversibleBlock(self.f.astype(dtype), None if self.g is None else self.g.astype(dtype),
                               self.coupling)

    def forward(self, x1, x2):
        return couple_forward(self, x1, x2)

    def reverse(self, y1, y2, replay=True):
        return couple_reverse(self, y1, y2, replay)


def _check_halves(block, a, b):
    c = block.half_channels
    if a.shape != b.shape:
        raise ShapeError("coupling halves", a.shape, b.shape)
    if a.ndim != 4 or a.shape[1] != c:
        raise ShapeError("coupling half channels", c, a.shape)


def couple_forward(block: ReversibleBlock, x1, x2):
    """Forward coupling; residual functions run in train mode and cache stats."""
    _check_halves(block, x1, x2)
    if block.coupling == "nice":
        return nice_forward(block.f, x1, x2)
    if block.coupling == "affine":
        return affine_forward(block.f, block.g, x1, x2)
    z1 = x1 + block.f(x2)
    y2 = x2 + block.g(z1)
    return z1, y2


def couple_reverse(block: ReversibleBlock, y1, y2, replay: bool = True):
    """Algebraic inverse of :func:`couple_forward`.

    ``replay=False`` recomputes batch statistics from the reconstructed inputs
    instead of reusing those of the forward pass.
    """
    _check_halves(block, y1, y2)
    if block.coupling == "nice":
        return nice_reverse(block.f, y1, y2, replay)
    if block.coupling == "affine":
        return affine_reverse(block.f, block.g, y1, y2, replay)
    z1 = y1
    x2 = y2 - block.g(z1, replay, record=False)
    x1 = z1 - block.f(x2, replay, record=False)
    return x1, x2


def nice_forward(f, x1, x2):
    if x1.shape[0] != x2.shape[0] or x1.shape[2:] != x2.shape[2:]:
        raise ShapeError("nice halves", x1.shape, x2.shape)
    return x1, x2 + f(x1)


def nice_reverse(f, y1, y2, replay: bool = True):
    if y1.shape[0] != y2.shape[0] or y1.shape[2:] != y2.shape[2:]:
        raise ShapeError("nice halves", y1.shape, y2.shape)
    return y1, y2 - f(y1, replay, record=False)


def _log_scale(f, x1, replay=False, record=True):
    return np.clip(f(x1, replay, record), -AFFINE_CLAMP, AFFINE_CLAMP)


def affine_forward(f, g, x1, x2):
    """``y2 = x2 * exp(clip(F(x1))) + G(x1)``; ``y1 = x1``."""
    if x1.shape[0] != x2.shape[0] or x1.shape[2:] != x2.shape[2:]:
        raise ShapeError("affine halves", x1.shape, x2.shape)
    return x1, x2 * np.exp(_log_scale(f, x1)) + g(x1)


def affine_reverse(f, g, y1, y2, replay: bool = True):
    if y1.shape[0] != y2.shape[0] or y1.shape[2:] != y2.shape[2:]:
        raise ShapeError("affine halves", y1.shape, y2.shape)
    return y1, (y2 - g(y1, replay, record=False)) * np.exp(-_log_scale(f, y1, replay, False))
