"""Measurement routines shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import ReversibleBlock
from .metrics import MemMeter, OpCount, counting, flatten_grads, grad_angle, linear_slope
from .revgrad import (block_activation_bytes, stack_backward, stack_forward, stored_backprop,
                      stored_backward, stored_forward)


def random_stack(depth, channels=8, seed=0, dtype=np.float64, kind="basic", zero_last=False):
    rng = np.random.default_rng(seed)
    return [ReversibleBlock.random(rng, channels, kind, dtype, zero_last) for _ in range(depth)]


def random_halves(shape, seed=0, dtype=np.float64):
    """Two independent standard-normal tensors of ``shape`` (one channel half each)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape).astype(dtype), rng.standard_normal(shape).astype(dtype)


def stack_grad_vector(res) -> np.ndarray:
    parts = [res.dx1, res.dx2]
    for gf, gg in zip(res.dwf, res.dwg):
        for d in gf + gg:
            parts.extend(d.values())
    return flatten_grads(parts)


@dataclass
class SweepResult:
    depths: list
    reversible_peak: list
    stored_peak: list
    block_bytes: int

    @property
    def reversible_slope(self) -> float:
        return linear_slope(self.depths, self.reversible_peak)

    @property
    def stored_slope(self) -> float:
        return linear_slope(self.depths, self.stored_peak)

    def rows(self):
        for d, r, s in zip(self.depths, self.reversible_peak, self.stored_peak):
            yield d, r, s


def memory_sweep(depths=(4, 8, 16, 32), channels=8, shape=(4, 8, 8), batch=2, seed=0,
                 dtype=np.float64) -> SweepResult:
    """Peak metered activation bytes of one forward+backward through a span."""
    half = (batch, channels // 2) + tuple(shape[1:])
    rev, sto = [], []
    block_bytes = None
    for depth in depths:
        blocks = random_stack(depth, channels, seed, dtype)
        x1, x2 = random_halves(half, seed + 1, dtype)
        dy1, dy2 = random_halves(half, seed + 2, dtype)
        if block_bytes is None:
            block_bytes = block_activation_bytes(blocks[0], x1, x2)
        m = MemMeter()
        ck = stack_forward(blocks, x1, x2, m)
        stack_backward(blocks, ck, dy1, dy2, meter=m)
        rev.append(m.peak_bytes)
        m = MemMeter()
        stored_backprop(blocks, x1, x2, dy1, dy2, m)
        sto.append(m.peak_bytes)
    return SweepResult(list(depths), rev, sto, block_bytes)


def cost_counts(depth=8, channels=8, shape=(2, 8, 8, 8), seed=0):
    """Madd tallies of stored and reversible backprop over one random stack.

    ``shape`` is (batch, channels, h, w) of the merged input. Returns
    ``(stored, reversible)`` OpCounts.
    """
    blocks = random_stack(depth, channels, seed)
    half = (shape[0], channels // 2) + tuple(shape[2:])
    x1, x2 = random_halves(half, seed + 1)
    dy1, dy2 = random_halves(half, seed + 2)
    stored = OpCount()
    with counting(stored):
        tape = stored_forward(blocks, x1, x2)
        with stored.in_phase("backward"):
            stored_backward(blocks, tape, dy1, dy2)
    rev = OpCount()
    with counting(rev):
        ck = stack_forward(blocks, x1, x2)
        with rev.in_phase("backward"):
            stack_backward(blocks, ck, dy1, dy2)
    return stored, rev


def f32_angles(depth=16, channels=8, shape=(4, 8, 8), batch=4, seed=0, zero_last=False):
    """Angles against f64 stored gradients for f32 reversible and f32 stored backprop.

    Returns ``(reversible_f32, stored_f32)`` AngleReports.
    """
    blocks64 = random_stack(depth, channels, seed, np.float64, zero_last=zero_last)
    blocks32 = [b.astype(np.float32) for b in blocks64]
    half = (batch, channels // 2) + tuple(shape[1:])
    x1, x2 = random_halves(half, seed + 1)
    dy1, dy2 = random_halves(half, seed + 2)
    ref = stack_grad_vector(stored_backprop(blocks64, x1, x2, dy1, dy2))
    f32 = [a.astype(np.float32) for a in (x1, x2, dy1, dy2)]
    sto32 = stack_grad_vector(stored_backprop(blocks32, *f32))
    ck = stack_forward(blocks32, f32[0], f32[1])
    rev32 = stack_grad_vector(stack_backward(blocks32, ck, f32[2], f32[3]))
    return grad_angle(rev32, ref), grad_angle(sto32, ref)
