"""Backpropagation through reversible stacks without stored activations.

Two engines share one interface:

* ``stack_forward`` / ``stack_backward`` keep only the stack's output and
  rebuild each block's inputs from its outputs while walking backwards.
* ``stored_forward`` / ``stored_backward`` keep every intermediate activation;
  they are the correctness oracle and the memory baseline.

Both report activation lifetimes to an optional :class:`~revnet.metrics.MemMeter`.
Tags are ``h1@i``/``h2@i`` for the halves entering block i, ``dh1@i``/``dh2@i``
for their gradients, and ``F@i``/``G@i`` for residual-function tapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import ReversibleBlock
from .metrics import NULL_METER


@dataclass
class GradBundle:
    dx1: np.ndarray
    dx2: np.ndarray
    dwf: list
    dwg: list


@dataclass
class StackCheckpoint:
    """What a reversible span keeps after its forward pass."""

    boundary_y1: np.ndarray
    boundary_y2: np.ndarray
    nonreversible_saves: list = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return (self.boundary_y1.nbytes + self.boundary_y2.nbytes
                + sum(t.nbytes for _, t in self.nonreversible_saves))


@dataclass
class StackGrads:
    """Inputs of the stack (reconstructed or stored) and all total derivatives."""

    x1: np.ndarray
    x2: np.ndarray
    dx1: np.ndarray
    dx2: np.ndarray
    dwf: list  # per block, ordered like block.f.params
    dwg: list

    def weight_grads(self, blocks):
        """Yield ``(KernelParams, grad dict)`` for every parameter use, in block order."""
        for block, gf, gg in zip(blocks, self.dwf, self.dwg):
            yield from zip(block.f.params, gf)
            if block.g is not None:
                yield from zip(block.g.params, gg)


def _require_additive(block):
    if block.coupling != "additive":
        raise ValueError(f"reversible backprop needs additive coupling, got {block.coupling!r}")


def accumulate_grads(pairs) -> dict:
    """Sum gradient dicts per parameter object (weight sharing safe).

    Returns ``{id(params): (params, {name: array})}`` in first-seen order.
    """
    out = {}
    for p, g in pairs:
        key = id(p)
        if key not in out:
            out[key] = (p, {k: v.copy() for k, v in g.items()})
        else:
            acc = out[key][1]
            for k, v in g.items():
                acc[k] += v
    return out


def block_reverse_backprop(block: ReversibleBlock, y1, y2, dy1, dy2, replay=True,
                           meter=NULL_METER, i=0):
    """Reconstruct a block's inputs from its outputs and backprop through it.

    The residual-function activations produced while reconstructing are
    reused for the VJPs, so each function is evaluated once here.
    Returns ``(x1, x2, GradBundle)``.
    """
    _require_additive(block)
    z1 = y1
    g_out, g_tape = block.g.forward(z1, replay=replay, record=False)
    meter.track(f"G@{i}", g_out, *g_tape.inputs[1:], *g_tape.acts)
    x2 = y2 - g_out
    del g_out
    meter.track(f"h2@{i}", x2)
    meter.record_free(f"h2@{i + 1}")
    f_out, f_tape = block.f.forward(x2, replay=replay, record=False)
    meter.track(f"F@{i}", f_out, *f_tape.inputs[1:], *f_tape.acts)
    x1 = z1 - f_out
    del f_out
    meter.track(f"h1@{i}", x1)

    dg, dwg = block.g.vjp(g_tape, dy2)
    del g_tape
    meter.record_free(f"G@{i}")
    meter.record_free(f"h1@{i + 1}")
    dz1 = dy1 + dg
    del dg
    meter.track("dz1", dz1)
    meter.record_free(f"dh1@{i + 1}")
    df, dwf = block.f.vjp(f_tape, dz1)
    del f_tape
    meter.record_free(f"F@{i}")
    dx2 = dy2 + df
    meter.track(f"dh2@{i}", dx2)
    meter.record_free(f"dh2@{i + 1}")
    dx1 = dz1
    meter.record_free("dz1")
    meter.track(f"dh1@{i}", dx1)
    return x1, x2, GradBundle(dx1, dx2, dwf, dwg)


def stack_forward(blocks, x1, x2, meter=NULL_METER) -> StackCheckpoint:
    """Forward through a reversible stack keeping only its output."""
    meter.track("h1@0", x1)
    meter.track("h2@0", x2)
    for i, block in enumerate(blocks):
        _require_additive(block)
        f_out, f_tape = block.f.forward(x2)
        meter.track(f"F@{i}", f_out, *f_tape.inputs[1:], *f_tape.acts)
        del f_tape
        z1 = x1 + f_out
        del f_out
        meter.record_free(f"F@{i}")
        meter.track(f"h1@{i + 1}", z1)
        g_out, g_tape = block.g.forward(z1)
        meter.track(f"G@{i}", g_out, *g_tape.inputs[1:], *g_tape.acts)
        del g_tape
        y2 = x2 + g_out
        del g_out
        meter.record_free(f"G@{i}")
        meter.track(f"h2@{i + 1}", y2)
        meter.record_free(f"h1@{i}")
        meter.record_free(f"h2@{i}")
        x1, x2 = z1, y2
    return StackCheckpoint(x1, x2)


def stack_backward(blocks, checkpoint: StackCheckpoint, dy1, dy2, replay=True,
                   meter=NULL_METER) -> StackGrads:
    """Apply :func:`block_reverse_backprop` from the last block to the first."""
    n = len(blocks)
    y1, y2 = checkpoint.boundary_y1, checkpoint.boundary_y2
    meter.track(f"dh1@{n}", dy1)
    meter.track(f"dh2@{n}", dy2)
    dwf, dwg = [None] * n, [None] * n
    for i in reversed(range(n)):
        y1, y2, gb = block_reverse_backprop(blocks[i], y1, y2, dy1, dy2, replay, meter, i)
        dy1, dy2 = gb.dx1, gb.dx2
        dwf[i], dwg[i] = gb.dwf, gb.dwg
    return StackGrads(y1, y2, dy1, dy2, dwf, dwg)


@dataclass
class StoredTape:
    x1: np.ndarray
    x2: np.ndarray
    # per block: (x1, x2, z1, f_tape, g_tape)
    records: list
    y1: np.ndarray
    y2: np.ndarray


def stored_forward(blocks, x1, x2, meter=NULL_METER) -> StoredTape:
    """Forward through the stack keeping every intermediate activation."""
    meter.track("h1@0", x1)
    meter.track("h2@0", x2)
    x1_0, x2_0 = x1, x2
    records = []
    for i, block in enumerate(blocks):
        _require_additive(block)
        f_out, f_tape = block.f.forward(x2)
        meter.track(f"F@{i}", *f_tape.inputs[1:], *f_tape.acts)
        z1 = x1 + f_out
        del f_out
        meter.track(f"h1@{i + 1}", z1)
        g_out, g_tape = block.g.forward(z1)
        meter.track(f"G@{i}", *g_tape.inputs[1:], *g_tape.acts)
        y2 = x2 + g_out
        del g_out
        meter.track(f"h2@{i + 1}", y2)
        records.append((f_tape, g_tape))
        x1, x2 = z1, y2
    return StoredTape(x1_0, x2_0, records, x1, x2)


def stored_backward(blocks, tape: StoredTape, dy1, dy2, meter=NULL_METER) -> StackGrads:
    """Ordinary backprop over the stored tape, in reverse topological order."""
    n = len(blocks)
    meter.track(f"dh1@{n}", dy1)
    meter.track(f"dh2@{n}", dy2)
    dwf, dwg = [None] * n, [None] * n
    for i in reversed(range(n)):
        f_tape, g_tape = tape.records[i]
        tape.records[i] = None
        dg, dwg[i] = blocks[i].g.vjp(g_tape, dy2)
        del g_tape
        meter.record_free(f"G@{i}")
        dz1 = dy1 + dg
        del dg
        meter.record_free(f"h2@{i + 1}")
        meter.record_free(f"dh1@{i + 1}")
        meter.track(f"dh1@{i}", dz1)
        df, dwf[i] = blocks[i].f.vjp(f_tape, dz1)
        del f_tape
        meter.record_free(f"F@{i}")
        meter.record_free(f"h1@{i + 1}")
        dx2 = dy2 + df
        meter.record_free(f"dh2@{i + 1}")
        meter.track(f"dh2@{i}", dx2)
        dy1, dy2 = dz1, dx2
    return StackGrads(tape.x1, tape.x2, dy1, dy2, dwf, dwg)


def stored_backprop(blocks, x1, x2, dy1, dy2, meter=NULL_METER) -> StackGrads:
    """Forward with full storage, then ordinary backprop."""
    tape = stored_forward(blocks, x1, x2, meter)
    return stored_backward(blocks, tape, dy1, dy2, meter)


def block_activation_bytes(block, x1, x2) -> int:
    """Bytes the stored engine keeps alive per block for inputs shaped like (x1, x2).

    Evaluated once on scratch data: the two residual-function tapes plus the
    block's two output halves.
    """
    f = block.f.astype(x1.dtype)
    g = block.g.astype(x1.dtype)
    f_out, f_tape = f.forward(x2, record=False)
    g_out, g_tape = g.forward(x1 + f_out, record=False)
    return f_tape.nbytes + g_tape.nbytes + x1.nbytes + x2.nbytes


# --- finite-difference oracle ------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def __len__(self):
        return len(self.entries)

    def __str__(self):
        w = self.worst
        if w is None:
            return "gradcheck: no parameters"
        return (f"gradcheck: coords={len(self.entries)} max_rel_err={self.max_rel_err:.3e} "
                f"worst={w.name}{list(w.index)} analytic={w.analytic:.12g} numeric={w.numeric:.12g}")


def rel_err(a, b, floor=1e-8):
    """``|a - b| / max(|a|, |b|, floor)``, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_floor(loss_value, step=1e-5, tol=1e-5) -> float:
    """Relative-error floor set by the resolution of central differences.

    One rounding of the loss perturbs ``(L+ - L-) / 2h`` by about
    ``eps * |L| / h``; gradients smaller than that over ``tol`` cannot be
    resolved to relative ``tol`` at this step.
    """
    return float(np.finfo(np.float64).eps * abs(loss_value) / step / tol)


def grad_check(loss_fn, params, analytic, step=1e-5, max_coords=None, rng=None,
               floor=1e-8) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``params`` is a list of ``(name, array)``; the arrays are perturbed in
    place and restored. ``analytic`` maps each name to its gradient array.
    ``loss_fn()`` must evaluate the scalar loss at the current parameter
    values. With ``max_coords`` set, that many coordinates are sampled
    uniformly without replacement (at least 200 are always checked when
    available).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    coords = []
    for name, arr in params:
        if arr.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters, {name} is {arr.dtype}")
        coords.extend((name, arr, idx) for idx in np.ndindex(arr.shape))
    if max_coords is not None and len(coords) > max(max_coords, 200):
        rng = np.random.default_rng(0) if rng is None else rng
        keep = np.sort(rng.choice(len(coords), size=max(max_coords, 200), replace=False))
        coords = [coords[k] for k in keep]
    entries = []
    for name, arr, idx in coords:
        old = arr[idx]
        arr[idx] = old + step
        lp = loss_fn()
        arr[idx] = old - step
        lm = loss_fn()
        arr[idx] = old
        numeric = (lp - lm) / (2 * step)
        a = float(analytic[name][idx])
        entries.append(GradCheckEntry(name, idx, a, numeric, float(rel_err(a, numeric, floor))))
    return GradCheckReport(entries)
