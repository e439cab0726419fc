"""Instrumentation: activation-memory metering, multiply-add counting and the
gradient-angle probe.

Everything here is per-run state. A :class:`MemMeter` is handed explicitly to
the engines that should be metered; the madd counter is activated with the
:func:`counting` context manager and is scoped by a ``ContextVar`` so that
independent threads never share a tally.
"""
from __future__ import annotations

import contextlib
import contextvars
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class MeterError(RuntimeError):
    """Unbalanced alloc/free events."""


@dataclass
class MemMeter:
    """Deterministic ledger of live activation bytes.

    Allocations are keyed by tag; a tag may be live at most once. Peak is the
    running maximum of ``live_bytes``, both overall and per tag prefix (the
    part of the tag before the first ``/``).
    """

    live_bytes: int = 0
    peak_bytes: int = 0
    event_log: list = field(default_factory=list)
    _live: dict = field(default_factory=dict, repr=False)
    _scope: str = field(default="", repr=False)
    _tag_peak: dict = field(default_factory=dict, repr=False)

    def record_alloc(self, tag: str, nbytes: int) -> None:
        tag = self._scope + tag
        if nbytes < 0:
            raise MeterError(f"negative allocation for {tag!r}")
        if tag in self._live:
            raise MeterError(f"tag {tag!r} allocated twice without free")
        self._live[tag] = int(nbytes)
        self.live_bytes += int(nbytes)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        group = tag.split("/", 1)[0]
        self._tag_peak[group] = max(self._tag_peak.get(group, 0), self._group_live(group))
        self.event_log.append(("alloc", int(nbytes), tag))

    def record_free(self, tag: str) -> None:
        tag = self._scope + tag
        try:
            nbytes = self._live.pop(tag)
        except KeyError:
            raise MeterError(f"free of tag {tag!r} that is not live (double free?)") from None
        self.live_bytes -= nbytes
        self.event_log.append(("free", nbytes, tag))

    def track(self, tag: str, *arrays) -> None:
        """Allocate ``tag`` with the summed size of ``arrays``."""
        self.record_alloc(tag, sum(a.nbytes for a in arrays if a is not None))

    def is_live(self, tag: str) -> bool:
        return self._scope + tag in self._live

    def _group_live(self, group: str) -> int:
        return sum(v for k, v in self._live.items() if k.split("/", 1)[0] == group)

    @contextlib.contextmanager
    def scope(self, prefix: str):
        """Prefix every tag recorded inside the block with ``prefix``."""
        saved = self._scope
        self._scope = saved + prefix
        try:
            yield self
        finally:
            self._scope = saved

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes

    def breakdown(self) -> dict[str, int]:
        """Peak live bytes per tag group."""
        return dict(self._tag_peak)

    @classmethod
    def replay(cls, events) -> "MemMeter":
        meter = cls()
        for kind, nbytes, tag in events:
            if kind == "alloc":
                meter.record_alloc(tag, nbytes)
            else:
                meter.record_free(tag)
        return meter


class NullMeter:
    """Stand-in when no metering is requested."""

    def record_alloc(self, tag, nbytes):
        pass

    def record_free(self, tag):
        pass

    def track(self, tag, *arrays):
        pass

    def is_live(self, tag):
        return False

    @contextlib.contextmanager
    def scope(self, prefix):
        yield self


NULL_METER = NullMeter()


# --- multiply-add counting -------------------------------------------------

@dataclass
class OpCount:
    forward_madds: int = 0
    backward_madds: int = 0
    phase: str = "forward"

    def add(self, n: int) -> None:
        if self.phase == "forward":
            self.forward_madds += int(n)
        else:
            self.backward_madds += int(n)

    @contextlib.contextmanager
    def in_phase(self, phase: str):
        if phase not in ("forward", "backward"):
            raise ValueError(f"unknown phase {phase!r}")
        saved, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = saved

    @property
    def total(self) -> int:
        return self.forward_madds + self.backward_madds

    def backward_ratio(self) -> float:
        return self.backward_madds / self.forward_madds

    def total_ratio(self) -> float:
        """Total work in units of one forward pass."""
        return self.total / self.forward_madds


_active_count: contextvars.ContextVar[OpCount | None] = contextvars.ContextVar(
    "revnet_madd_counter", default=None
)


@contextlib.contextmanager
def counting(ops: OpCount | None = None):
    """Activate a madd tally for every kernel called inside the block."""
    ops = OpCount() if ops is None else ops
    token = _active_count.set(ops)
    try:
        yield ops
    finally:
        _active_count.reset(token)


def count_madds(n: int) -> None:
    ops = _active_count.get()
    if ops is not None:
        ops.add(n)


# --- gradient angle ----------------------------------------------------------

@dataclass(frozen=True)
class AngleReport:
    angle_degrees: float
    cosine: float
    a_norm: float
    b_norm: float
    undefined: bool = False

    def __str__(self) -> str:
        if self.undefined:
            return f"angle=undefined a_norm={self.a_norm:.6g} b_norm={self.b_norm:.6g}"
        return (f"angle={self.angle_degrees:.6g}deg cos={self.cosine:.17g} "
                f"a_norm={self.a_norm:.6g} b_norm={self.b_norm:.6g}")


def flatten_grads(grads) -> np.ndarray:
    """Concatenate an iterable of arrays into one f64 vector."""
    parts = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def grad_angle(g_a, g_b) -> AngleReport:
    """Angle in degrees between two flattened gradient vectors, computed in f64."""
    a = np.asarray(g_a, dtype=np.float64).ravel()
    b = np.asarray(g_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient lengths differ: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0 or not (math.isfinite(na) and math.isfinite(nb)):
        return AngleReport(math.nan, math.nan, na, nb, undefined=True)
    ua, ub = a / na, b / nb
    cos = min(1.0, max(-1.0, float(np.dot(ua, ub))))
    # arccos is ill-conditioned near 0 and 180 degrees; the half-angle form is not
    angle = 2.0 * math.atan2(float(np.linalg.norm(ua - ub)), float(np.linalg.norm(ua + ub)))
    return AngleReport(math.degrees(angle), cos, na, nb)


def linear_slope(xs, ys) -> float:
    """Least-squares slope of ys against xs."""
    slope, _ = np.polyfit(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), 1)
    return float(slope)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
