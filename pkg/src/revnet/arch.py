"""ResNet / RevNet builders following the CIFAR rows of the architecture table.

Layout of both families::

    stem conv3x3 -> group 1 -> group 2 -> ... -> BN, ReLU, global pool, linear

Each group has ``units[g]`` residual units of width ``channels[g + 1]`` (times
4 for bottleneck units, whose inner width is ``channels[g + 1]``). In a RevNet
the first unit of a group that changes resolution or width is a
*downsampling coupling unit*: the coupling rule with strided F and shortcut
projections on both halves. It cannot be inverted, so its input is saved; the
remaining units of the group form a reversible span.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .coupling import ResidualFn, ReversibleBlock, merge_channels, split_channels
from .kernels import KernelParams, ShapeError
from .metrics import NULL_METER
from .revgrad import (StackCheckpoint, accumulate_grads, stack_backward, stack_forward,
                      stored_backward, stored_forward)


class ArchError(ValueError):
    """Invalid architecture description."""


@dataclass
class ArchSpec:
    family: str = "revnet"
    bottleneck: bool = False
    units: list = field(default_factory=lambda: [1])
    channels: list = field(default_factory=lambda: [4, 4])
    classes: int = 10
    input_shape: tuple = (3, 32, 32)

    def validate(self) -> None:
        if self.family not in ("resnet", "revnet"):
            raise ArchError(f"family must be resnet or revnet, got {self.family!r}")
        if not self.units:
            raise ArchError("at least one group is required")
        if len(self.units) != len(self.channels) - 1:
            raise ArchError(f"{len(self.units)} groups need {len(self.units) + 1} channel "
                            f"widths, got {len(self.channels)}")
        if any(u < 1 for u in self.units):
            raise ArchError(f"every group needs at least one unit: {self.units}")
        if any(c < 1 for c in self.channels) or self.classes < 1:
            raise ArchError("channel widths and class count must be positive")
        if self.family == "revnet":
            odd = [c for c in self.channels[1:] if c % 2]
            if odd:
                raise ArchError(f"revnet group widths must be even, got {odd}")
        c, h, w = self.input_shape
        factor = 2 ** (len(self.units) - 1)
        if h % factor or w % factor:
            raise ArchError(f"input {h}x{w} not divisible by the total stride {factor}")

    def group_width(self, g: int) -> int:
        return self.channels[g + 1] * (4 if self.bottleneck else 1)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "bottleneck": str(self.bottleneck).lower(),
            "units": "-".join(map(str, self.units)),
            "channels": "-".join(map(str, self.channels)),
            "classes": str(self.classes),
            "input_shape": "x".join(map(str, self.input_shape)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        def ints(s, sep):
            return [int(t) for t in str(s).replace(",", sep).split(sep) if t.strip()]
        kw = {}
        if "family" in d:
            kw["family"] = d["family"].strip().lower()
        if "bottleneck" in d:
            kw["bottleneck"] = str(d["bottleneck"]).strip().lower() in ("1", "true", "yes")
        if "units" in d:
            kw["units"] = ints(d["units"], "-")
        if "channels" in d:
            kw["channels"] = ints(d["channels"], "-")
        if "classes" in d:
            kw["classes"] = int(d["classes"])
        if "input_shape" in d:
            kw["input_shape"] = tuple(ints(str(d["input_shape"]).lower(), "x"))
        return cls(**kw)


# CIFAR reference architectures: name -> (spec, published params in millions, tolerance)
REFERENCE_COUNTS = {
    "resnet-32": (ArchSpec("resnet", False, [5, 5, 5], [16, 16, 32, 64]), 0.46, 0.02),
    "revnet-38": (ArchSpec("revnet", False, [3, 3, 3], [32, 32, 64, 112]), 0.46, 0.05),
    "resnet-110": (ArchSpec("resnet", False, [18, 18, 18], [16, 16, 32, 64]), 1.73, 0.02),
    "revnet-110": (ArchSpec("revnet", False, [9, 9, 9], [32, 32, 64, 128]), 1.73, 0.05),
    "resnet-164": (ArchSpec("resnet", True, [18, 18, 18], [16, 16, 32, 64]), 1.70, 0.02),
    "revnet-164": (ArchSpec("revnet", True, [9, 9, 9], [32, 32, 64, 128]), 1.75, 0.05),
}


def reference_match(spec: ArchSpec):
    """The reference architecture with the same family, unit type, units and channels, if any."""
    for name, (ref, params_m, tol) in REFERENCE_COUNTS.items():
        if (ref.family, ref.bottleneck, list(ref.units), list(ref.channels)) == (
                spec.family, spec.bottleneck, list(spec.units), list(spec.channels)):
            return name, params_m, tol
    return None


# --- layers -----------------------------------------------------------------

def _conv_grads(dw, db):
    return {"weight": dw} if db is None else {"weight": dw, "bias": db}


class Shortcut:
    """Identity, or a strided 1x1 projection when width or resolution changes."""

    def __init__(self, rng, c_in, c_out, stride, dtype):
        self.proj = None
        if c_in != c_out or stride != 1:
            w = rng.standard_normal((c_out, c_in, 1, 1)) * np.sqrt(1.0 / c_in)
            self.proj = KernelParams("conv", w.astype(dtype), None, stride=stride, padding=0)

    def params(self):
        return [] if self.proj is None else [self.proj]

    def forward(self, x):
        return x if self.proj is None else K.conv2d(x, self.proj)

    def vjp(self, x, dy):
        if self.proj is None:
            return dy, []
        dx, dw, db = K.conv2d_vjp(x, self.proj, dy)
        return dx, [_conv_grads(dw, db)]


class Stem:
    reversible = False

    def __init__(self, rng, c_in, c_out, dtype):
        w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9))
        self.conv = KernelParams("conv", w.astype(dtype), None, stride=1, padding=1)

    def params(self):
        return [self.conv]

    def forward(self, x, replay=False):
        return K.conv2d(x, self.conv), x

    def vjp(self, tape, dy):
        dx, dw, db = K.conv2d_vjp(tape, self.conv, dy)
        return dx, [_conv_grads(dw, db)]


class ResidualUnit:
    """``y = shortcut(x) + F(x)`` with a pre-activation residual function."""

    reversible = False

    def __init__(self, f: ResidualFn, shortcut: Shortcut):
        self.f = f
        self.shortcut = shortcut

    def params(self):
        return self.f.params + self.shortcut.params()

    def forward(self, x, replay=False):
        out, f_tape = self.f.forward(x, replay=replay)
        return self.shortcut.forward(x) + out, (x, f_tape)

    def vjp(self, tape, dy):
        x, f_tape = tape
        dx, gf = self.f.vjp(f_tape, dy)
        ds, gs = self.shortcut.vjp(x, dy)
        return dx + ds, gf + gs


class DownsampleCoupling:
    """Coupling-shaped unit that changes width and/or resolution.

    ``y1 = S1(x1) + F(x2)``, ``y2 = S2(x2) + G(y1)`` on channel halves, where
    F carries the stride and S1, S2 are shortcut projections. Not invertible,
    so the reversible engine keeps its input.
    """

    reversible = False

    def __init__(self, f, g, s1, s2):
        self.f, self.g, self.s1, self.s2 = f, g, s1, s2

    def params(self):
        return self.f.params + self.g.params + self.s1.params() + self.s2.params()

    def forward(self, x, replay=False):
        x1, x2 = split_channels(x)
        f_out, f_tape = self.f.forward(x2, replay=replay)
        y1 = self.s1.forward(x1) + f_out
        g_out, g_tape = self.g.forward(y1, replay=replay)
        y2 = self.s2.forward(x2) + g_out
        return merge_channels(y1, y2), (x1, x2, f_tape, g_tape)

    def vjp(self, tape, dy):
        x1, x2, f_tape, g_tape = tape
        dy1, dy2 = split_channels(dy)
        dg, gg = self.g.vjp(g_tape, dy2)
        dz1 = dy1 + dg
        df, gf = self.f.vjp(f_tape, dz1)
        ds2, gs2 = self.s2.vjp(x2, dy2)
        ds1, gs1 = self.s1.vjp(x1, dz1)
        return merge_channels(ds1, df + ds2), gf + gg + gs1 + gs2


class Head:
    """BN, ReLU, global average pool, linear."""

    reversible = False

    def __init__(self, rng, c_in, classes, dtype):
        self.bn = KernelParams("batchnorm", bias=np.zeros(c_in, dtype), gamma=np.ones(c_in, dtype))
        w = rng.standard_normal((classes, c_in)) * np.sqrt(1.0 / c_in)
        self.fc = KernelParams("linear", w.astype(dtype), np.zeros(classes, dtype))
        self.cached_stats = None

    def params(self):
        return [self.bn, self.fc]

    def forward(self, x, replay=False):
        pre, st = K.batchnorm(x, self.bn, self.cached_stats if replay else None)
        if not replay:
            self.cached_stats = st
        a = K.relu(pre)
        return K.pool_and_head(a, self.fc), (x, a, st)

    def vjp(self, tape, dy):
        x, a, st = tape
        da, dw, db = K.pool_and_head_vjp(a, self.fc, dy)
        dx, dgamma, dbeta = K.batchnorm_vjp(x, self.bn, st, K.relu_vjp(a, da))
        return dx, [{"gamma": dgamma, "beta": dbeta}, _conv_grads(dw, db)]


# --- network ----------------------------------------------------------------

@dataclass
class ForwardState:
    """Everything a forward pass leaves for the backward pass."""

    engine: str
    saves: dict  # layer index -> saved input (reversible) or full tape (stored)
    spans: dict  # span start -> StackCheckpoint (reversible) or StoredTape (stored)
    checkpoints: list

    def stored_tensor_count(self) -> int:
        saved = sum(1 for v in self.saves.values() if isinstance(v, np.ndarray))
        return saved + 2 * len(self.checkpoints)


@dataclass
class NetworkPlan:
    spec: ArchSpec
    layers: list
    reversible_spans: list  # (start, stop) index ranges into layers
    dtype: type = np.float64

    def params(self) -> list:
        """Unique KernelParams in layer order."""
        seen, out = set(), []
        for layer in self.layers:
            for p in layer.params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def named_params(self) -> list:
        names, out, seen = {}, [], set()
        for i, layer in enumerate(self.layers):
            kind = type(layer).__name__
            for j, p in enumerate(layer.params()):
                if id(p) in seen:
                    continue
                seen.add(id(p))
                out.append((f"{i:03d}.{kind}.{j:02d}.{p.kind}", p))
        return out

    def param_arrays(self) -> list:
        """``(name, array)`` for every trainable array, e.g. ``001.ReversibleBlock.00.batchnorm.gamma``."""
        return [(f"{prefix}.{k}", a) for prefix, p in self.named_params()
                for k, a in p.arrays().items()]

    def grads_by_name(self, grads: dict) -> dict:
        out = {}
        for prefix, p in self.named_params():
            g = grads[id(p)][1]
            for k in p.arrays():
                out[f"{prefix}.{k}"] = g[k]
        return out

    def num_nonreversible(self) -> int:
        return sum(1 for layer in self.layers if not isinstance(layer, ReversibleBlock))

    def _span_at(self):
        return {start: stop for start, stop in self.reversible_spans}

    def forward(self, x, engine="reversible", meter=NULL_METER):
        """Returns ``(logits, ForwardState)``.

        ``engine="reversible"`` keeps only span boundaries and the inputs of
        non-reversible layers; ``"stored"`` keeps every activation.
        """
        if engine not in ("reversible", "stored"):
            raise ValueError(f"unknown engine {engine!r}")
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError("network input (c, h, w)", tuple(self.spec.input_shape), x.shape[1:])
        spans = self._span_at()
        state = ForwardState(engine, {}, {}, [])
        pending = []
        i, h = 0, x
        while i < len(self.layers):
            if i in spans:
                stop = spans[i]
                blocks = self.layers[i:stop]
                x1, x2 = split_channels(h)
                with meter.scope(f"span{i}/"):
                    if engine == "reversible":
                        ck = stack_forward(blocks, x1, x2, meter)
                        ck.nonreversible_saves = pending
                        pending = []
                        state.spans[i] = ck
                        state.checkpoints.append(ck)
                        h = merge_channels(ck.boundary_y1, ck.boundary_y2)
                    else:
                        tape = stored_forward(blocks, x1, x2, meter)
                        state.spans[i] = tape
                        h = merge_channels(tape.y1, tape.y2)
                i = stop
                continue
            layer = self.layers[i]
            out, tape = layer.forward(h)
            if engine == "reversible":
                state.saves[i] = h
                pending.append((i, h))
                meter.track(f"save{i}", h)
            else:
                state.saves[i] = tape
            h = out
            i += 1
        if pending and state.checkpoints:
            state.checkpoints[-1].nonreversible_saves.extend(pending)
        elif pending:
            state.checkpoints.append(StackCheckpoint(h[:, :0], h[:, :0], pending))
        return h, state

    def backward(self, state: ForwardState, dlogits, replay=True, meter=NULL_METER):
        """Returns ``(dx, grads)`` with ``grads`` keyed by ``id(KernelParams)``."""
        starts = {stop: start for start, stop in self.reversible_spans}
        pairs = []
        g = dlogits
        i = len(self.layers)
        while i > 0:
            if i in starts:
                start = starts[i]
                blocks = self.layers[start:i]
                dy1, dy2 = split_channels(g)
                with meter.scope(f"span{start}/"):
                    if state.engine == "reversible":
                        res = stack_backward(blocks, state.spans[start], dy1, dy2, replay, meter)
                        meter.record_free("h1@0")
                        meter.record_free("h2@0")
                    else:
                        res = stored_backward(blocks, state.spans[start], dy1, dy2, meter)
                        meter.record_free("h1@0")
                        meter.record_free("h2@0")
                    meter.record_free("dh1@0")
                    meter.record_free("dh2@0")
                pairs.extend(res.weight_grads(blocks))
                g = merge_channels(res.dx1, res.dx2)
                i = start
                continue
            i -= 1
            layer = self.layers[i]
            if state.engine == "reversible":
                _, tape = layer.forward(state.saves[i], replay=replay)
                meter.record_free(f"save{i}")
            else:
                tape = state.saves[i]
            g, grads = layer.vjp(tape, g)
            pairs.extend(zip(layer.params(), grads))
        return g, accumulate_grads(pairs)

    def loss_and_grads(self, x, labels, engine="reversible", meter=NULL_METER):
        logits, state = self.forward(x, engine, meter)
        loss, dlogits = K.softmax_xent(logits, labels)
        _, grads = self.backward(state, dlogits, meter=meter)
        return loss, logits, grads

    def astype(self, dtype) -> "NetworkPlan":
        clone = copy.deepcopy(self)
        for p in clone.params():
            for name in ("weight", "bias", "gamma"):
                a = getattr(p, name)
                if a is not None:
                    setattr(p, name, a.astype(dtype))
        clone.dtype = dtype
        return clone


def build(spec: ArchSpec, seed: int = 0, dtype=np.float64, zero_last: bool = True) -> NetworkPlan:
    """Instantiate a network from its declarative description.

    ``zero_last`` zero-initialises the final conv of every residual function so
    that every residual unit and reversible block starts as the identity.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    c_img = spec.input_shape[0]
    layers, spans = [Stem(rng, c_img, spec.channels[0], dtype)], []
    width = spec.channels[0]

    def make_fn(c_in, c_out, inner, stride):
        if spec.bottleneck:
            return ResidualFn.bottleneck(rng, c_in, inner, c_out, stride, dtype, zero_last)
        return ResidualFn.basic(rng, c_in, c_out, stride, dtype, zero_last)

    for g, n_units in enumerate(spec.units):
        out = spec.group_width(g)
        stride = 1 if g == 0 else 2
        inner = spec.channels[g + 1]
        if spec.family == "resnet":
            for u in range(n_units):
                s = stride if u == 0 else 1
                layers.append(ResidualUnit(make_fn(width, out, inner, s),
                                           Shortcut(rng, width, out, s, dtype)))
                width = out
            continue
        half_in, half = width // 2, out // 2
        inner_half = max(1, inner // 2)
        first = 0
        if stride != 1 or width != out:
            if width % 2:
                raise ArchError(f"revnet needs an even width before group {g + 1}, got {width}")
            layers.append(DownsampleCoupling(
                make_fn(half_in, half, inner_half, stride), make_fn(half, half, inner_half, 1),
                Shortcut(rng, half_in, half, stride, dtype), Shortcut(rng, half_in, half, stride, dtype)))
            first = 1
            width = out
        start = len(layers)
        for _ in range(first, n_units):
            layers.append(ReversibleBlock(make_fn(half, half, inner_half, 1),
                                          make_fn(half, half, inner_half, 1)))
        if len(layers) > start:
            spans.append((start, len(layers)))
    layers.append(Head(rng, width, spec.classes, dtype))
    return NetworkPlan(spec, layers, spans, dtype)


def count_params(plan) -> int:
    """Exact number of trainable scalars (weights, biases, gammas, betas)."""
    if plan is None:
        return 0
    return sum(p.size() for p in plan.params())
