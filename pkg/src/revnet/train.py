"""Configuration, data, optimisation and the training loop."""
from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels as K
from .arch import ArchSpec, NetworkPlan, build
from .metrics import MemMeter, flatten_grads, grad_angle

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 100
    total_steps: int = 80_000
    decay_steps: list = field(default_factory=lambda: [40_000, 60_000])
    decay_factor: float = 0.1
    seed: int = 0
    precision: str = "f32"
    angle_interval: int = 0  # 0 disables the angle probe
    engine: str = "reversible"
    dataset: str = "synthetic"
    data_path: str = ""
    augment: str = "none"
    synthetic_samples: int = 512
    synthetic_margin: float = 0.5
    log_interval: int = 1
    checkpoint_interval: int = 0
    gradcheck_coords: int = 300

    def validate(self) -> None:
        self.arch.validate()
        if self.lr <= 0 or self.batch_size <= 0:
            raise ConfigError("lr and batch_size must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be non-negative")
        ds = list(self.decay_steps)
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ConfigError(f"decay_steps must be strictly increasing: {ds}")
        if ds and self.total_steps and ds[-1] >= self.total_steps:
            raise ConfigError(f"decay step {ds[-1]} is not before total_steps {self.total_steps}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.engine not in ("reversible", "stored"):
            raise ConfigError(f"engine must be reversible or stored, got {self.engine!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset must be synthetic or cifar10, got {self.dataset!r}")
        if self.augment not in ("none", "crop+flip"):
            raise ConfigError(f"augment must be none or crop+flip, got {self.augment!r}")
        if self.angle_interval < 0 or self.log_interval < 1:
            raise ConfigError("angle_interval must be >= 0 and log_interval >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.arch.to_dict().items()]
        for f in fields(self):
            if f.name == "arch":
                continue
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_ARCH_KEYS = {"family", "bottleneck", "units", "channels", "classes", "input_shape"}


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    raw.update(overrides or {})

    known = {f.name: f for f in fields(TrainConfig)}
    cfg = TrainConfig(arch=ArchSpec.from_dict({k: v for k, v in raw.items() if k in _ARCH_KEYS}))
    for k, v in raw.items():
        if k in _ARCH_KEYS:
            continue
        if k not in known or k == "arch":
            raise ConfigError(f"unknown config key {k!r}")
        default = getattr(cfg, k)
        try:
            if isinstance(default, list):
                val = [int(t) for t in v.replace("-", ",").split(",") if t.strip()]
            elif isinstance(default, bool):
                val = v.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                val = 0 if v.lower() == "off" else int(v)
            elif isinstance(default, float):
                val = float(v)
            else:
                val = v
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
        setattr(cfg, k, val)
    cfg.validate()
    return cfg


def load_config(path, overrides=None) -> TrainConfig:
    return parse_config(Path(path).read_text(), overrides)


# --- optimisation --------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Base rate multiplied by ``decay_factor`` once per decay step reached."""
    n = sum(1 for s in cfg.decay_steps if step >= s)
    return cfg.lr * cfg.decay_factor ** n


def sgd_step(params, grads, velocity, cfg: TrainConfig, step: int):
    """Momentum SGD with L2 weight decay folded into the velocity, in place.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr(step) * v``.
    """
    lr = lr_at(step, cfg)
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise K.ShapeError("sgd param/grad/velocity", p.shape, (g.shape, v.shape))
        v *= cfg.momentum
        v += g
        v += cfg.weight_decay * p
        p -= lr * v
    return params


# --- data ----------------------------------------------------------------------

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w)
    labels: np.ndarray
    source: str = "synthetic"
    augment: str = "none"
    classes: int = 2

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def batch(self, idx, rng=None, train=True):
        """Gather a batch; augmentation only when ``train`` and enabled."""
        x = self.images[idx]
        if train and self.augment == "crop+flip":
            x = crop_flip(x, rng)
        return x, self.labels[idx]


def synthetic_dataset(n: int, shape=(3, 8, 8), classes: int = 2, margin: float = 0.5,
                      seed: int = 0, dtype=np.float64) -> Dataset:
    """Gaussian class-conditional images.

    Class k has mean ``margin * (k - (classes - 1) / 2) * pattern`` where
    ``pattern`` is a seeded +-1 value per channel, constant over space; noise is
    standard normal per pixel.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    pattern = rng.choice([-1.0, 1.0], size=c)[:, None, None] * np.ones((c, h, w))
    labels = rng.integers(0, classes, size=n)
    offsets = margin * (labels - (classes - 1) / 2.0)
    images = offsets[:, None, None, None] * pattern[None] + rng.standard_normal((n, c, h, w))
    return Dataset(images.astype(dtype), labels, "synthetic", classes=classes)


def crop_flip(x, rng, pad=4):
    """Pad by ``pad`` pixels, take a random crop of the original size, flip half."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def read_cifar10_raw(path):
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary batch file."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        whole = len(data) // CIFAR_RECORD
        raise ValueError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                         f"(file size {len(data)} is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: label {labels[bad]} > 9 at byte offset {bad * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def write_cifar10(path, images_u8, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    if images_u8.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"each image needs {CIFAR_RECORD - 1} bytes")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(paths, mean=None, augment="none", dtype=np.float32) -> Dataset:
    """Load one or more CIFAR-10 binary batch files.

    Pixels are scaled to [0, 1] and the mean image is subtracted; pass the
    training set's ``mean`` when loading an evaluation split.
    """
    if isinstance(paths, (str, os.PathLike)):
        p = Path(paths)
        paths = sorted(p.glob("data_batch_*.bin")) if p.is_dir() else [p]
    if not paths:
        raise FileNotFoundError("no CIFAR-10 batch files found")
    parts = [read_cifar10_raw(p) for p in paths]
    images = np.concatenate([im for im, _ in parts]).astype(np.float64) / 255.0
    labels = np.concatenate([lb for _, lb in parts])
    if mean is None:
        mean = images.mean(axis=0)
    ds = Dataset((images - mean).astype(dtype), labels, "cifar10", augment, classes=10)
    ds.mean = mean
    return ds


# --- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"RVNTCKPT"
CKPT_VERSION = 1
_DTYPE_CODE = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, plan: NetworkPlan) -> None:
    """Write every named parameter array; layout documented in the README."""
    arrays = plan.param_arrays()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, a in arrays:
        raw = name.encode()
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", _DTYPE_CODE[a.dtype], a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off, out = 16, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _CODE_DTYPE[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(data[off:off + size], dtype=dt).reshape(shape).copy()
        off += size
    return out


def load_checkpoint(path, plan: NetworkPlan) -> None:
    """Copy checkpoint arrays into ``plan``'s parameters in place."""
    saved = read_checkpoint(path)
    for name, a in plan.param_arrays():
        if name not in saved:
            raise KeyError(f"checkpoint has no parameter {name!r}")
        if saved[name].shape != a.shape:
            raise K.ShapeError(name, a.shape, saved[name].shape)
        a[...] = saved[name]


# --- training loop -------------------------------------------------------------

CSV_HEADER = "step,loss,train_err,angle_deg,peak_bytes\n"


@dataclass
class TrainResult:
    losses: list
    angles: list
    final_accuracy: float
    plan: NetworkPlan
    csv_path: Path | None = None


def make_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.dataset == "cifar10":
        ds = load_cifar10(cfg.data_path, augment=cfg.augment, dtype=cfg.dtype)
        if ds.images.shape[1:] != tuple(cfg.arch.input_shape):
            raise K.ShapeError("dataset image shape", tuple(cfg.arch.input_shape), ds.images.shape[1:])
        return ds
    ds = synthetic_dataset(cfg.synthetic_samples, tuple(cfg.arch.input_shape), cfg.arch.classes,
                           cfg.synthetic_margin, cfg.seed, cfg.dtype)
    ds.augment = cfg.augment
    return ds


def gradient_vector(plan: NetworkPlan, grads: dict) -> np.ndarray:
    return flatten_grads(a for _, p in plan.named_params() for a in grads[id(p)][1].values())


def angle_probe(plan: NetworkPlan, x, labels, run_grads: dict):
    """Angle between ``run_grads`` and stored-activation gradients in f64."""
    ref = plan.astype(np.float64)
    _, _, g64 = ref.loss_and_grads(x.astype(np.float64), labels, "stored")
    return grad_angle(gradient_vector(plan, run_grads), gradient_vector(ref, g64))


def evaluate(plan: NetworkPlan, ds: Dataset, batch_size: int, engine="reversible") -> float:
    """Accuracy over the whole dataset (no augmentation, batch statistics)."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x, y = ds.batch(idx, train=False)
        logits, _ = plan.forward(x, engine)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / max(1, len(ds))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def train(cfg: TrainConfig, out_dir=None, dataset: Dataset | None = None,
          plan: NetworkPlan | None = None) -> TrainResult:
    """Run ``cfg.total_steps`` of momentum SGD; deterministic for a fixed seed."""
    cfg.validate()
    ds = make_dataset(cfg) if dataset is None else dataset
    plan = build(cfg.arch, seed=cfg.seed, dtype=cfg.dtype) if plan is None else plan
    params = [a for _, a in plan.param_arrays()]
    velocity = [np.zeros_like(a) for a in params]
    rng = np.random.default_rng(cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    csv_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "ckpt_000000.bin", plan)
        csv_file = open(out / "metrics.csv", "w", newline="")
        csv_file.write(CSV_HEADER)

    losses, angles = [], []
    order, pos = rng.permutation(len(ds)), 0
    try:
        for step in range(cfg.total_steps):
            if pos + cfg.batch_size > len(ds):
                order, pos = rng.permutation(len(ds)), 0
            idx = order[pos:pos + cfg.batch_size]
            pos += cfg.batch_size
            x, y = ds.batch(idx, rng, train=True)
            logged = (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.total_steps
            meter = MemMeter() if logged else None
            kw = {"meter": meter} if meter is not None else {}
            loss, logits, grads = plan.loss_and_grads(x, y, cfg.engine, **kw)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            losses.append(loss)
            angle = None
            if cfg.angle_interval and (step + 1) % cfg.angle_interval == 0:
                angle = angle_probe(plan, x, y, grads).angle_degrees
                angles.append((step + 1, angle))
            grad_list = [grads[id(p)][1][k] for _, p in plan.named_params() for k in p.arrays()]
            sgd_step(params, grad_list, velocity, cfg, step)
            if logged and csv_file is not None:
                err = float((logits.argmax(axis=1) != y).mean())
                csv_file.write(",".join([str(step + 1), _fmt(loss), _fmt(err), _fmt(angle),
                                         str(meter.peak_bytes)]) + "\n")
            if out is not None and cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"ckpt_{step + 1:06d}.bin", plan)
            if logged:
                log.info("step %d loss %.5f lr %.4g", step + 1, loss, lr_at(step, cfg))
    finally:
        if csv_file is not None:
            csv_file.close()
    if out is not None and cfg.total_steps:
        save_checkpoint(out / f"ckpt_{cfg.total_steps:06d}.bin", plan)
    acc = evaluate(plan, ds, cfg.batch_size, cfg.engine)
    return TrainResult(losses, angles, acc, plan, out / "metrics.csv" if out else None)
