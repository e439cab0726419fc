"""``revnet`` command-line front end.

Every subcommand prints a plain-text report and exits non-zero when a checked
quantity violates its tolerance.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import kernels as K
from .arch import REFERENCE_COUNTS, build, count_params, reference_match
from .experiments import memory_sweep
from .metrics import rows_to_csv
from .revgrad import fd_floor, grad_check
from .train import TrainConfig, load_config, make_dataset, parse_config, train

GRADCHECK_TOL = 1e-5
ANGLE_LIMIT_DEG = 5.0
FLAT_SLOPE_FRACTION = 0.01
STORED_SLOPE_BAND = 0.20


def _config(args) -> TrainConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set)
    for key in ("engine", "precision", "seed"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = str(v)
    if args.config is None:
        if getattr(args, "preset", None):
            arch = REFERENCE_COUNTS[args.preset][0].to_dict()
            return parse_config("\n".join(f"{k} = {v}" for k, v in arch.items()), overrides)
        raise SystemExit("error: --config FILE is required")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg, args.out)
    print(f"steps={cfg.total_steps} engine={cfg.engine} precision={cfg.precision} "
          f"final_loss={res.losses[-1] if res.losses else float('nan'):.6g} "
          f"train_accuracy={res.final_accuracy:.4f}")
    if res.csv_path:
        print(f"metrics: {res.csv_path}")
    return 0


def cmd_paramcount(args) -> int:
    cfg = _config(args)
    n = count_params(build(cfg.arch))
    match = reference_match(cfg.arch)
    if match is None:
        print(f"params={n} ({n / 1e6:.4f} M) reference=none")
        return 0
    name, ref, tol = match
    dev = (n / 1e6 - ref) / ref
    ok = abs(dev) <= tol
    print(f"params={n} ({n / 1e6:.4f} M) reference={name} {ref} M deviation={dev:+.2%} "
          f"tolerance=±{tol:.0%} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    plan = build(cfg.arch, seed=cfg.seed, dtype=np.float64, zero_last=False)
    ds = make_dataset(cfg)
    idx = np.arange(min(len(ds), max(2, min(cfg.batch_size, 8))))
    x, y = ds.batch(idx, train=False)
    x = x.astype(np.float64)
    _, _, grads = plan.loss_and_grads(x, y, cfg.engine)

    def loss():
        logits, _ = plan.forward(x, "stored")
        return K.softmax_xent(logits, y)[0]

    floor = fd_floor(loss(), 1e-5, GRADCHECK_TOL)
    report = grad_check(loss, plan.param_arrays(), plan.grads_by_name(grads), step=1e-5,
                        max_coords=cfg.gradcheck_coords, rng=np.random.default_rng(cfg.seed),
                        floor=floor)
    ok = report.max_rel_err < GRADCHECK_TOL
    print(f"{report} floor={floor:.2e} tolerance={GRADCHECK_TOL:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_memprofile(args) -> int:
    cfg = _config(args)
    width = cfg.arch.group_width(0)
    c, h, w = cfg.arch.input_shape
    sweep = memory_sweep(depths=(4, 8, 16, 32), channels=width, shape=(width, h, w),
                         batch=min(cfg.batch_size, 4), seed=cfg.seed, dtype=cfg.dtype)
    rows = [(d, "reversible", r) for d, r, _ in sweep.rows()]
    rows += [(d, "stored", s) for d, _, s in sweep.rows()]
    print(rows_to_csv(["depth", "engine", "peak_bytes"], rows), end="")
    flat = abs(sweep.reversible_slope) < FLAT_SLOPE_FRACTION * sweep.block_bytes
    ratio = sweep.stored_slope / sweep.block_bytes
    linear = abs(ratio - 1.0) <= STORED_SLOPE_BAND
    print(f"block_bytes={sweep.block_bytes} reversible_slope={sweep.reversible_slope:.6g} "
          f"stored_slope={sweep.stored_slope:.6g} stored_slope/block={ratio:.4f} "
          f"{'PASS' if flat and linear else 'FAIL'}")
    return 0 if flat and linear else 1


def cmd_anglecheck(args) -> int:
    cfg = _config(args)
    if not cfg.angle_interval:
        cfg.angle_interval = 10
    res = train(cfg, args.out)
    print(rows_to_csv(["step", "angle_deg"], res.angles), end="")
    worst = max((a for _, a in res.angles), default=float("nan"))
    ok = bool(res.angles) and worst < ANGLE_LIMIT_DEG
    print(f"max_angle_deg={worst:.6g} limit={ANGLE_LIMIT_DEG} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "memprofile": cmd_memprofile,
    "paramcount": cmd_paramcount,
    "anglecheck": cmd_anglecheck,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revnet", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", choices=sorted(REFERENCE_COUNTS),
                   help="reference architecture (paramcount)")
    p.add_argument("--engine", choices=["reversible", "stored"])
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for metrics.csv and checkpoints")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
