"""Command line driver: synth, infer, train, eval, shift.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing inputs).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .fusion import fuse, refine
from .lightfield import DisparityMap, extract_cross, load_scene, read_config, read_pfm, save_image, save_scene, write_pfm
from .losses import TargetSpec
from .metrics import evaluate, format_table, write_report
from .network import NetConfig, load_checkpoint, load_config
from .pipeline import predict_volumes
from .shift import MAX_SWEEP, SweepRange, shift_cross
from .synth import format_scene_spec, parse_scene_spec, render, two_plane_spec
from .training import AugmentConfig, Scene, TrainConfig, train, write_trace

log = logging.getLogger("epishift")


class UsageError(Exception):
    pass


def _existing(path: str, kind: str = "file") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "directory" else p.exists()
    if not ok:
        raise UsageError(f"{path}: no such {kind}")
    return p


# ---------------------------------------------------------------------------
# Training configuration: one key=value file plus overrides, overrides win

NET_KEYS = {"feat_channels": int, "feat_blocks": int, "unet_depth": int, "unet_base_channels": int}
TRAIN_KEYS = {"lr_phase1": float, "iters_phase1": int, "lr_phase2": float, "iters_phase2": int, "patch": int,
              "shifts_per_batch": int, "seed": int, "prefetch": int}
TARGET_KEYS = {"target_kind": str, "eps_class": float, "eps_reg": float, "alpha": float, "weight_floor": float}
AUGMENT_KEYS = {"color": "bool", "brightness": float, "contrast": float, "rotate": "bool",
                "scale_min": float, "scale_max": float}
SWEEP_KEYS = {"range_min": float, "range_max": float}
ALL_KEYS = {**NET_KEYS, **TRAIN_KEYS, **TARGET_KEYS, **AUGMENT_KEYS, **SWEEP_KEYS, "augment": "bool"}

# desk-scale defaults; a config file only needs the keys it changes
DESK_DEFAULTS = {
    "feat_channels": "16", "feat_blocks": "4", "unet_depth": "2", "unet_base_channels": "16",
    "lr_phase1": "3e-3", "iters_phase1": "400", "lr_phase2": "3e-4", "iters_phase2": "100",
    "patch": "64", "shifts_per_batch": "7", "seed": "0", "prefetch": "2",
    "target_kind": "rectangle", "eps_class": "0.17", "eps_reg": "0.25", "alpha": "2.5", "weight_floor": "0.0",
    "augment": "false",
}


def _convert(key: str, value: str):
    kind = ALL_KEYS.get(key)
    if kind is None:
        raise UsageError(f"unknown config key {key!r}")
    if kind == "bool":
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None


def resolve_config(path: str | None, overrides: list[str], seed: int | None):
    """Merge defaults, the config file and ``key=value`` overrides into typed configs."""
    entries = dict(DESK_DEFAULTS)
    if path is not None:
        entries.update(read_config(_existing(path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (t.strip() for t in item.split("=", 1))
        entries[key] = value
    if seed is not None:
        entries["seed"] = str(seed)
    typed = {k: _convert(k, v) for k, v in entries.items()}

    spec = TargetSpec(kind=typed["target_kind"], eps_class=typed["eps_class"], eps_reg=typed["eps_reg"],
                      alpha=typed["alpha"], weight_floor=typed["weight_floor"])
    if typed["augment"]:
        aug = AugmentConfig()
        fields = {k: typed[k] for k in ("color", "brightness", "contrast", "rotate") if k in typed}
        lo, hi = typed.get("scale_min", aug.scale_range[0]), typed.get("scale_max", aug.scale_range[1])
        aug = replace(aug, scale_range=(lo, hi), **fields)
    else:
        aug = AugmentConfig.none()
    tcfg = TrainConfig(**{k: typed[k] for k in TRAIN_KEYS}, target_spec=spec, augment=aug)
    net = {k: typed[k] for k in NET_KEYS}
    sweep = (typed.get("range_min"), typed.get("range_max"))
    return net, tcfg, sweep


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    if args.two_plane:
        rng = np.random.default_rng(0 if args.seed is None else args.seed)
        spec = two_plane_spec(rng, disp_range=tuple(args.disp_range), size=(args.size, args.size), grid=args.grid,
                              integer=args.integer)
    else:
        if args.spec is None:
            raise UsageError("synth needs a spec file or --two-plane")
        spec = parse_scene_spec(_existing(args.spec).read_text())
    lf, gt = render(spec)
    save_scene(args.out_dir, lf, gt)
    (Path(args.out_dir) / "scene.spec").write_text(format_scene_spec(spec))
    log.info("wrote %d views to %s", lf.nu * lf.nv, args.out_dir)
    return 0


def _sweep_for(lf, bounds) -> SweepRange:
    if bounds is None:
        return SweepRange.from_disparity(lf.disp_min, lf.disp_max)
    lo, hi = bounds
    if lo > hi:
        raise UsageError(f"--range {lo} {hi}: lower bound above upper bound")
    return SweepRange(lo, hi)


def cmd_infer(args) -> int:
    lf, gt = load_scene(_existing(args.scene_dir, "directory"))
    config = load_config(_existing(args.checkpoint, "directory"))
    if config.n_views != lf.nu or config.n_views != lf.nv:
        raise ValueError(f"checkpoint expects {config.n_views} views per stack, scene has {lf.nu}x{lf.nv}")
    net = load_checkpoint(args.checkpoint, config)
    sweep = _sweep_for(lf, args.range)
    if len(sweep) > args.max_shifts:
        raise ValueError(f"range [{sweep.s_min}, {sweep.s_max}] needs {len(sweep)} shifts, above --max-shifts {args.max_shifts}")
    timings: list = []
    vol = predict_volumes(net, extract_cross(lf), sweep, args.max_shifts, timings=timings, workers=args.workers)
    log.info("%d shifts, %.3f s network time", len(timings), sum(t for _, t in timings))
    if args.refine is not None:
        t, k = args.refine
        if not float(k).is_integer():
            raise UsageError("--refine kernel size must be an integer")
        vol = refine(vol, t, int(k))
    pred = fuse(vol)
    write_pfm(args.out_pfm, pred.values)
    if gt is not None:
        rows = evaluate(pred, gt, tau=args.tau)
        print(format_table(rows))
        write_report(Path(args.out_pfm).with_suffix(".csv"), rows)
    return 0


def _read_scene_list(path: str) -> list[Path]:
    base = _existing(path).parent
    dirs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            dirs.append(p if p.is_absolute() else base / p)
    if not dirs:
        raise UsageError(f"{path}: no scenes listed")
    return dirs


def cmd_train(args) -> int:
    net_keys, tcfg, (rmin, rmax) = resolve_config(args.config, args.set or [], args.seed)
    scenes = []
    for d in _read_scene_list(args.scene_list):  # load everything before the first step
        lf, gt = load_scene(d)
        if gt is None:
            raise ValueError(f"{d}: scene has no ground truth")
        sweep = SweepRange.from_disparity(lf.disp_min if rmin is None else rmin, lf.disp_max if rmax is None else rmax)
        scenes.append(Scene(extract_cross(lf), gt, sweep))
    grids = {(len(s.cross.horizontal), len(s.cross.vertical)) for s in scenes}
    nu, nv = grids.pop()
    if grids or nu != nv:
        raise ValueError("scenes must share one square view grid")
    net_config = NetConfig(n_views=nu, **net_keys)
    out = Path(args.out_checkpoint)
    net, trace = train(scenes, net_config, tcfg, iterations=args.iterations, checkpoint_path=out)
    write_trace(out / "loss.csv", trace)
    if trace:
        log.info("trained %d iterations, final total loss %.5f", len(trace), trace[-1][3])
    return 0


def cmd_eval(args) -> int:
    pred = read_pfm(_existing(args.pred_pfm))
    gt = read_pfm(_existing(args.gt_pfm))
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    rows = evaluate(DisparityMap(pred), DisparityMap(gt), tau=args.tau)
    print(format_table(rows))
    if args.report:
        write_report(args.report, rows)
    return 0


def cmd_shift(args) -> int:
    lf, _ = load_scene(_existing(args.scene_dir, "directory"))
    cross = extract_cross(lf)
    st = shift_cross(cross, args.s)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    center = cross.center_view
    for name, stack in (("horizontal", st.stack.horizontal), ("vertical", st.stack.vertical)):
        for i, view in enumerate(stack):
            save_image(out / f"{name}_{i:02d}.png", view)
            # difference to the center view inside the valid mask, exact in PFM
            write_pfm(out / f"{name}_{i:02d}_diff.pfm", np.where(st.valid, np.abs(view - center).max(axis=-1), 0.0))
    save_image(out / "valid.png", st.valid.astype(np.float32))
    log.info("shift %d: %d of %d pixels valid", args.s, int(st.valid.sum()), st.valid.size)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epishift", description="Wide-baseline light field disparity by EPI shifting.")
    p.add_argument("--seed", type=int, default=None, help="seed for every random draw (default: config or 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene directory")
    s.add_argument("spec", nargs="?", help="scene spec file")
    s.add_argument("out_dir")
    s.add_argument("--two-plane", action="store_true", help="draw a random background plane plus box instead")
    s.add_argument("--disp-range", type=float, nargs=2, default=(-2.0, 2.0), metavar=("MIN", "MAX"))
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--grid", type=int, default=9)
    s.add_argument("--integer", action="store_true", help="integer plane disparities")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("infer", help="estimate disparity for a scene")
    s.add_argument("scene_dir")
    s.add_argument("checkpoint")
    s.add_argument("out_pfm")
    s.add_argument("--range", type=int, nargs=2, metavar=("S_MIN", "S_MAX"))
    s.add_argument("--refine", type=float, nargs=2, metavar=("T", "K"))
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--workers", type=int, default=None, help="threads for the per-shift fan-out")
    s.add_argument("--max-shifts", type=int, default=MAX_SWEEP)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train", help="train a network on scenes with ground truth")
    s.add_argument("scene_list", help="text file, one scene directory per line")
    s.add_argument("config", nargs="?", help="key=value training config")
    s.add_argument("out_checkpoint")
    s.add_argument("--iterations", type=int, default=None, help="stop after this many iterations")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="compare a disparity PFM against ground truth")
    s.add_argument("pred_pfm")
    s.add_argument("gt_pfm")
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--report", help="CSV output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("shift", help="write shifted stacks and the valid mask as images")
    s.add_argument("scene_dir")
    s.add_argument("s", type=int)
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_shift)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)
    if args.command == "train" and args.iterations is not None and args.iterations < 0:
        parser.print_usage(sys.stderr)
        print("epishift: error: --iterations must be non-negative", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"epishift: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"epishift: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
