"""Command-line front end: ``run``, ``monopole-test``, ``ffat`` and ``slice``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import SceneConfig, StageError


def _factors(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad factor list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty factor list")
    return vals


def _load(args) -> SceneConfig:
    config = SceneConfig.load(args.scene)
    if args.oracle:
        config.backend = "oracle"
    return config


def cmd_run(args) -> int:
    config = _load(args)
    result = harness.run(config, args.out, steps=args.steps)
    print(f"{result.steps} steps written to {result.out_dir}")
    for f in result.files:
        print(f"  {f}")
    return 0


def cmd_monopole(args) -> int:
    try:
        report = harness.monopole_test(
            mesh=args.mesh, resolution=args.resolution, frequency=args.freq, factors=args.factors,
            backend="oracle" if args.oracle else "hybrid", face_resolution=args.face_resolution,
            L=args.L, R1=args.R1, R2=args.R2, icosphere_level=args.level,
        )
    except Exception as exc:
        raise StageError("monopole-test", exc) from exc
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "monopole_snr.csv")
    return 0


def cmd_ffat(args) -> int:
    config = _load(args)
    try:
        fmap = harness.ffat_map(config, args.mode)
        files = fmap.write(args.out or config.output_dir, prefix=f"ffat_mode{args.mode}")
    except Exception as exc:
        raise StageError("ffat", exc) from exc
    for f in files:
        print(f)
    return 0


def cmd_slice(args) -> int:
    config = _load(args)
    if config.backend == "oracle":
        raise StageError("slice", ValueError("slices need the grid of the hybrid backend"))
    try:
        scene = harness.build_scene(config)
        backend = harness.make_backend(scene, np.zeros((0, 3)))
        n = args.steps if args.steps is not None else harness._run_steps(scene, config)
        for k in range(n):
            backend.step(scene.neumann(k))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = harness.write_slice(out, backend.grid, args.axis, args.index, f"step{n:06d}")
    except Exception as exc:
        raise StageError("slice", exc) from exc
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bemfdtd", description="Hybrid TDBEM/FDTD acoustic radiation solver")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scene and write listener CSV/WAV and a manifest")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--steps", type=int)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("monopole-test", help="SNR against an analytic monopole on bounding-box shells")
    m.add_argument("--mesh", help="OBJ file; an icosphere is used when omitted")
    m.add_argument("--resolution", type=int, default=32)
    m.add_argument("--freq", type=float, default=1000.0)
    m.add_argument("--factors", type=_factors, default=harness.DEFAULT_FACTORS)
    m.add_argument("--face-resolution", type=int)
    m.add_argument("--level", type=int, default=2, help="icosphere subdivision level")
    m.add_argument("--L", type=int, default=64)
    m.add_argument("--R1", type=int, default=3)
    m.add_argument("--R2", type=int, default=4)
    m.add_argument("--out")
    m.set_defaults(func=cmd_monopole)

    f = sub.add_parser("ffat", help="FFAT map of one vibration mode")
    f.add_argument("--scene", required=True)
    f.add_argument("--mode", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_ffat)

    s = sub.add_parser("slice", help="export a grid slice after marching")
    s.add_argument("--scene", required=True)
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slice)

    for sp in (r, m, f, s):
        sp.add_argument("--oracle", action="store_true", help="use the dense TDBEM backend")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: stage config failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
