"""Command-line entry point: ``sfseg {synth,run,certify,bench}``.

Exit codes: 0 success, 1 numerical failure (certification FAIL, collapsed
iterate, failed benchmark gate), 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bench, oracle, presets
from .engine import SfsegConfig, prepare_features, run, sfseg_step
from .errors import DegenerateSolutionError, SfsegError
from .metrics import TraceRow, angle_degrees, jaccard, trace_to_csv
from .synth import SynthSpec, generate
from .volume import FeatureSet, FeatureVolume, Role, VolumeShape, load_volume, save_volume

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

PRESETS = {
    "denoising": presets.denoising_spec,
    "eigen-recovery": presets.eigen_recovery_spec,
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _triple(kind):
    def parse(text: str):
        parts = text.replace("x", ",").split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _shape(text: str) -> VolumeShape:
    return VolumeShape(*_triple(int)(text))


def _default_threads() -> int:
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    if args.spec and args.preset:
        raise CliError("--spec and --preset are mutually exclusive")
    if args.spec:
        spec = SynthSpec.from_json(Path(args.spec).read_text())
    elif args.preset:
        spec = PRESETS[args.preset]()
    else:
        spec = SynthSpec()
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    features, gt = generate(spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(features.unary, out / "S.sfsv")
    for i, f in enumerate(features.pairwise):
        save_volume(f, out / f"F_{i}.sfsv")
    save_volume(FeatureVolume(np.asarray(gt, dtype=np.float32)), out / "gt.sfsv")
    (out / "spec.json").write_text(spec.to_json() + "\n")
    print(f"wrote {len(features.pairwise) + 2} volumes of shape {tuple(spec.shape)} to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# run

def _load_features(args) -> FeatureSet:
    s = load_volume(args.s, Role.UNARY)
    fs = tuple(load_volume(path, Role.PAIRWISE) for path in args.f)
    return FeatureSet(s, fs)


def _config(args, **extra) -> SfsegConfig:
    kw = dict(
        alpha=args.alpha,
        p=args.p,
        kernel_radii=args.kernel_radii,
        kernel_sigmas=args.kernel_sigmas,
        allow_negative_affinity=args.allow_negative,
        threads=args.threads,
    )
    kw.update(extra)
    return SfsegConfig(**kw)


def cmd_run(args) -> int:
    features = _load_features(args)
    binarize_start = args.binarize_start if args.binarize_start > 0 else args.iters + 1
    cfg = _config(
        args,
        iterations=args.iters,
        binarize_start=binarize_start,
        sigmoid_slope0=args.slope0,
        slope_growth=args.slope_growth,
        threshold_frac=args.threshold_frac,
        final_threshold=args.final_threshold,
    )
    x0 = load_volume(args.x0, Role.SOLUTION) if args.x0 else None
    gt = np.asarray(load_volume(args.gt)) > 0.5 if args.gt else None
    ref = np.asarray(load_volume(args.reference)) if args.reference else None

    soft, mask, trace = run(features, X0=x0, cfg=cfg, reference=ref, ground_truth=gt)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(FeatureVolume(soft, Role.SOLUTION), out / "soft.sfsv")
    save_volume(FeatureVolume(np.asarray(mask, dtype=np.float32)), out / "mask.sfsv")
    if args.trace:
        rows = [TraceRow(r.iteration, r.angle_to_reference_deg, r.iou_to_ground_truth) for r in trace.records]
        trace_to_csv(rows, args.trace)

    print(f"{cfg.iterations} iterations, {mask.count()} foreground voxels")
    if gt is not None:
        print(f"IoU vs ground truth: {jaccard(mask, gt):.6f}")
    if ref is not None:
        print(f"angle to reference: {trace.records[-1].angle_to_reference_deg:.6f} deg")
    return EXIT_OK


# --------------------------------------------------------------------------
# certify

def certify(features: FeatureSet, cfg: SfsegConfig, tol: float = 1e-4, angle_tol: float = 1.0,
            iters: int = 100, kernel_scale: float = 1.0, seed: int = 0) -> dict:
    """Compare the engine against the explicit Taylor matrix.

    ``kernel_scale`` multiplies the oracle's kernel weights only, which
    breaks the agreement on purpose (a negative control).
    """
    features = prepare_features(features, cfg)
    m = oracle.engine_operator(features, cfg, cfg.kernel.scaled(kernel_scale))
    s = np.asarray(features.unary, dtype=np.float32)
    probes = [s, np.random.default_rng(seed).random(s.shape, dtype=np.float32)]
    diff = max(float(np.max(np.abs(sfseg_step(x, features, cfg).ravel() - oracle.matvec(m, x)))) for x in probes)

    start = probes[0] if np.any(probes[0]) else probes[1]
    ref = oracle.dominant_eigenvector(m, start)
    engine_cfg = cfg.with_(iterations=iters, binarize_start=iters + 1)
    soft, _, _ = run(features, X0=start, cfg=engine_cfg)
    angle = angle_degrees(soft, ref)
    angle = min(angle, 180.0 - angle)  # eigenvectors are defined up to sign
    return {
        "nodes": int(s.size),
        "max_matvec_diff": diff,
        "tol": tol,
        "angle_deg": angle,
        "angle_tol": angle_tol,
        "iterations": iters,
        "passed": diff <= tol and angle < angle_tol,
    }


def cmd_certify(args) -> int:
    features = _load_features(args)
    cfg = _config(args)
    report = certify(features, cfg, args.tol, args.angle_tol, args.iters, args.oracle_kernel_scale)
    print(f"nodes: {report['nodes']}")
    print(f"max matvec diff: {report['max_matvec_diff']:.3e} (tol {report['tol']:g})")
    print(f"eigenvector angle after {report['iterations']} iterations: "
          f"{report['angle_deg']:.6f} deg (tol {report['angle_tol']:g})")
    print("PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


# --------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    cfg = SfsegConfig(threads=args.threads)
    log = lambda msg: print(f"notice: {msg}", file=sys.stderr)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", bench.BenchWarning)
        records = bench.run_scaling_benchmark(
            args.sizes, iters=args.iters, warmup=args.warmup, repeats=args.repeats,
            modes=args.modes, cfg=cfg, gate=not args.no_gate, log=log,
            max_oracle_nodes=args.max_oracle_nodes,
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = bench.records_to_csv(records, args.out)
    if not args.out:
        sys.stdout.write(text)
    else:
        print(f"wrote {len(records)} records to {args.out}")
    if args.separability:
        for method in ("band", "taps"):
            r = bench.time_separability(tuple(args.separability), method=method)
            print(f"separable[{method}] {r.separable_s:.4g}s vs direct {r.direct_s:.4g}s "
                  f"speedup {r.speedup:.1f}x (tap ratio {r.tap_ratio:.2f}, max diff {r.max_abs_diff:.2e})")
    return EXIT_OK


# --------------------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--s", required=True, help="unary map S (SFSV)")
    p.add_argument("--f", required=True, nargs="+", help="pairwise feature channel(s) F (SFSV)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--p", type=float, default=0.1, help="unary exponent (0.2 for semi-supervised inputs)")
    p.add_argument("--kernel-radii", type=_triple(int), default=(1, 3, 3), metavar="T,Y,X")
    p.add_argument("--kernel-sigmas", type=_triple(float), default=(0.5, 1.5, 1.5), metavar="T,Y,X")
    p.add_argument("--allow-negative", action="store_true", help="disable the nonnegative-affinity guard")
    p.add_argument("--threads", type=int, default=_default_threads())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfseg", description="Matrix-free spectral video segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic instance")
    p.add_argument("--spec", help="JSON instance description")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="segment a volume")
    _add_model_args(p)
    p.add_argument("--x0", help="initial solution (defaults to S)")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--binarize-start", type=int, default=3, help="first projected iteration; 0 disables")
    p.add_argument("--slope0", type=float, default=10.0)
    p.add_argument("--slope-growth", type=float, default=2.0)
    p.add_argument("--threshold-frac", type=float, default=0.5)
    p.add_argument("--final-threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write a per-iteration CSV here")
    p.add_argument("--gt", help="ground-truth mask for IoU")
    p.add_argument("--reference", help="reference eigenvector for the angle column")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("certify", help="check the engine against the explicit matrix")
    _add_model_args(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--angle-tol", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--oracle-kernel-scale", type=float, default=1.0,
                   help="scale the oracle kernel weights (not 1 = negative control)")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("bench", help="time exact, taylor and conv modes")
    p.add_argument("--sizes", type=_shape, nargs="+", default=list(bench.DEFAULT_SIZES), metavar="FxHxW")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--modes", nargs="+", choices=bench.MODES, default=list(bench.MODES))
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--no-gate", action="store_true", help="skip the correctness gate")
    p.add_argument("--max-oracle-nodes", type=int, default=oracle.MAX_NODES,
                   help="skip exact/taylor modes above this many nodes")
    p.add_argument("--separability", type=_shape, metavar="FxHxW",
                   help="also time separable vs direct filtering at this shape")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DegenerateSolutionError, bench.GateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SfsegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
