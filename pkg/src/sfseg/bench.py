"""Wall-clock comparison of the three ways to run the power iteration.

Modes:

``exact``   explicit sparse matrix with Gaussian feature affinities
``taylor``  explicit sparse matrix with first-order affinities
``conv``    the matrix-free convolutional engine

Oracle modes pay for assembling their matrix; that build time is reported
in its own column and folded into ``total_s``. Before anything is timed, a
correctness gate checks that the convolutional step reproduces the Taylor
matrix product and that both modes segment the instance identically.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import oracle
from .conv3d import convolve_direct, convolve_separable, make_gaussian_kernel
from .engine import SfsegConfig, _step_prepared, normalize_l2, prepare_features, sweep
from .errors import CapacityError
from .metrics import jaccard, threshold_final
from .synth import MovingObject, SynthSpec, generate
from .volume import FeatureSet, VolumeShape

MODES = ("exact", "taylor", "conv")
DEFAULT_SIZES = (VolumeShape(10, 10, 10), VolumeShape(10, 14, 14), VolumeShape(10, 20, 20))
MIN_STABLE_REPEATS = 5
CSV_FIELDS = ("mode", "frames", "height", "width", "nodes", "build_s", "per_iter_s", "total_s", "threads")


class BenchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BenchRecord:
    mode: str
    frames: int
    height: int
    width: int
    nodes: int
    build_s: float
    per_iter_s: float
    total_s: float
    threads: int


@dataclass(frozen=True)
class GateResult:
    shape: VolumeShape
    max_step_error: float
    conv_taylor_iou: float
    exact_taylor_iou: float
    passed: bool


class GateError(RuntimeError):
    """The correctness gate failed, so timings would be meaningless."""


def bench_instance(shape, seed: int = 7) -> FeatureSet:
    """A centred box drifting right, sized to the frame, with 30% flip noise."""
    shape = VolumeShape(*shape)
    f, h, w = shape
    bh, bw = max(1, h // 2), max(1, w // 3)
    drift = 1.0 if w - bw - (w - bw) // 2 >= f else 0.0
    obj = MovingObject("box", (bh, bw), start=((h - bh) / 2, (w - bw) // 2 - drift * (f // 2)), velocity=(0.0, drift))
    features, _ = generate(SynthSpec(shape, obj, "flip", 0.3, seed, 1.0))
    return features


def _engine_loop(features: FeatureSet, cfg: SfsegConfig, x0: np.ndarray, iters: int) -> np.ndarray:
    s = np.asarray(features.unary, dtype=np.float32)
    sp = np.power(s, np.float32(cfg.p))
    channels = [(f, f * f) for f in (np.asarray(p, dtype=np.float32) for p in features.pairwise)]
    x = x0
    workspaces: dict = {}
    with ThreadPoolExecutor(cfg.threads) as pool:
        for _ in range(iters):
            x, _ = normalize_l2(sweep(x, sp, channels, cfg, pool if cfg.threads > 1 else None, workspaces))
    return x


def _oracle_loop(matrix, x0: np.ndarray, iters: int) -> np.ndarray:
    # fixed iteration count: tolerance 0 never triggers the early exit
    x, _, _ = oracle.power_iteration(matrix, x0, max_iters=iters, tol=0.0)
    return x


def correctness_gate(features: FeatureSet, cfg: SfsegConfig, iters: int = 20, tol: float = 1e-4) -> GateResult:
    """Check the convolutional mode against the Taylor matrix before timing.

    Passes when one step matches ``M x / alpha`` within ``tol`` (max abs,
    unit-norm input) and the thresholded iterates after ``iters`` steps are
    identical. Agreement with the exact matrix is reported, not required.
    """
    features = prepare_features(features, cfg)
    s = np.asarray(features.unary, dtype=np.float32)
    x0 = (s / np.linalg.norm(s)).astype(np.float32)
    taylor = oracle.build_affinity_channel_sum(features, cfg).matrix
    exact = oracle.build_affinity_exact(features, cfg).matrix
    sp = np.power(s, np.float32(cfg.p))
    channels = [(f, f * f) for f in (np.asarray(p, dtype=np.float32) for p in features.pairwise)]
    conv_step = _step_prepared(x0, sp, channels, 1.0 / cfg.alpha, cfg.kernel)
    err = float(np.max(np.abs(conv_step.ravel() - oracle.matvec(taylor, x0) / cfg.alpha)))

    thr = cfg.final_threshold
    conv_mask = threshold_final(_engine_loop(features, cfg, x0, iters), thr)
    taylor_mask = threshold_final(_oracle_loop(taylor, x0, iters).reshape(s.shape), thr)
    exact_mask = threshold_final(_oracle_loop(exact, x0, iters).reshape(s.shape), thr)
    iou_ct = jaccard(conv_mask, taylor_mask)
    iou_et = jaccard(exact_mask, taylor_mask)
    return GateResult(VolumeShape(*s.shape), err, iou_ct, iou_et, err <= tol and iou_ct == 1.0)


def _median_time(fn: Callable[[], object], repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _builder(mode: str):
    return oracle.build_affinity_exact if mode == "exact" else oracle.build_affinity_channel_sum


def run_scaling_benchmark(sizes: Sequence = DEFAULT_SIZES, iters: int = 100, warmup: int = 1, repeats: int = 5,
                          modes: Iterable[str] = MODES, cfg: SfsegConfig | None = None, gate: bool = True,
                          max_oracle_nodes: int = oracle.MAX_NODES, log: Callable[[str], None] | None = None,
                          ) -> list[BenchRecord]:
    """Time each mode on each size; one record per (size, mode) that ran.

    Oracle modes above ``max_oracle_nodes`` are skipped with a notice sent
    to ``log``; the convolutional mode always runs.
    """
    cfg = cfg or SfsegConfig()
    modes = tuple(modes)
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValueError(f"unknown modes: {sorted(unknown)}")
    if repeats < 1 or iters < 1 or warmup < 0:
        raise ValueError("repeats and iters must be >= 1, warmup >= 0")
    if repeats < MIN_STABLE_REPEATS:
        warnings.warn(f"repeats={repeats} < {MIN_STABLE_REPEATS}: medians will be unstable", BenchWarning, stacklevel=2)
    log = log or (lambda msg: None)

    records = []
    for shape in sizes:
        shape = VolumeShape(*shape).validate()
        n = shape.size
        features = prepare_features(bench_instance(shape), cfg)
        s = np.asarray(features.unary, dtype=np.float32)
        x0 = (s / np.linalg.norm(s)).astype(np.float32)
        oracle_ok = n <= max_oracle_nodes
        if gate and oracle_ok:
            result = correctness_gate(features, cfg)
            if not result.passed:
                raise GateError(f"correctness gate failed at {tuple(shape)}: {result}")

        for mode in modes:
            if mode == "conv":
                build = 0.0
                per_iter = _median_time(lambda: _engine_loop(features, cfg, x0, iters), repeats, warmup) / iters
            else:
                if not oracle_ok:
                    log(f"skipping {mode} at {tuple(shape)}: "
                        f"{n} nodes exceeds the explicit-matrix capacity of {max_oracle_nodes}")
                    continue
                build_fn = _builder(mode)
                try:
                    build = _median_time(lambda: build_fn(features, cfg), repeats, warmup)
                except CapacityError as exc:
                    log(f"skipping {mode} at {tuple(shape)}: {exc}")
                    continue
                matrix = build_fn(features, cfg).matrix
                per_iter = _median_time(lambda: _oracle_loop(matrix, x0, iters), repeats, warmup) / iters
            records.append(BenchRecord(mode, *shape, n, build, per_iter, build + per_iter * iters, cfg.threads))
    return records


def scaling_exponent(nodes: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(nodes)."""
    if len(nodes) < 2:
        raise ValueError("need at least two sizes")
    slope, _ = np.polyfit(np.log(np.asarray(nodes, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


@dataclass(frozen=True)
class SeparabilityResult:
    shape: tuple[int, int, int]
    method: str
    separable_s: float
    direct_s: float
    max_abs_diff: float
    tap_ratio: float

    @property
    def speedup(self) -> float:
        return self.direct_s / self.separable_s


def time_separability(shape=(64, 128, 128), sigmas=(0.5, 1.5, 1.5), radii=(1, 3, 3), repeats: int = 3,
                      warmup: int = 1, seed: int = 0, method: str = "band") -> SeparabilityResult:
    """Separable versus dense-kernel filtering of a random volume, both in float32.

    ``max_abs_diff`` is measured against the float64 direct sum.
    """
    kernel = make_gaussian_kernel(sigmas, radii)
    v = np.random.default_rng(seed).random(shape, dtype=np.float32)
    sep = _median_time(lambda: convolve_separable(v, kernel, method), repeats, warmup)
    direct = _median_time(lambda: convolve_direct(v, kernel, dtype=np.float32), repeats, warmup)
    diff = float(np.max(np.abs(convolve_separable(v, kernel, method) - convolve_direct(v, kernel))))
    return SeparabilityResult(tuple(shape), method, sep, direct, diff,
                              kernel.dense_tap_count / kernel.separable_tap_count)


def records_to_csv(records: Sequence[BenchRecord], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = asdict(r)
        for key in ("build_s", "per_iter_s", "total_s"):
            row[key] = f"{row[key]:.6g}"
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_records_csv(path) -> list[BenchRecord]:
    types = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"str": str, "int": int, "float": float}
    with open(path, newline="") as fh:
        return [BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}) for row in csv.DictReader(fh)]


def per_iter(records: Sequence[BenchRecord], mode: str, nodes: int) -> float:
    for r in records:
        if r.mode == mode and r.nodes == nodes:
            return r.per_iter_s
    raise KeyError((mode, nodes))


__all__ = [
    "MODES",
    "DEFAULT_SIZES",
    "CSV_FIELDS",
    "BenchRecord",
    "BenchWarning",
    "GateError",
    "GateResult",
    "SeparabilityResult",
    "bench_instance",
    "correctness_gate",
    "run_scaling_benchmark",
    "scaling_exponent",
    "time_separability",
    "records_to_csv",
    "read_records_csv",
    "per_iter",
]
