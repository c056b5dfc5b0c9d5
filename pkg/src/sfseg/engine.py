"""Matrix-free power iteration on the space-time pixel graph.

One power-iteration step ``x <- M x`` over the first-order (Taylor) affinity

    M_ij = s_i^p s_j^p [1 - alpha (f_i - f_j)^2] G(i - j)

is evaluated without materializing ``M``. Expanding the bracket splits the
neighbour sum into three Gaussian filterings of element-wise products:

    X' = S^p (1/alpha - F^2) G*(S^p X) - S^p G*(F^2 S^p X) + 2 S^p F G*(F S^p X)

which equals ``M x / alpha``. The positive ``1/alpha`` factor is absorbed by
the L2 normalization that follows each step.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .conv3d import (
    DEFAULT_RADII,
    DEFAULT_SIGMAS,
    SeparableKernel3D,
    Workspace,
    convolve_separable,
    make_gaussian_kernel,
)
from .errors import DegenerateSolutionError, ParameterError, ShapeError, ValidationError
from .metrics import BinaryMask, angle_degrees, jaccard, threshold_final
from .volume import FeatureSet, FeatureVolume, Role

# (S, X, [F_1..F_c]) -> (S, X, [F_1..F_c]), applied to whole volumes before
# the temporal window is cut. Identity by default; a motion-compensating
# warp of neighbouring frames would plug in here.
Transform = Callable[[np.ndarray, np.ndarray, Sequence[np.ndarray]], tuple]


@dataclass(frozen=True)
class SfsegConfig:
    alpha: float = 1.0
    p: float = 0.1
    kernel_sigmas: tuple[float, float, float] = DEFAULT_SIGMAS
    kernel_radii: tuple[int, int, int] = DEFAULT_RADII
    iterations: int = 5
    temporal_window: int | None = None  # None: kernel time radius
    binarize_start: int = 3  # first iteration that is projected; > iterations disables
    sigmoid_slope0: float = 10.0
    slope_growth: float = 2.0
    threshold_frac: float = 0.5
    final_threshold: float = 0.5
    allow_negative_affinity: bool = False
    threads: int = 1
    frames_per_block: int | None = None  # None: split frames evenly across threads

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel_sigmas", tuple(float(s) for s in self.kernel_sigmas))
        object.__setattr__(self, "kernel_radii", tuple(int(r) for r in self.kernel_radii))
        self.validate()

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.p < 0:
            raise ParameterError(f"p must be nonnegative, got {self.p}")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.binarize_start < 1:
            raise ParameterError("binarize_start must be >= 1")
        if not self.sigmoid_slope0 > 0:
            raise ParameterError("sigmoid_slope0 must be positive")
        if self.slope_growth < 1:
            raise ParameterError("slope_growth must be >= 1")
        for name in ("threshold_frac", "final_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ParameterError(f"{name} must lie in (0, 1), got {v}")
        if self.window < self.kernel_radii[0]:
            raise ParameterError(
                f"temporal_window ({self.window}) must be >= kernel time radius ({self.kernel_radii[0]})"
            )
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")
        if self.frames_per_block is not None and self.frames_per_block < 1:
            raise ParameterError("frames_per_block must be >= 1")
        if not self.allow_negative_affinity and self.alpha > 1:
            raise ParameterError("alpha > 1 can make Taylor affinities negative; set allow_negative_affinity to proceed")

    @property
    def window(self) -> int:
        return self.kernel_radii[0] if self.temporal_window is None else int(self.temporal_window)

    @property
    def binarization_enabled(self) -> bool:
        return self.binarize_start <= self.iterations

    @cached_property
    def kernel(self) -> SeparableKernel3D:
        return make_gaussian_kernel(self.kernel_sigmas, self.kernel_radii)

    def with_(self, **changes) -> "SfsegConfig":
        return replace(self, **changes)


@dataclass
class IterationRecord:
    iteration: int
    l2_norm_pre_normalize: float
    angle_to_reference_deg: float | None
    iou_to_ground_truth: float | None
    wall_time_per_iter: float


@dataclass
class RunTrace:
    records: list[IterationRecord] = field(default_factory=list)
    initial_angle_deg: float | None = None

    def angles(self) -> list[float | None]:
        return [r.angle_to_reference_deg for r in self.records]

    def ious(self) -> list[float | None]:
        return [r.iou_to_ground_truth for r in self.records]


def _arr(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float32)


def _check_shapes(*vols: np.ndarray) -> None:
    first = vols[0].shape
    for v in vols[1:]:
        if v.shape != first:
            raise ShapeError(f"shape mismatch: {first} vs {v.shape}")
    if len(first) != 3:
        raise ShapeError(f"volumes must be 3-D, got shape {first}")


def _step_prepared(x: np.ndarray, sp: np.ndarray, channels: Sequence[tuple[np.ndarray, np.ndarray]],
                   inv_alpha: float, kernel: SeparableKernel3D, ws: Workspace | None = None) -> np.ndarray:
    """Multi-channel step on precomputed ``S^p`` and ``(F, F^2)`` pairs.

    The filter inputs ``S^p X`` (shared by all channels), ``F^2 S^p X`` and
    ``F S^p X`` are stacked and filtered in one batched call: three filterings
    for one channel, ``1 + 2C`` for ``C`` channels. With ``ws`` every
    temporary, the result included, lives in the workspace.
    """
    ws = ws if ws is not None else Workspace()
    shape = x.shape
    stack = ws.get("stack", (1 + 2 * len(channels),) + shape)
    y = stack[0]
    np.multiply(sp, x, out=y)
    for c, (f, f2) in enumerate(channels):
        np.multiply(f2, y, out=stack[1 + 2 * c])
        np.multiply(f, y, out=stack[2 + 2 * c])
    smooth = convolve_separable(stack, kernel, ws=ws)
    total = ws.get("total", shape)
    part = ws.get("part", shape)
    t3 = ws.get("t3", shape)
    for c, (f, f2) in enumerate(channels):
        # (1/alpha - F^2) G*(y) - G*(F^2 y) + 2 F G*(F y)
        np.subtract(np.float32(inv_alpha), f2, out=part)
        part *= smooth[0]
        part -= smooth[1 + 2 * c]
        np.multiply(f, smooth[2 + 2 * c], out=t3)
        t3 *= np.float32(2.0)
        part += t3
        if c == 0:
            total[...] = part
        else:
            total += part
    total *= sp
    return total


def sfseg_step_channel(X, S, F, cfg: SfsegConfig) -> np.ndarray:
    """One convolutional power-iteration step for a single pairwise channel.

    Exactly three Gaussian filterings are performed. No normalization.
    """
    x, s, f = _arr(X), _arr(S), _arr(F)
    _check_shapes(x, s, f)
    if not cfg.alpha > 0:
        raise ParameterError("alpha must be positive")
    sp = np.power(s, np.float32(cfg.p))
    return _step_prepared(x, sp, [(f, f * f)], 1.0 / cfg.alpha, cfg.kernel)


def sfseg_step(X, features: FeatureSet | Sequence, cfg: SfsegConfig) -> np.ndarray:
    """Sum of :func:`sfseg_step_channel` over every pairwise channel."""
    s, fs = _unpack(features)
    if not fs:
        raise ParameterError("at least one pairwise channel is required")
    x = _arr(X)
    _check_shapes(x, s, *fs)
    sp = np.power(s, np.float32(cfg.p))
    return _step_prepared(x, sp, [(f, f * f) for f in fs], 1.0 / cfg.alpha, cfg.kernel)


def _unpack(features) -> tuple[np.ndarray, list[np.ndarray]]:
    if isinstance(features, FeatureSet):
        return _arr(features.unary), [_arr(p) for p in features.pairwise]
    s, *fs = features
    if len(fs) == 1 and isinstance(fs[0], (list, tuple)):
        fs = list(fs[0])
    return _arr(s), [_arr(f) for f in fs]


def normalize_l2(X) -> tuple[np.ndarray, float]:
    """Scale to unit L2 norm; returns the unit volume and the original norm."""
    x = _arr(X)
    norm = float(np.linalg.norm(x.astype(np.float64).ravel()))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateSolutionError("iterate has zero (or non-finite) norm; the power iteration collapsed")
    return (x / np.float32(norm)).astype(np.float32), norm


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def slope_at(iteration: int, cfg: SfsegConfig) -> float:
    return cfg.sigmoid_slope0 * cfg.slope_growth ** (iteration - cfg.binarize_start)


def project_binary(X, iteration: int, cfg: SfsegConfig) -> np.ndarray:
    """Pull the iterate toward {0, 1} once the schedule is active.

    Returns ``sigmoid(slope * (X - theta) / max(X))`` with
    ``theta = threshold_frac * max(X)`` and ``slope`` growing geometrically
    from ``sigmoid_slope0``. Dividing by ``max(X)`` keeps the sharpness
    independent of the volume size (a unit-norm iterate has tiny entries).
    """
    x = _arr(X)
    if iteration < cfg.binarize_start:
        return x
    m = float(x.max())
    if m <= 0:
        return x
    z = (slope_at(iteration, cfg) / m) * (x.astype(np.float64) - cfg.threshold_frac * m)
    return sigmoid(z).astype(np.float32)


def prepare_features(features: FeatureSet, cfg: SfsegConfig) -> FeatureSet:
    """Apply the nonnegative-affinity guard.

    Unless ``cfg.allow_negative_affinity`` is set, each pairwise channel that
    leaves [0, 1] is min-max rescaled into it, which together with
    ``alpha <= 1`` keeps every factor ``1 - alpha (f_i - f_j)^2`` >= 0.
    Channels already inside [0, 1] are passed through untouched.
    """
    if cfg.allow_negative_affinity:
        return features
    if cfg.alpha > 1:
        raise ParameterError("alpha must be <= 1 under the nonnegative-affinity guard")
    channels = []
    for f in features.pairwise:
        a = f.data
        lo, hi = float(a.min()), float(a.max())
        if lo >= 0 and hi <= 1:
            channels.append(f)
        elif hi > lo:
            channels.append(FeatureVolume((a.astype(np.float64) - lo) / (hi - lo), Role.PAIRWISE))
        else:
            channels.append(FeatureVolume(np.zeros_like(a), Role.PAIRWISE))
    return FeatureSet(features.unary, tuple(channels))


def _blocks(n_frames: int, cfg: SfsegConfig) -> list[tuple[int, int]]:
    if cfg.frames_per_block is not None:
        size = cfg.frames_per_block
    else:
        size = -(-n_frames // cfg.threads)
    return [(a, min(a + size, n_frames)) for a in range(0, n_frames, size)]


def sweep(x: np.ndarray, sp: np.ndarray, channels, cfg: SfsegConfig, pool: ThreadPoolExecutor | None = None,
          workspaces: dict | None = None) -> np.ndarray:
    """One full pass over the video, block of frames by block of frames.

    Every block reads the previous iterate only, through a temporal window
    of ``cfg.window`` frames on each side, so blocks are independent and
    the result is bit-identical for any block layout. ``workspaces`` maps
    each block to its scratch space; pass the same dict on every iteration
    to reuse the buffers.
    """
    n = x.shape[0]
    w = cfg.window
    inv_alpha = 1.0 / cfg.alpha
    kernel = cfg.kernel
    out = np.empty_like(x)

    def work(block):
        a, b = block
        lo, hi = max(0, a - w), min(n, b + w)
        chans = [(f[lo:hi], f2[lo:hi]) for f, f2 in channels]
        ws = workspaces.setdefault(block, Workspace()) if workspaces is not None else None
        res = _step_prepared(x[lo:hi], sp[lo:hi], chans, inv_alpha, kernel, ws)
        out[a:b] = res[a - lo:b - lo]

    blocks = _blocks(n, cfg)
    if pool is None or len(blocks) == 1:
        for blk in blocks:
            work(blk)
    else:
        list(pool.map(work, blocks))
    return out


def run(features: FeatureSet, X0=None, cfg: SfsegConfig | None = None, reference=None, ground_truth=None,
        transform: Transform | None = None) -> tuple[np.ndarray, BinaryMask, RunTrace]:
    """Full iteration loop: sweep, normalize, project; then hard-threshold.

    Returns the soft solution, the hard mask and a per-iteration trace.
    ``reference`` (an eigenvector) and ``ground_truth`` (a mask) only feed
    the trace.
    """
    cfg = cfg or SfsegConfig()
    features = prepare_features(features, cfg)
    s = _arr(features.unary)
    fs = [_arr(p) for p in features.pairwise]
    if X0 is None:
        x = s.copy()
    else:
        x = _arr(X0)
        _check_shapes(s, x)
        if not np.all(np.isfinite(x)) or x.min() < 0:
            raise ValidationError("initial solution must be finite and nonnegative")
    if reference is not None and np.asarray(reference).size != x.size:
        raise ShapeError("reference eigenvector length does not match the volume")
    gt = None if ground_truth is None else np.asarray(ground_truth, dtype=bool)
    if gt is not None and gt.shape != x.shape:
        raise ShapeError("ground-truth mask shape does not match the volume")

    trace = RunTrace()
    if reference is not None and np.any(x):
        trace.initial_angle_deg = angle_degrees(x, reference)

    p = np.float32(cfg.p)
    sp = np.power(s, p)
    channels = [(f, f * f) for f in fs]
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    workspaces: dict = {}
    try:
        for it in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            if transform is not None:
                s_t, x_t, fs_t = transform(s, x, fs)
                sp_t = np.power(_arr(s_t), p)
                ch_t = [(_arr(f), _arr(f) * _arr(f)) for f in fs_t]
                x_new = sweep(_arr(x_t), sp_t, ch_t, cfg, pool, workspaces)
            else:
                x_new = sweep(x, sp, channels, cfg, pool, workspaces)
            x, norm = normalize_l2(x_new)
            x = project_binary(x, it, cfg)
            elapsed = time.perf_counter() - t0
            trace.records.append(IterationRecord(
                iteration=it,
                l2_norm_pre_normalize=norm,
                angle_to_reference_deg=angle_degrees(x, reference) if reference is not None else None,
                iou_to_ground_truth=jaccard(threshold_final(x, cfg.final_threshold), gt) if gt is not None else None,
                wall_time_per_iter=elapsed,
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    return x, threshold_final(x, cfg.final_threshold), trace
