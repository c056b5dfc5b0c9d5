"""Explicit sparse affinity matrices for desk-scale verification.

Everything here works in float64 on an explicitly assembled ``N x N``
matrix, independent of the convolution code path. Node ``(t, y, x)`` maps
to row ``t*H*W + y*W + x``; the neighbourhood of a node is the box of
offsets covered by the Gaussian kernel, self-loop included.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

import numpy as np
import scipy.sparse as sp

from .conv3d import SeparableKernel3D
from .errors import CapacityError, DegenerateSolutionError, ParameterError, ShapeError
from .metrics import angle_degrees
from .volume import FeatureSet

if TYPE_CHECKING:
    from .engine import SfsegConfig

MAX_NODES = 10**6


@dataclass(frozen=True)
class SparseAffinity:
    """Symmetric sparse affinity over local space-time neighbourhoods."""

    matrix: sp.csr_matrix
    shape: tuple[int, int, int]
    offsets: tuple[tuple[int, int, int], ...]
    negative_entries: int = 0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        """Neighbourhood size (number of offsets, zero offset included)."""
        return len(self.offsets)

    def entries(self) -> Iterator[tuple[int, int, float]]:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i, j, w in zip(coo.row[order], coo.col[order], coo.data[order]):
            yield int(i), int(j), float(w)

    def to_text(self, path=None) -> str:
        """``i j w`` triples, one per line, row-major, 17 significant digits."""
        text = "".join(f"{i} {j} {w:.17g}\n" for i, j, w in self.entries())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def read_text(path, n: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for line in fh:
            i, j, w = line.split()
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(w))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _neighbour_offsets(radii) -> list[tuple[int, int, int]]:
    rt, ry, rx = radii
    return [
        (dt, dy, dx)
        for dt in range(-rt, rt + 1)
        for dy in range(-ry, ry + 1)
        for dx in range(-rx, rx + 1)
    ]


def _assemble(features: FeatureSet, p: float, kernel: SeparableKernel3D, pair_factor) -> SparseAffinity:
    """Assemble ``M_ij = s_i^p s_j^p pair_factor(sq_diff_ij) G(offset)`` over all in-range pairs.

    ``sq_diff_ij`` is the squared feature difference summed over channels.
    """
    shape = tuple(features.shape)
    nt, ny, nx = shape
    n = nt * ny * nx
    offsets = _neighbour_offsets(kernel.radii)
    if n > MAX_NODES:
        raise CapacityError(f"{n} nodes exceeds the explicit-matrix guard of {MAX_NODES}")
    s = np.asarray(features.unary, dtype=np.float64)
    sp_ = np.power(s, p)
    fs = [np.asarray(f, dtype=np.float64) for f in features.pairwise]
    index = np.arange(n).reshape(shape)

    rows, cols, vals = [], [], []
    for dt, dy, dx in offsets:
        g = kernel.weight(dt, dy, dx)
        # voxels i whose neighbour j = i + offset is inside the volume
        src = tuple(slice(max(0, -d), dim - max(0, d)) for d, dim in zip((dt, dy, dx), shape))
        dst = tuple(slice(max(0, d), dim - max(0, -d)) for d, dim in zip((dt, dy, dx), shape))
        if any(sl.start >= sl.stop for sl in src):
            continue
        sq = np.zeros(index[src].shape)
        for f in fs:
            diff = f[src] - f[dst]
            sq += diff * diff
        w = sp_[src] * sp_[dst] * pair_factor(sq) * g
        rows.append(index[src].ravel())
        cols.append(index[dst].ravel())
        vals.append(w.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return SparseAffinity(m, shape, tuple(offsets), int(np.count_nonzero(vals < 0)))


def build_affinity_exact(features: FeatureSet, cfg: "SfsegConfig", kernel: SeparableKernel3D | None = None) -> SparseAffinity:
    """Gaussian affinity ``s_i^p s_j^p exp(-alpha * sum_c (f_ci - f_cj)^2) G(offset)``."""
    alpha, p, kernel = _params(cfg, kernel)
    return _assemble(features, p, kernel, lambda sq: np.exp(-alpha * sq))


def build_affinity_taylor(features: FeatureSet, cfg: "SfsegConfig", kernel: SeparableKernel3D | None = None) -> SparseAffinity:
    """First-order affinity ``s_i^p s_j^p [1 - alpha * sum_c (f_ci - f_cj)^2] G(offset)``.

    Entries may be negative; their count is reported in ``negative_entries``.
    """
    alpha, p, kernel = _params(cfg, kernel)
    return _assemble(features, p, kernel, lambda sq: 1.0 - alpha * sq)


def build_affinity_channel_sum(features: FeatureSet, cfg: "SfsegConfig", kernel: SeparableKernel3D | None = None) -> SparseAffinity:
    """Sum over channels of single-channel Taylor matrices.

    This is the operator the multi-channel convolutional step applies (up to
    the ``1/alpha`` factor). With one channel it equals
    :func:`build_affinity_taylor`.
    """
    parts = [
        build_affinity_taylor(FeatureSet(features.unary, (f,)), cfg, kernel)
        for f in features.pairwise
    ]
    total = parts[0].matrix
    for part in parts[1:]:
        total = total + part.matrix
    total = sp.csr_matrix(total)
    total.sort_indices()
    neg = int(np.count_nonzero(total.data < 0))
    return SparseAffinity(total, parts[0].shape, parts[0].offsets, neg)


def _params(cfg, kernel):
    if not cfg.alpha > 0:
        raise ParameterError(f"alpha must be positive, got {cfg.alpha}")
    if cfg.p < 0:
        raise ParameterError(f"p must be nonnegative, got {cfg.p}")
    return float(cfg.alpha), float(cfg.p), cfg.kernel if kernel is None else kernel


def _as_matrix(m) -> sp.csr_matrix | np.ndarray:
    if isinstance(m, SparseAffinity):
        return m.matrix
    if sp.issparse(m):
        return m.tocsr()
    return np.asarray(m, dtype=np.float64)


def matvec(m, x) -> np.ndarray:
    """``M @ x`` with float64 accumulation; ``x`` may be any shape with N elements."""
    a = _as_matrix(m)
    x = np.asarray(x, dtype=np.float64).ravel()
    if a.shape[1] != x.size:
        raise ShapeError(f"matrix has {a.shape[1]} columns, vector has {x.size} entries")
    return np.asarray(a @ x, dtype=np.float64).ravel()


def cluster_score(m, x) -> float:
    """Rayleigh quotient ``x^T M x / x^T x``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    xx = float(x @ x)
    if xx == 0:
        raise ParameterError("cluster score is undefined for the zero vector")
    return float(x @ matvec(m, x)) / xx


def power_iteration(m, x0, max_iters: int = 1000, tol: float = 1e-10) -> tuple[np.ndarray, float, int]:
    """Classical power iteration ``x <- M x / ||M x||``.

    Stops when consecutive iterates differ by less than ``tol`` in L2 or after
    ``max_iters`` steps. Returns the unit eigenvector estimate, its Rayleigh
    quotient and the number of steps taken.
    """
    x = np.asarray(x0, dtype=np.float64).ravel()
    norm = np.linalg.norm(x)
    if norm == 0:
        raise ParameterError("initial vector must be nonzero")
    x = x / norm
    used = 0
    for used in range(1, max_iters + 1):
        y = matvec(m, x)
        ny = np.linalg.norm(y)
        if ny == 0:
            raise DegenerateSolutionError("M x vanished during power iteration")
        y /= ny
        delta = np.linalg.norm(y - x)
        x = y
        if delta < tol:
            break
    return x, cluster_score(m, x), used


def dominant_eigenvector(m, x0=None, tol: float = 1e-13, max_iters: int = 100_000) -> np.ndarray:
    """Tight-tolerance power iteration used as the reference eigenvector."""
    a = _as_matrix(m)
    if x0 is None:
        x0 = np.ones(a.shape[0])
    vec, _, _ = power_iteration(a, x0, max_iters=max_iters, tol=tol)
    return vec


def initial_guess_at_angle(reference, away, target_deg: float) -> np.ndarray:
    """Nonnegative blend ``reference + c * away`` whose angle to ``reference`` is ``target_deg``.

    ``away`` should be nonnegative and far from ``reference`` (for example the
    indicator of the background). The blend weight is found by bisection.
    """
    ref = np.asarray(reference, dtype=np.float64).ravel()
    ref = ref / np.linalg.norm(ref)
    away = np.asarray(away, dtype=np.float64).ravel()
    away = away / np.linalg.norm(away)
    limit = angle_degrees(ref, away)
    if not 0 < target_deg < limit:
        raise ParameterError(f"target angle must lie in (0, {limit:.3f}) for this direction")
    lo, hi = 0.0, 1.0
    while angle_degrees(ref + hi * away, ref) < target_deg:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if angle_degrees(ref + mid * away, ref) < target_deg:
            lo = mid
        else:
            hi = mid
    return ref + hi * away


def taylor_remainder_bound(alpha: float, sq_diff, base) -> np.ndarray:
    """Upper bound ``(alpha * sq_diff)^2 / 2 * base`` on ``|exact - taylor|``."""
    u = alpha * np.asarray(sq_diff, dtype=np.float64)
    return 0.5 * u * u * np.asarray(base, dtype=np.float64)


def engine_operator(features: FeatureSet, cfg: "SfsegConfig", kernel: SeparableKernel3D | None = None) -> sp.csr_matrix:
    """Explicit matrix of one convolutional step: ``channel_sum / alpha``."""
    return build_affinity_channel_sum(features, cfg, kernel).matrix / cfg.alpha


__all__ = [
    "MAX_NODES",
    "SparseAffinity",
    "build_affinity_exact",
    "build_affinity_taylor",
    "build_affinity_channel_sum",
    "engine_operator",
    "matvec",
    "cluster_score",
    "power_iteration",
    "dominant_eigenvector",
    "initial_guess_at_angle",
    "taylor_remainder_bound",
    "read_text",
]
