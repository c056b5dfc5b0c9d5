"""Separable 3-D Gaussian filtering of space-time volumes.

Both convolution routes use zero padding: voxels outside the video
contribute nothing. Because every kernel here is symmetric, convolution and
correlation coincide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError

DEFAULT_RADII = (1, 3, 3)
DEFAULT_SIGMAS = (0.5, 1.5, 1.5)

# Longest block handled by one band-matrix product; longer axes are split
# into near-equal blocks of at most this length.
BAND_BLOCK = 32
METHODS = ("band", "taps")

@dataclass(frozen=True)
class SeparableKernel3D:
    """A normalized Gaussian kernel stored as three 1-D tap vectors.

    The unit-sum normalization of the full product kernel is folded into
    ``taps_t``; ``taps_y`` and ``taps_x`` each sum to one on their own.
    """

    taps_t: np.ndarray
    taps_y: np.ndarray
    taps_x: np.ndarray
    sigmas: tuple[float, float, float]
    radii: tuple[int, int, int]

    @property
    def taps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.taps_t, self.taps_y, self.taps_x

    @property
    def support(self) -> tuple[int, int, int]:
        return tuple(2 * r + 1 for r in self.radii)

    @property
    def separable_tap_count(self) -> int:
        return sum(self.support)

    @property
    def dense_tap_count(self) -> int:
        t, y, x = self.support
        return t * y * x

    def dense(self) -> np.ndarray:
        """Materialize the full ``(2r_t+1, 2r_y+1, 2r_x+1)`` weight array (float64)."""
        return np.einsum("i,j,k->ijk", self.taps_t, self.taps_y, self.taps_x)

    def weight(self, dt: int, dy: int, dx: int) -> float:
        rt, ry, rx = self.radii
        if abs(dt) > rt or abs(dy) > ry or abs(dx) > rx:
            return 0.0
        return float(self.taps_t[dt + rt] * self.taps_y[dy + ry] * self.taps_x[dx + rx])

    def scaled(self, factor: float) -> "SeparableKernel3D":
        """Same kernel with every 3-D weight multiplied by ``factor``."""
        return SeparableKernel3D(self.taps_t * factor, self.taps_y, self.taps_x, self.sigmas, self.radii)


def gaussian_taps(sigma: float, radius: int) -> np.ndarray:
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def make_gaussian_kernel(sigmas=DEFAULT_SIGMAS, radii=DEFAULT_RADII) -> SeparableKernel3D:
    """Build a normalized separable Gaussian with per-axis sigma and radius.

    An isotropic affinity ``exp(-beta * dist**2)`` corresponds to
    ``sigma = 1 / sqrt(2 * beta)`` on every axis.
    """
    sigmas = tuple(float(s) for s in sigmas)
    radii = tuple(int(r) for r in radii)
    if len(sigmas) != 3 or len(radii) != 3:
        raise ParameterError("need exactly three sigmas and three radii (t, y, x)")
    if any(not np.isfinite(s) or s <= 0 for s in sigmas):
        raise ParameterError(f"sigmas must be positive, got {sigmas}")
    if any(r < 0 for r in radii):
        raise ParameterError(f"radii must be >= 0, got {radii}")
    taps = [gaussian_taps(s, r) for s, r in zip(sigmas, radii)]
    for t in taps:
        t.setflags(write=False)
    return SeparableKernel3D(taps[0], taps[1], taps[2], sigmas, radii)


def sigma_from_beta(beta: float) -> float:
    if beta <= 0:
        raise ParameterError("beta must be positive")
    return 1.0 / np.sqrt(2.0 * beta)


class Workspace:
    """Scratch arrays reused across calls, keyed by name and shape.

    Iterative callers keep one per worker so that the full-volume
    temporaries of each step are allocated once rather than faulted in
    fresh every iteration. Arrays handed out are overwritten by the next
    call that asks for the same key; not thread-safe.
    """

    def __init__(self) -> None:
        self._bufs: dict = {}

    def get(self, name, shape, dtype=np.float32) -> np.ndarray:
        key = (name, tuple(shape), np.dtype(dtype))
        buf = self._bufs.get(key)
        if buf is None:
            buf = self._bufs[key] = np.empty(shape, dtype=dtype)
        return buf


@lru_cache(maxsize=128)
def _block_bands(tap_bytes: bytes, block: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Band pieces for one block of ``block`` samples.

    Returns the square in-block band (taps past the block edge dropped) and
    the two ``r x r`` corners that couple a block to the tail of the previous
    one and the head of the next. Dropping the corners is zero padding.
    """
    taps = np.frombuffer(tap_bytes, dtype=np.float32)
    r = len(taps) // 2
    band = np.zeros((block, block), dtype=np.float32)
    for d in range(-min(r, block - 1), min(r, block - 1) + 1):
        # band[i, i+d] = w[r+d]
        idx = np.arange(max(0, -d), block - max(0, d))
        band[idx, idx + d] = taps[r + d]
    i, k = np.indices((r, r))
    # output i of a block reads input block-r+k of the previous block: offset k-r-i
    prev = np.where(k >= i, taps[np.clip(k - i, 0, 2 * r)], 0).astype(np.float32)
    # output block-r+i reads input k of the next block: offset k+r-i
    nxt = np.where(k <= i, taps[np.clip(2 * r + k - i, 0, 2 * r)], 0).astype(np.float32)
    for a in (band, prev, nxt):
        a.setflags(write=False)
    return band, prev, nxt


def _band_pass(v: np.ndarray, w: np.ndarray, axis: int, ws: Workspace) -> np.ndarray:
    """1-D pass as band-matrix products over blocks of at most ``BAND_BLOCK``.

    The axis is zero-padded to ``m`` equal blocks and viewed as
    ``(m, block)``, so each product is a contiguous BLAS call. Taps that
    straddle a block edge are added back with the small corner matrices.
    Per-voxel work is fixed by the block length, not the axis length.
    Output buffers alternate between two workspace slots by axis parity,
    so a pass never writes over its own input.
    """
    ax = v.ndim + axis
    slot = axis % 2
    n = v.shape[ax]
    pre = math.prod(v.shape[:ax])
    post = math.prod(v.shape[ax + 1:])
    r = len(w) // 2
    # blocks of at least r samples, so a tap never reaches past the neighbouring block
    m = -(-n // max(BAND_BLOCK, 2 * r))
    block = -(-n // m)
    band, prev, nxt = _block_bands(w.tobytes(), block)
    padded = m * block != n
    if padded:
        x = ws.get("pad", (pre, m * block, post))
        x[:, :n] = v.reshape(pre, n, post)
        x[:, n:] = 0
        x = x.reshape(pre, m, block, post)
    else:
        x = v.reshape(pre, m, block, post)
    out = ws.get(("band", slot), (pre, m, block, post))
    corners = m > 1 and r > 0
    if corners:
        edge = (pre, m - 1, r, post)
        tail = ws.get("tail", edge)
        head = ws.get("head", edge)
        np.copyto(tail, x[:, :-1, block - r:])
        np.copyto(head, x[:, 1:, :r])
        fix = ws.get("fix", edge)

    if post == 1:
        # one GEMM over every block of every row; corners likewise flattened
        np.matmul(x.reshape(-1, block), band.T, out=out.reshape(-1, block))
        if corners:
            np.matmul(tail.reshape(-1, r), prev.T, out=fix.reshape(-1, r))
            out[:, 1:, :r] += fix
            np.matmul(head.reshape(-1, r), nxt.T, out=fix.reshape(-1, r))
            out[:, :-1, block - r:] += fix
    else:
        np.matmul(band, x, out=out)
        if corners:
            np.matmul(prev, tail, out=fix)
            out[:, 1:, :r] += fix
            np.matmul(nxt, head, out=fix)
            out[:, :-1, block - r:] += fix

    out = out.reshape(pre, m * block, post)
    if padded:
        trimmed = ws.get(("trim", slot), (pre, n, post))
        np.copyto(trimmed, out[:, :n])
        out = trimmed
    return out.reshape(v.shape)


def _tap_pass(v: np.ndarray, w: np.ndarray, axis: int, ws: Workspace | None = None) -> np.ndarray:
    """1-D pass as a loop over the ``2r+1`` taps, one shifted multiply-add each.

    The axis is zero-padded and the buffer flattened: a shift of ``d`` along
    the axis is then a shift of ``d * stride`` in flat memory, and the ``r``
    cells of padding keep every kept output from reading across a row,
    frame or batch edge.
    """
    n = v.shape[axis]
    r = len(w) // 2
    pad_shape = list(v.shape)
    pad_shape[axis] = n + 2 * r
    padded = np.zeros(pad_shape, dtype=v.dtype)
    centre = (Ellipsis, slice(r, r + n)) + (slice(None),) * (-axis - 1)
    padded[centre] = v
    flat = padded.reshape(-1)
    stride = math.prod(pad_shape[len(pad_shape) + axis + 1:])
    lo, hi = r * stride, flat.size - r * stride
    acc = np.zeros_like(flat)
    body = acc[lo:hi]
    np.multiply(flat[lo:hi], w[r], out=body)
    tmp = np.empty_like(body)
    for d in range(1, r + 1):
        # acc[i] += w[r+d] * v[i+d] + w[r-d] * v[i-d]
        off = d * stride
        np.multiply(flat[lo + off:hi + off], w[r + d], out=tmp)
        body += tmp
        np.multiply(flat[lo - off:hi - off], w[r - d], out=tmp)
        body += tmp
    return acc.reshape(pad_shape)[centre].copy()


def convolve_separable(v, k: SeparableKernel3D, method: str = "band", ws: Workspace | None = None) -> np.ndarray:
    """Filter ``v`` with ``k`` as three sequential 1-D passes (t, then y, then x).

    The last three axes are filtered; any leading axes are treated as a batch
    of independent volumes. ``method`` picks how each 1-D pass is computed:
    ``"band"`` (blocked band-matrix products, the fast default) or ``"taps"``
    (an explicit loop over the taps). Both run in float32 and agree to
    rounding.

    With ``ws`` the band method draws its scratch from the workspace and
    the result lives in it too, valid until the next call with the same
    workspace.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    out = np.asarray(v, dtype=np.float32)
    if out.ndim < 3:
        raise ValueError(f"need at least 3 dimensions, got {out.ndim}")
    one_pass = _band_pass if method == "band" else _tap_pass
    ws = ws if ws is not None else Workspace()
    for axis, taps in zip((-3, -2, -1), k.taps):
        out = one_pass(out, taps.astype(np.float32), axis, ws)
    return out


def convolve_direct(v, k: SeparableKernel3D, dtype=np.float64) -> np.ndarray:
    """Reference filter: full triple sum over every weight of the dense kernel.

    Accumulates in ``dtype`` (float64 by default, for use as a test oracle)
    and returns float32. Benchmarks pass float32 to compare like with like.
    """
    v = np.asarray(v, dtype=dtype)
    weights = k.dense().astype(dtype)
    rt, ry, rx = k.radii
    nt, ny, nx = v.shape
    padded = np.zeros((nt + 2 * rt, ny + 2 * ry, nx + 2 * rx), dtype=dtype)
    padded[rt:rt + nt, ry:ry + ny, rx:rx + nx] = v
    out = np.zeros_like(v)
    tmp = np.empty_like(v)
    for a in range(2 * rt + 1):
        for b in range(2 * ry + 1):
            for c in range(2 * rx + 1):
                np.multiply(padded[a:a + nt, b:b + ny, c:c + nx], weights[a, b, c], out=tmp)
                out += tmp
    return out.astype(np.float32)
