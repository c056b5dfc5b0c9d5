"""Dense space-time volumes and their on-disk formats.

A volume is a ``(frames, height, width)`` grid of float32 values stored
frame-major then row-major, so voxel ``(t, y, x)`` lives at flat index
``t*H*W + y*W + x`` (plain C order).

Two formats are supported:

* ``SFSV``, a small binary container and the authoritative format.
* Directories of grayscale PGM frames, for eyeballing results.
"""

from __future__ import annotations

import enum
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError, ValidationError

MAGIC = b"SFSV"
VERSION = 1
DTYPE_F32LE = 0x01
HEADER_SIZE = 32
_HEADER = struct.Struct("<4sI4IB7x")
assert _HEADER.size == HEADER_SIZE


class VolumeShape(NamedTuple):
    frames: int
    height: int
    width: int

    @property
    def size(self) -> int:
        return self.frames * self.height * self.width

    def index(self, t: int, y: int, x: int) -> int:
        """Flat index of voxel ``(t, y, x)``."""
        return (t * self.height + y) * self.width + x

    def validate(self) -> "VolumeShape":
        if any(int(d) < 1 for d in self):
            raise ShapeError(f"all dimensions must be >= 1, got {tuple(self)}")
        if self.size > np.iinfo(np.intp).max:
            raise ShapeError(f"voxel count {self.size} is not addressable")
        return self


class Role(str, enum.Enum):
    UNARY = "unary-S"
    PAIRWISE = "pairwise-F"
    SOLUTION = "solution-X"
    GENERIC = "generic"


_NONNEGATIVE_ROLES = (Role.UNARY, Role.SOLUTION)


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Immutable float32 volume with a role tag.

    The wrapped array is made read-only on construction, so instances can be
    shared freely between threads.
    """

    data: np.ndarray
    role: Role = Role.GENERIC

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True, order="C")
        if arr.ndim != 3:
            raise ShapeError(f"volume must be 3-D (frames, height, width), got ndim={arr.ndim}")
        VolumeShape(*arr.shape).validate()
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains NaN or Inf")
        role = Role(self.role)
        if role in _NONNEGATIVE_ROLES and arr.size and arr.min() < 0:
            raise ValidationError(f"{role.value} volume must be nonnegative (min={arr.min()})")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "role", role)

    @property
    def shape(self) -> VolumeShape:
        return VolumeShape(*self.data.shape)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVolume):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.data, other.data)

    def with_role(self, role: Role | str) -> "FeatureVolume":
        return FeatureVolume(self.data, Role(role))


@dataclass(frozen=True)
class FeatureSet:
    """Unary map ``S`` plus one or more pairwise channels ``F_c``."""

    unary: FeatureVolume
    pairwise: tuple[FeatureVolume, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        unary = self.unary
        if not isinstance(unary, FeatureVolume):
            unary = FeatureVolume(unary, Role.UNARY)
        elif unary.role is not Role.UNARY:
            unary = unary.with_role(Role.UNARY)
        pairwise = tuple(
            p if isinstance(p, FeatureVolume) else FeatureVolume(p, Role.PAIRWISE)
            for p in self.pairwise
        )
        if not pairwise:
            raise ValidationError("a feature set needs at least one pairwise channel")
        for i, p in enumerate(pairwise):
            if p.shape != unary.shape:
                raise ShapeError(f"pairwise channel {i} has shape {tuple(p.shape)}, unary has {tuple(unary.shape)}")
        object.__setattr__(self, "unary", unary)
        object.__setattr__(self, "pairwise", pairwise)

    @property
    def shape(self) -> VolumeShape:
        return self.unary.shape

    @classmethod
    def from_arrays(cls, unary, *pairwise) -> "FeatureSet":
        return cls(FeatureVolume(unary, Role.UNARY), tuple(FeatureVolume(p, Role.PAIRWISE) for p in pairwise))


# --------------------------------------------------------------------------
# SFSV container


def _encode(volumes: Sequence[np.ndarray]) -> bytes:
    frames, height, width = volumes[0].shape
    header = _HEADER.pack(MAGIC, VERSION, frames, height, width, len(volumes), DTYPE_F32LE)
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in volumes)
    return header + payload


def _write_atomic(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_stack(volumes: Sequence[FeatureVolume], path: str | os.PathLike) -> None:
    """Write one or more equally shaped volumes as channels of one SFSV file."""
    if not volumes:
        raise ValidationError("nothing to save")
    arrays = []
    for v in volumes:
        if not isinstance(v, FeatureVolume):
            v = FeatureVolume(v)  # validates, raises before anything is written
        arrays.append(v.data)
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError("all channels of a stack must share one shape")
    _write_atomic(Path(path), _encode(arrays))


def save_volume(v: FeatureVolume, path: str | os.PathLike) -> None:
    save_stack([v], path)


def load_stack(path: str | os.PathLike, role: Role | str = Role.GENERIC) -> list[FeatureVolume]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < HEADER_SIZE:
        raise CorruptionError(f"{path}: truncated header ({len(blob)} bytes)")
    _, version, frames, height, width, channels, dtype = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32LE:
        raise FormatError(f"{path}: unsupported dtype code {dtype:#04x}")
    if any(blob[25:HEADER_SIZE]):
        raise FormatError(f"{path}: reserved header bytes are not zero")
    if channels < 1:
        raise FormatError(f"{path}: channel count must be >= 1")
    shape = VolumeShape(frames, height, width).validate()
    expected = HEADER_SIZE + 4 * shape.size * channels
    if len(blob) != expected:
        raise CorruptionError(f"{path}: payload is {len(blob) - HEADER_SIZE} bytes, expected {expected - HEADER_SIZE}")
    flat = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).astype(np.float32)
    if not np.all(np.isfinite(flat)):
        raise ValidationError(f"{path}: payload contains NaN or Inf")
    cube = flat.reshape(channels, *shape)
    return [FeatureVolume(c, role) for c in cube]


def load_volume(path: str | os.PathLike, role: Role | str = Role.GENERIC) -> FeatureVolume:
    vols = load_stack(path, role)
    if len(vols) != 1:
        raise FormatError(f"{path}: holds {len(vols)} channels, expected a single volume")
    return vols[0]


# --------------------------------------------------------------------------
# PGM sequences

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a binary (P5) PGM. Returns the integer image and its maxval."""
    blob = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(blob, pos)
        if m is None:
            raise FormatError(f"{path}: not a PGM file")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0][:2]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM header values")
    pos += 1  # single whitespace byte before raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise CorruptionError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width), maxval


def write_pgm(path: str | os.PathLike, image: np.ndarray, maxval: int = 65535) -> None:
    height, width = image.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype=dtype).tobytes())


def import_pgm_sequence(directory: str | os.PathLike, role: Role | str = Role.GENERIC) -> FeatureVolume:
    """Stack the ``*.pgm`` files of a directory, in lexicographic order, as frames."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.is_file())
    if not paths:
        raise ShapeError(f"{directory}: no frames found")
    frames = []
    for p in paths:
        img, maxval = read_pgm(p)
        if frames and img.shape != frames[0].shape:
            raise ShapeError(f"{p.name}: frame size {img.shape} differs from {frames[0].shape}")
        frames.append(img.astype(np.float64) / maxval)
    return FeatureVolume(np.stack(frames), role)


def export_pgm_sequence(v: FeatureVolume, directory: str | os.PathLike, prefix: str = "frame") -> list[Path]:
    """Write each frame as a 16-bit PGM, quantizing ``round(value * 65535)``."""
    data = np.asarray(v, dtype=np.float64)
    if data.min() < 0 or data.max() > 1:
        raise ValidationError("PGM export requires values in [0, 1]")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(data) - 1)))
    out = []
    for t, frame in enumerate(data):
        path = directory / f"{prefix}_{t:0{width}d}.pgm"
        write_pgm(path, np.rint(frame * 65535).astype(np.uint16))
        out.append(path)
    return out


def as_array(v: FeatureVolume | np.ndarray | Iterable, dtype=np.float32) -> np.ndarray:
    """View any volume-like input as an ndarray of ``dtype``."""
    return np.asarray(v, dtype=dtype)
