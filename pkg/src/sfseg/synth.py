"""Seeded toy videos: a moving box or ball with a noisy unary map.

Randomness comes from numpy's ``PCG64`` bit generator seeded with the
instance seed, which yields the same stream on every platform. Flip
decisions compare raw 32-bit integers against an integer threshold, so they
involve no floating point at all. Gaussian noise is drawn in float64 and
rounded to float32.

JSON schema accepted by :meth:`SynthSpec.from_dict`::

    {
      "shape": [frames, height, width],
      "object": {"kind": "box" | "ball",
                 "size": [h, w],          # box only
                 "radius": r,             # ball only
                 "start": [y, x],         # box: top-left corner, ball: center
                 "velocity": [vy, vx]},   # pixels per frame
      "noise_kind": "flip" | "gaussian",
      "noise_level": 0.3,
      "seed": 7,
      "feature_blur": 1.0                 # spatial sigma of the F rendering
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .conv3d import convolve_separable, make_gaussian_kernel
from .errors import SpecError
from .metrics import BinaryMask
from .volume import FeatureSet, FeatureVolume, Role, VolumeShape


@dataclass(frozen=True)
class MovingObject:
    kind: str = "box"
    size: tuple[int, int] = (6, 6)
    radius: float = 3.0
    start: tuple[float, float] = (2.0, 2.0)
    velocity: tuple[float, float] = (0.0, 1.0)

    def position(self, t: int) -> tuple[float, float]:
        return (self.start[0] + t * self.velocity[0], self.start[1] + t * self.velocity[1])

    def render(self, t: int, height: int, width: int) -> np.ndarray:
        cy, cx = self.position(t)
        if self.kind == "box":
            y0, x0 = int(round(cy)), int(round(cx))
            h, w = self.size
            if y0 < 0 or x0 < 0 or y0 + h > height or x0 + w > width:
                raise SpecError(
                    f"object must fit inside the frame at every time step: box at ({y0}, {x0}) "
                    f"size {h}x{w} leaves the {height}x{width} frame at t={t}"
                )
            frame = np.zeros((height, width), dtype=bool)
            frame[y0:y0 + h, x0:x0 + w] = True
            return frame
        r = self.radius
        if cy - r < 0 or cx - r < 0 or cy + r > height - 1 or cx + r > width - 1:
            raise SpecError(
                f"object must fit inside the frame at every time step: ball centre ({cy:g}, {cx:g}) "
                f"radius {r:g} leaves the {height}x{width} frame at t={t}"
            )
        yy, xx = np.mgrid[0:height, 0:width]
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r

    def area(self) -> float:
        """Analytic per-frame area of the primitive."""
        if self.kind == "box":
            return float(self.size[0] * self.size[1])
        return math.pi * self.radius ** 2


@dataclass(frozen=True)
class SynthSpec:
    shape: VolumeShape = VolumeShape(6, 16, 16)
    object: MovingObject = field(default_factory=MovingObject)
    noise_kind: str = "flip"
    noise_level: float = 0.3
    seed: int = 7
    feature_blur: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", VolumeShape(*(int(d) for d in self.shape)))
        try:
            self.shape.validate()
        except Exception as exc:
            raise SpecError(str(exc)) from None
        if self.object.kind not in ("box", "ball"):
            raise SpecError(f"object kind must be 'box' or 'ball', got {self.object.kind!r}")
        if self.noise_kind not in ("flip", "gaussian"):
            raise SpecError(f"noise_kind must be 'flip' or 'gaussian', got {self.noise_kind!r}")
        if not 0 <= self.noise_level <= 1:
            raise SpecError(f"noise_level must lie in [0, 1], got {self.noise_level}")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must be an unsigned 64-bit integer")
        if self.feature_blur < 0:
            raise SpecError("feature_blur must be >= 0")
        if self.object.kind == "box" and any(int(s) < 1 for s in self.object.size):
            raise SpecError("box size must be positive")
        if self.object.kind == "ball" and self.object.radius <= 0:
            raise SpecError("ball radius must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthSpec":
        d = dict(d)
        obj = dict(d.pop("object", {}))
        for key in ("size", "start", "velocity"):
            if key in obj:
                obj[key] = tuple(obj[key])
        unknown = set(d) - {"shape", "noise_kind", "noise_level", "seed", "feature_blur"}
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        try:
            mo = MovingObject(**obj)
        except TypeError as exc:
            raise SpecError(f"bad object description: {exc}") from None
        if "shape" in d:
            d["shape"] = VolumeShape(*d["shape"])
        return cls(object=mo, **d)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["object"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["object"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def render_ground_truth(spec: SynthSpec) -> np.ndarray:
    f, h, w = spec.shape
    return np.stack([spec.object.render(t, h, w) for t in range(f)])


def _flip_threshold(level: float) -> int:
    return min(2**32, int(round(level * 2**32)))


def generate(spec: SynthSpec) -> tuple[FeatureSet, BinaryMask]:
    """Render the instance. Returns ``(features, ground_truth)``.

    ``S`` is the ground truth corrupted by the requested noise and ``F`` a
    lightly blurred intensity rendering of the clean object.
    """
    gt = render_ground_truth(spec)
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    clean = gt.astype(np.float32)
    if spec.noise_kind == "flip":
        draws = rng.integers(0, 2**32, size=gt.shape, dtype=np.uint64)
        flip = draws < _flip_threshold(spec.noise_level)
        unary = np.where(flip, 1.0 - clean, clean).astype(np.float32)
    else:
        noise = rng.standard_normal(size=gt.shape).astype(np.float32)
        unary = np.clip(clean + np.float32(spec.noise_level) * noise, 0.0, 1.0).astype(np.float32)

    if spec.feature_blur > 0:
        radius = max(1, int(math.ceil(2 * spec.feature_blur)))
        blur = make_gaussian_kernel((1.0, spec.feature_blur, spec.feature_blur), (0, radius, radius))
        feature = convolve_separable(clean, blur)
        feature = np.clip(feature / max(float(feature.max()), 1e-12), 0.0, 1.0)
    else:
        feature = clean

    features = FeatureSet(FeatureVolume(unary, Role.UNARY), (FeatureVolume(feature, Role.PAIRWISE),))
    return features, BinaryMask(gt)
