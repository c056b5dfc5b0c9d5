"""Named synthetic instances with the configurations tuned for them.

``denoising`` is a 6-frame box corrupted by 30% flip noise, paired with a
configuration that reconstructs it. ``eigen_recovery`` is a small instance
for comparing engine iterates against the explicit eigenvector, with
binarization switched off.
"""

from __future__ import annotations

from .engine import SfsegConfig
from .synth import MovingObject, SynthSpec
from .volume import VolumeShape


def denoising_spec(seed: int = 7) -> SynthSpec:
    return SynthSpec(
        shape=VolumeShape(6, 48, 48),
        object=MovingObject(kind="box", size=(24, 24), start=(12.0, 9.0), velocity=(0.0, 1.0)),
        noise_kind="flip",
        noise_level=0.3,
        seed=seed,
        feature_blur=0.5,
    )


def denoising_config(**overrides) -> SfsegConfig:
    # p = 0: with binary S, any p > 0 zeroes every flipped-off voxel for good.
    cfg = SfsegConfig(
        alpha=1.0,
        p=0.0,
        kernel_sigmas=(0.5, 1.0, 1.0),
        kernel_radii=(1, 3, 3),
        iterations=5,
        binarize_start=1,
        sigmoid_slope0=20.0,
        slope_growth=2.0,
        threshold_frac=0.45,
        final_threshold=0.5,
    )
    return cfg.with_(**overrides) if overrides else cfg


def eigen_recovery_spec(seed: int = 7) -> SynthSpec:
    return SynthSpec(
        shape=VolumeShape(6, 20, 20),
        object=MovingObject(kind="box", size=(8, 8), start=(6.0, 4.0), velocity=(0.0, 1.0)),
        noise_kind="flip",
        noise_level=0.3,
        seed=seed,
        feature_blur=1.0,
    )


def eigen_recovery_config(iterations: int = 100, **overrides) -> SfsegConfig:
    return SfsegConfig(iterations=iterations, binarize_start=iterations + 1, **overrides)
