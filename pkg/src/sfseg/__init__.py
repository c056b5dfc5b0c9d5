"""Matrix-free spectral segmentation of space-time volumes."""

from .conv3d import SeparableKernel3D, convolve_direct, convolve_separable, make_gaussian_kernel
from .engine import (
    RunTrace,
    SfsegConfig,
    normalize_l2,
    project_binary,
    run,
    sfseg_step,
    sfseg_step_channel,
)
from .errors import (
    CapacityError,
    CorruptionError,
    DegenerateSolutionError,
    FormatError,
    ParameterError,
    SfsegError,
    ShapeError,
    SpecError,
    ValidationError,
)
from .metrics import BinaryMask, angle_degrees, jaccard, threshold_final
from .volume import FeatureSet, FeatureVolume, Role, VolumeShape, load_volume, save_volume

__version__ = "0.1.0"
