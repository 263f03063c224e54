"""Registration of a moving volume to a fixed template."""
from .bspline import BSplineTransform, bending_energy
from .metric import ParzenMI, mattes_mi
from .optimize import RegistrationConfig, register_affine, register_bspline
from .transforms import (
    AffineTransform,
    DisplacementField,
    affine_field,
    bspline_field,
    compose_fields,
    invert_field,
    load_bspline,
    save_bspline,
    warp,
)

__all__ = [
    "AffineTransform",
    "BSplineTransform",
    "DisplacementField",
    "ParzenMI",
    "RegistrationConfig",
    "affine_field",
    "bending_energy",
    "bspline_field",
    "compose_fields",
    "invert_field",
    "load_bspline",
    "mattes_mi",
    "register_affine",
    "register_bspline",
    "save_bspline",
    "warp",
]
