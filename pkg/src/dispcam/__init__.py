"""Camera-based display measurement with uncertainty and perceptual scoring.

The package reconstructs distortion-free display measurements (with
per-pixel variance or covariance) from multi-exposure captures, scores
perceptual differences on the JOD scale with propagated uncertainty, and
ships a forward simulator plus Monte Carlo machinery to validate every
analytic uncertainty claim.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    calibration,
    color,
    defects,
    geometry,
    hdrmerge,
    imgcore,
    mcvalidate,
    mtf,
    noisemodel,
    simulate,
    vdp,
    vignette,
)
