"""CalibrationSet persistence: one manifest tying all fitted stages together.

The manifest is a flat INI file holding the noise parameters, MTF model,
distortion and homography, color matrix, oversampling factor and
provenance, plus a relative reference to the vignetting map stored as a
UFI payload next to it.  Loading revalidates every component invariant
and requires referenced files to exist.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as _tool_version
from .color import ColorCorrection
from .geometry import DistortionParams, Homography
from .imgcore import read_ufi, write_ufi
from .mtf import MtfModel
from .noisemodel import NoiseParams
from .vignette import VignettingMap

__all__ = ["CalibrationSet", "save_calibration", "load_calibration"]


def _fmt_floats(values):
    return ",".join(repr(float(v)) for v in np.asarray(values).ravel())


def _parse_floats(text, n=None):
    vals = [float(v) for v in text.split(",") if v.strip() != ""]
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} values, got {len(vals)}")
    return vals


@dataclass
class CalibrationSet:
    """Everything the correction pipeline needs, fitted or ground truth."""

    noise: NoiseParams
    mtf: MtfModel | None = None
    vignetting: VignettingMap | None = None
    distortion: DistortionParams = field(default_factory=DistortionParams)
    homography: Homography = field(default_factory=Homography.identity)
    color: ColorCorrection | None = None
    oversampling: int = 4
    kernel: str = "bilinear"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.oversampling) < 1:
            raise ValueError("oversampling must be a positive integer")
        self.oversampling = int(self.oversampling)


def save_calibration(calib, path):
    """Write the manifest and its vignetting UFI payload."""
    cp = configparser.ConfigParser()
    cp["provenance"] = {"tool_version": _tool_version}
    for key, value in calib.provenance.items():
        cp["provenance"][str(key)] = str(value)

    cp["noise"] = {
        "k": _fmt_floats(calib.noise.k),
        "sigma2_read": _fmt_floats(calib.noise.sigma2_read),
        "sigma2_adc": _fmt_floats(calib.noise.sigma2_adc),
        "dark_offset": repr(calib.noise.dark_offset),
    }
    if calib.mtf is not None:
        cp["mtf"] = {
            "params": _fmt_floats(calib.mtf.params()),
            "clamp_floor": repr(calib.mtf.clamp_floor),
        }
    cp["geometry"] = {
        "homography": _fmt_floats(calib.homography.matrix),
        "distortion": _fmt_floats(calib.distortion.coeffs()),
        "norm_scale": repr(calib.distortion.norm_scale),
    }
    if calib.color is not None:
        cp["color"] = {
            "mode": calib.color.mode,
            "matrix": _fmt_floats(calib.color.matrix),
        }
    cp["pipeline"] = {
        "oversampling": str(calib.oversampling),
        "kernel": calib.kernel,
    }
    if calib.vignetting is not None:
        vfile = os.path.splitext(os.path.basename(path))[0] + ".vignetting.ufi"
        vpath = os.path.join(os.path.dirname(path) or ".", vfile)
        write_ufi(calib.vignetting.to_image(), vpath)
        cp["vignetting"] = {"file": vfile}

    with open(path, "w") as fh:
        cp.write(fh)


def load_calibration(path):
    """Read a manifest, loading referenced payloads and revalidating invariants."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"calibration manifest {path!r} not found")

    noise = NoiseParams(
        k=tuple(_parse_floats(cp["noise"]["k"], 3)),
        sigma2_read=tuple(_parse_floats(cp["noise"]["sigma2_read"], 3)),
        sigma2_adc=tuple(_parse_floats(cp["noise"]["sigma2_adc"], 3)),
        dark_offset=float(cp["noise"].get("dark_offset", "0.0")),
    )
    mtf_model = None
    if cp.has_section("mtf"):
        params = _parse_floats(cp["mtf"]["params"], 6)
        mtf_model = MtfModel(*params, clamp_floor=float(cp["mtf"]["clamp_floor"]))
    geom = cp["geometry"]
    homography = Homography(np.array(_parse_floats(geom["homography"], 9)).reshape(3, 3))
    dist_coeffs = _parse_floats(geom["distortion"], 5)
    distortion = DistortionParams(*dist_coeffs, norm_scale=float(geom["norm_scale"]))
    color = None
    if cp.has_section("color"):
        mode = cp["color"]["mode"]
        n = 9 if mode == "linear3x3" else 18
        shape = (3, 3) if mode == "linear3x3" else (3, 6)
        color = ColorCorrection(mode, np.array(_parse_floats(cp["color"]["matrix"], n)).reshape(shape))
    vignetting = None
    if cp.has_section("vignetting"):
        vpath = os.path.join(os.path.dirname(path) or ".", cp["vignetting"]["file"])
        if not os.path.exists(vpath):
            raise FileNotFoundError(f"vignetting payload {vpath!r} missing")
        vimg = read_ufi(vpath)
        vignetting = VignettingMap(vimg.mean)

    pipeline = cp["pipeline"] if cp.has_section("pipeline") else {}
    provenance = dict(cp["provenance"]) if cp.has_section("provenance") else {}
    return CalibrationSet(
        noise=noise,
        mtf=mtf_model,
        vignetting=vignetting,
        distortion=distortion,
        homography=homography,
        color=color,
        oversampling=int(pipeline.get("oversampling", 4)),
        kernel=pipeline.get("kernel", "bilinear"),
        provenance=provenance,
    )
