"""Image containers with per-pixel uncertainty, coordinate conventions and UFI file I/O.

Arrays are float64 in memory (variances spanning many orders of magnitude
lose precision when accumulated in float32) and float32 on disk.

Coordinate convention: all centered coordinate frames (display ``s``,
undistorted ``g``, raw ``p``) have their origin at the image/display
center, x pointing right and y pointing up, in pixel units.  Storage is
row-major from the top-left corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImagePlane",
    "UncertainImage",
    "FRAME_DISPLAY",
    "FRAME_UNDISTORTED",
    "FRAME_RAW",
    "coord_to_storage",
    "storage_to_coord",
    "read_ufi",
    "write_ufi",
    "UfiFormatError",
]

FRAME_DISPLAY = "s"
FRAME_UNDISTORTED = "g"
FRAME_RAW = "p"

# Fixed-length ASCII header incl. trailing newline; byte layout is part of
# the file contract.
_UFI_HEADER_LEN = 24
_UFI_MAGIC = "UFI1"


class UfiFormatError(ValueError):
    """Raised for malformed or inconsistent UFI payloads."""


def _as_plane(data, name="plane"):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


class ImagePlane:
    """A single 2-D plane of finite real values (radiance or variance units)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_plane(data, "ImagePlane")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def copy(self):
        return ImagePlane(self.data.copy())

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(
            np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"ImagePlane({self.width}x{self.height})"


@dataclass
class UncertainImage:
    """Per-pixel mean plane(s) plus uncertainty.

    In diagonal mode ``uncertainty`` holds one variance plane per channel
    (shape ``(C, H, W)``).  In full (covariance) mode it holds a per-pixel
    3x3 covariance stored as 9 planes in row-major matrix order (shape
    ``(9, H, W)``).  Full mode only exists for 3-channel images (post
    color correction).

    ``valid`` is an optional boolean mask marking pixels that carry
    meaningful values (e.g. all-saturated pixels after merging, or
    display-grid samples that fell outside the captured frame).  The mask
    is an in-memory annotation only; the UFI format does not serialize it.
    """

    mean: np.ndarray
    uncertainty: np.ndarray
    mode: str = "diag"
    valid: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.uncertainty = np.asarray(self.uncertainty, dtype=np.float64)
        if self.mean.ndim == 2:
            self.mean = self.mean[None, :, :]
        if self.uncertainty.ndim == 2:
            self.uncertainty = self.uncertainty[None, :, :]
        if self.mean.ndim != 3:
            raise ValueError(f"mean must be (C,H,W), got {self.mean.shape}")
        c = self.mean.shape[0]
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        if self.mode not in ("diag", "cov"):
            raise ValueError(f"unknown uncertainty mode {self.mode!r}")
        if self.mode == "diag":
            if self.uncertainty.shape != self.mean.shape:
                raise ValueError(
                    "diagonal uncertainty shape "
                    f"{self.uncertainty.shape} != mean shape {self.mean.shape}"
                )
        else:
            if c != 3:
                raise ValueError("covariance mode requires 3 channels")
            if self.uncertainty.shape != (9,) + self.mean.shape[1:]:
                raise ValueError(
                    f"covariance must be (9,H,W), got {self.uncertainty.shape}"
                )
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("mean contains non-finite values")
        if not np.all(np.isfinite(self.uncertainty)):
            raise ValueError("uncertainty contains non-finite values")
        if self.mode == "diag":
            if np.any(self.uncertainty < 0):
                raise ValueError("diagonal variances must be non-negative")
        else:
            cov = self.uncertainty
            if np.any(cov[[0, 4, 8]] < 0):
                raise ValueError("covariance diagonal must be non-negative")
            scale = max(np.abs(cov).max(), 1.0)
            for a, b in ((1, 3), (2, 6), (5, 7)):
                if np.abs(cov[a] - cov[b]).max() > 1e-9 * scale:
                    raise ValueError("per-pixel covariance is not symmetric")
            # make symmetry exact so serialization round-trips bit-for-bit
            for a, b in ((1, 3), (2, 6), (5, 7)):
                sym = 0.5 * (cov[a] + cov[b])
                cov[a] = sym
                cov[b] = sym
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.mean.shape[1:]:
                raise ValueError(
                    f"valid mask shape {self.valid.shape} != image {self.mean.shape[1:]}"
                )

    @property
    def channels(self):
        return self.mean.shape[0]

    @property
    def height(self):
        return self.mean.shape[1]

    @property
    def width(self):
        return self.mean.shape[2]

    def all_valid(self):
        return self.valid is None or bool(self.valid.all())

    def valid_mask(self):
        if self.valid is None:
            return np.ones(self.mean.shape[1:], dtype=bool)
        return self.valid

    def copy(self):
        return UncertainImage(
            self.mean.copy(),
            self.uncertainty.copy(),
            self.mode,
            None if self.valid is None else self.valid.copy(),
        )

    def cov_at(self, row, col):
        """Return the 3x3 covariance matrix at a pixel (full mode only)."""
        if self.mode != "cov":
            raise ValueError("cov_at requires covariance mode")
        return self.uncertainty[:, row, col].reshape(3, 3)

    def __eq__(self, other):
        if not isinstance(other, UncertainImage):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.mean.shape == other.mean.shape
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.uncertainty, other.uncertainty)
        )


def coord_to_storage(c, dims):
    """Map a centered (x right, y up) coordinate to a storage (row, col) index.

    Rounding is nearest with ties going up on x and down on y after the
    vertical flip, so the mapping is deterministic for half-integer inputs.

    Raises ValueError for coordinates outside the image.
    """
    x, y = float(c[0]), float(c[1])
    width, height = int(dims[0]), int(dims[1])
    if abs(x) > width / 2 or abs(y) > height / 2:
        raise ValueError(f"coordinate ({x},{y}) outside {width}x{height} extent")
    col = math.floor(x + (width - 1) / 2 + 0.5)  # half-up
    row = math.ceil((height - 1) / 2 - y - 0.5)  # half-down after flip
    if not (0 <= col < width and 0 <= row < height):
        raise ValueError(f"coordinate ({x},{y}) rounds outside {width}x{height}")
    return row, col


def storage_to_coord(index, dims):
    """Centered coordinate of a storage (row, col) index (inverse of above)."""
    row, col = int(index[0]), int(index[1])
    width, height = int(dims[0]), int(dims[1])
    if not (0 <= col < width and 0 <= row < height):
        raise ValueError(f"index ({row},{col}) outside {width}x{height}")
    x = col - (width - 1) / 2
    y = (height - 1) / 2 - row
    return x, y


def _format_header(width, height, channels, mode):
    line = f"{_UFI_MAGIC} {width} {height} {channels} {mode}"
    if len(line) >= _UFI_HEADER_LEN:
        raise UfiFormatError(f"dimensions too large for UFI header: {line!r}")
    return (line + " " * (_UFI_HEADER_LEN - 1 - len(line)) + "\n").encode("ascii")


def write_ufi(img, path):
    """Write an UncertainImage to a UFI file.

    Layout: 24-byte ASCII header ``UFI1 <w> <h> <channels> <mode>`` padded
    with spaces and terminated by a newline, followed by little-endian
    float32 planes: mean[0..C) then var[0..C) (diag) or cov[0..9) (cov),
    each row-major from the top-left.
    """
    if not isinstance(img, UncertainImage):
        raise TypeError("write_ufi expects an UncertainImage")
    if not img.all_valid():
        raise ValueError("cannot serialize an image with invalid pixels")
    header = _format_header(img.width, img.height, img.channels, img.mode)
    planes = np.concatenate([img.mean, img.uncertainty], axis=0)
    payload = planes.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_ufi(path):
    """Read a UFI file written by :func:`write_ufi`.

    Raises UfiFormatError on bad magic, truncated payload, non-finite
    values, or negative variances.
    """
    with open(path, "rb") as fh:
        header = fh.read(_UFI_HEADER_LEN)
        payload = fh.read()
    if len(header) < _UFI_HEADER_LEN or not header.endswith(b"\n"):
        raise UfiFormatError("truncated or malformed UFI header")
    try:
        fields = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise UfiFormatError("UFI header is not ASCII") from exc
    if len(fields) != 5 or fields[0] != _UFI_MAGIC:
        raise UfiFormatError(f"bad UFI magic/header: {header!r}")
    try:
        width, height, channels = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise UfiFormatError(f"non-integer dimensions in header: {header!r}") from exc
    mode = fields[4]
    if mode not in ("diag", "cov"):
        raise UfiFormatError(f"unknown UFI mode {mode!r}")
    if width < 1 or height < 1 or channels not in (1, 3):
        raise UfiFormatError(f"invalid dimensions {width}x{height}x{channels}")
    n_unc = channels if mode == "diag" else 9
    expected = (channels + n_unc) * height * width * 4
    if len(payload) != expected:
        raise UfiFormatError(
            f"payload has {len(payload)} bytes, expected {expected}"
        )
    planes = np.frombuffer(payload, dtype="<f4").reshape(
        channels + n_unc, height, width
    )
    if not np.all(np.isfinite(planes)):
        raise UfiFormatError("UFI payload contains non-finite values")
    mean = planes[:channels].astype(np.float64)
    unc = planes[channels:].astype(np.float64)
    if mode == "diag" and np.any(unc < 0):
        raise UfiFormatError("UFI payload has negative variances")
    try:
        return UncertainImage(mean, unc, mode)
    except ValueError as exc:
        raise UfiFormatError(f"inconsistent UFI payload: {exc}") from exc


def float32_roundtrip(img):
    """Return a copy of *img* quantized to float32, as serialization would."""
    return UncertainImage(
        img.mean.astype(np.float32).astype(np.float64),
        img.uncertainty.astype(np.float32).astype(np.float64),
        img.mode,
        None if img.valid is None else img.valid.copy(),
    )
