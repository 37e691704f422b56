"""Image representation, PNG/PNM I/O, grayscale conversion and resizing."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Raised for files that decode but violate the supported format contract."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A single H x W x C image with float intensities in [0, 1].

    ``data`` is stored read-only so transforms cannot mutate their inputs.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image data must be H x W x C, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ValueError(f"image must be at least 1x1, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError(
                f"intensities must lie in [0, 1], got [{arr.min():.6g}, {arr.max():.6g}]"
            )
        if arr is self.data or np.shares_memory(arr, self.data):
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None

    @classmethod
    def from_array(cls, arr, clip: bool = False) -> "ImageTensor":
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)


def quantize(img: ImageTensor) -> np.ndarray:
    """8-bit codes for an image; halves round away from zero (0.5 -> 128)."""
    return np.floor(img.data * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> ImageTensor:
    """Read an 8-bit gray/RGB PNG or binary PGM/PPM into an ImageTensor."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise OSError(f"cannot read image {path!r}: {exc}") from exc
    if head.startswith(b"\x89PNG"):
        fmt = "PNG"
    elif head[:2] in (b"P5", b"P6"):
        fmt = "PPM"
    else:
        raise ImageFormatError(f"{path}: unsupported file format (expected PNG or binary PGM/PPM)")
    try:
        with Image.open(path, formats=[fmt]) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                if "transparency" in im.info:
                    raise ImageFormatError(f"{path}: alpha channel (palette transparency) not supported")
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("RGBA", "LA", "PA") or "transparency" in im.info:
                raise ImageFormatError(f"{path}: alpha channel not supported (mode {mode})")
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageFormatError(f"{path}: unsupported bit depth 16/32 (mode {mode}); only 8-bit supported")
            if mode == "1":
                raise ImageFormatError(f"{path}: unsupported bit depth 1; only 8-bit supported")
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported color mode {mode}")
            raw = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except OSError as exc:
        raise OSError(f"cannot decode image {path!r}: {exc}") from exc
    return ImageTensor(raw.astype(np.float64) / 255.0)


def save_image(img: ImageTensor, path) -> None:
    """Write ``img`` as an 8-bit PNG (gray or RGB). Output bytes are deterministic."""
    path = os.fspath(path)
    codes = quantize(img)
    if img.channels == 1:
        pil = Image.fromarray(codes[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(codes, mode="RGB")
    try:
        pil.save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"cannot write image {path!r}: {exc}") from exc


LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(img: ImageTensor) -> ImageTensor:
    if img.channels == 1:
        return img
    gray = img.data @ LUMA
    # weights sum to 1, so only rounding can push values past the bounds
    return ImageTensor(np.clip(gray, 0.0, 1.0)[:, :, None])


def _interp_axis(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return img
    y0, y1, fy = _interp_axis(img.height, out_h)
    x0, x1, fx = _interp_axis(img.width, out_w)
    d = img.data
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = d[y0][:, x0] * (1 - fx) + d[y0][:, x1] * fx
    bot = d[y1][:, x0] * (1 - fx) + d[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return ImageTensor(np.clip(out, 0.0, 1.0))
