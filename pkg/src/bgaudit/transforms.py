"""Dataset probes and preprocessing transforms.

Every transform is a pure function of its input image (and, for tile
scrambling, the image's relative path). ``TransformSpec`` subclasses describe
a transform declaratively and round-trip through JSON objects of the form
``{"kind": "...", **params}``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import LabeledDataset
from .image_core import ImageTensor, to_grayscale
from .rng import MASK64, permutation, stable_hash


class TransformError(ValueError):
    """Invalid transform parameters or input geometry."""


class DegenerateInputError(TransformError):
    pass


MAX_COMPOSE_DEPTH = 4


# --------------------------------------------------------------------------
# specs


class TransformSpec:
    kind: str = ""

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out

    def __call__(self, img: ImageTensor, path: str | None = None) -> ImageTensor:
        return apply_transform(img, self, path)


@dataclass(frozen=True)
class Identity(TransformSpec):
    kind = "identity"


@dataclass(frozen=True)
class CropBackground(TransformSpec):
    x0: int = 0
    y0: int = 0
    w: int = 20
    h: int = 20
    kind = "crop_background"

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise TransformError(f"crop origin must be non-negative, got ({self.x0}, {self.y0})")
        if self.w < 1 or self.h < 1:
            raise TransformError(f"crop size must be positive, got {self.w}x{self.h}")


@dataclass(frozen=True)
class FlipAugment(TransformSpec):
    mode: str = "horizontal"
    kind = "flip_augment"

    def __post_init__(self):
        if self.mode not in ("horizontal", "vertical"):
            raise TransformError(f"flip mode must be 'horizontal' or 'vertical', got {self.mode!r}")


@dataclass(frozen=True)
class TileScramble(TransformSpec):
    tile: int = 16
    seed: int = 0
    shared: bool = False  # reuse one permutation for every image instead of per-path seeds
    kind = "tile_scramble"

    def __post_init__(self):
        if int(self.tile) < 1:
            raise TransformError(f"tile must be >= 1, got {self.tile}")
        if not 0 <= int(self.seed) <= MASK64:
            raise TransformError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class DftMagnitude(TransformSpec):
    log_scale: bool = True
    center: bool = True
    kind = "dft_magnitude"


@dataclass(frozen=True)
class DwtCompose(TransformSpec):
    family: str = "haar"
    levels: int = 1
    kind = "dwt_compose"

    def __post_init__(self):
        if self.family not in WAVELETS:
            raise TransformError(f"unknown wavelet family {self.family!r}; expected one of {sorted(WAVELETS)}")
        if int(self.levels) < 1:
            raise TransformError(f"levels must be >= 1, got {self.levels}")


@dataclass(frozen=True)
class MedianFilter(TransformSpec):
    window: int = 5
    kind = "median_filter"

    def __post_init__(self):
        _check_window(self.window)


@dataclass(frozen=True)
class Compose(TransformSpec):
    steps: tuple = ()
    kind = "compose"

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise TransformError("compose needs at least one step")
        for s in self.steps:
            if not isinstance(s, TransformSpec):
                raise TransformError(f"compose step must be a TransformSpec, got {type(s).__name__}")
        if compose_depth(self) > MAX_COMPOSE_DEPTH:
            raise TransformError(f"compose nesting depth exceeds {MAX_COMPOSE_DEPTH}")

    def to_json(self) -> dict:
        return {"kind": "compose", "steps": [s.to_json() for s in self.steps]}


def compose_depth(spec: TransformSpec) -> int:
    if isinstance(spec, Compose):
        return 1 + max(compose_depth(s) for s in spec.steps)
    return 0


def compose(specs) -> Compose:
    """Chain specs, applied left to right."""
    return Compose(tuple(specs))


KINDS = {
    cls.kind: cls
    for cls in (Identity, CropBackground, FlipAugment, TileScramble, DftMagnitude, DwtCompose, MedianFilter, Compose)
}

_FIELD_TYPES = {"x0": int, "y0": int, "w": int, "h": int, "tile": int, "seed": int, "levels": int, "window": int}


def spec_from_json(obj) -> TransformSpec:
    """Build a spec from a parsed JSON object (or a JSON string)."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    if not isinstance(obj, dict):
        raise TransformError(f"transform must be a JSON object, got {type(obj).__name__}")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise TransformError(f"unknown transform kind {kind!r}; expected one of {sorted(KINDS)}")
    params = {k: v for k, v in obj.items() if k != "kind"}
    if kind == "compose":
        if set(params) != {"steps"} or not isinstance(params["steps"], list):
            raise TransformError("compose expects exactly one field 'steps' holding a list")
        return Compose(tuple(spec_from_json(s) for s in params["steps"]))
    cls = KINDS[kind]
    allowed = {f.name for f in fields(cls)}
    unknown = set(params) - allowed
    if unknown:
        raise TransformError(f"{kind}: unknown field(s) {sorted(unknown)}")
    for name, value in params.items():
        want = _FIELD_TYPES.get(name)
        if want is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise TransformError(f"{kind}.{name} must be an integer, got {value!r}")
        if name in ("log_scale", "center", "shared") and not isinstance(value, bool):
            raise TransformError(f"{kind}.{name} must be a boolean, got {value!r}")
    return cls(**params)


# --------------------------------------------------------------------------
# geometric probes


def crop_background(img: ImageTensor, x0: int = 0, y0: int = 0, w: int = 20, h: int = 20) -> ImageTensor:
    """The w x h block whose top-left corner is (x0, y0)."""
    if x0 < 0 or y0 < 0:
        raise TransformError(f"crop origin must be non-negative, got ({x0}, {y0})")
    if x0 + w > img.width:
        raise TransformError(f"crop right edge x0+w={x0 + w} exceeds image width {img.width}")
    if y0 + h > img.height:
        raise TransformError(f"crop bottom edge y0+h={y0 + h} exceeds image height {img.height}")
    return ImageTensor(img.data[y0:y0 + h, x0:x0 + w])


def flip_augment(img: ImageTensor, mode: str = "horizontal") -> ImageTensor:
    if mode == "horizontal":
        return ImageTensor(img.data[:, ::-1])
    if mode == "vertical":
        return ImageTensor(img.data[::-1])
    raise TransformError(f"flip mode must be 'horizontal' or 'vertical', got {mode!r}")


def scramble_permutation(n_tiles: int, seed: int) -> np.ndarray:
    return permutation(n_tiles, seed)


def tile_scramble(img: ImageTensor, tile: int, seed: int) -> ImageTensor:
    """Cut into non-overlapping tile x tile blocks and shuffle them.

    The bottom/right remainder that does not fill a whole tile is dropped
    first. Output tile slot i (row-major) receives input tile perm[i].
    """
    if tile < 1:
        raise TransformError(f"tile must be >= 1, got {tile}")
    rows, cols = img.height // tile, img.width // tile
    if rows == 0 or cols == 0:
        raise DegenerateInputError(
            f"tile {tile} does not fit in a {img.height}x{img.width} image"
        )
    c = img.channels
    d = img.data[: rows * tile, : cols * tile]
    tiles = d.reshape(rows, tile, cols, tile, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, tile, tile, c)
    perm = scramble_permutation(rows * cols, seed)
    out = tiles[perm].reshape(rows, cols, tile, tile, c).transpose(0, 2, 1, 3, 4)
    return ImageTensor(out.reshape(rows * tile, cols * tile, c))


# --------------------------------------------------------------------------
# frequency domain


def rescale_unit(a: np.ndarray) -> np.ndarray:
    """Affine map onto [0, 1]; a constant array maps to zeros."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.zeros_like(a, dtype=np.float64)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def dft_spectrum(gray: np.ndarray, log_scale: bool = False, center: bool = False) -> np.ndarray:
    """Unnormalized 2D DFT magnitude of a 2D array, before any rescaling."""
    mag = np.abs(np.fft.fft2(np.asarray(gray, dtype=np.float64)))
    if log_scale:
        mag = np.log1p(mag)
    if center:
        mag = np.fft.fftshift(mag)
    return mag


def dft_magnitude(img: ImageTensor, log_scale: bool = True, center: bool = True) -> ImageTensor:
    gray = to_grayscale(img).data[:, :, 0]
    return ImageTensor(rescale_unit(dft_spectrum(gray, log_scale, center))[:, :, None])


# --------------------------------------------------------------------------
# wavelets

_S3 = np.sqrt(3.0)
WAVELETS = {
    "haar": np.array([1.0, 1.0]) / np.sqrt(2.0),
    "db4": np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * np.sqrt(2.0)),
}


def wavelet_filters(family: str):
    """Orthonormal (lowpass, highpass) analysis pair; g[m] = (-1)^m h[L-1-m]."""
    try:
        h = WAVELETS[family]
    except KeyError:
        raise TransformError(f"unknown wavelet family {family!r}") from None
    g = h[::-1] * (-1.0) ** np.arange(len(h))
    return h, g


def _analyze(x: np.ndarray, filt: np.ndarray, axis: int) -> np.ndarray:
    # y[k] = sum_m f[m] x[(2k + m) mod N] along `axis`
    x = np.moveaxis(x, axis, 0)
    out = sum(f * np.roll(x, -m, axis=0)[0::2] for m, f in enumerate(filt))
    return np.moveaxis(out, 0, axis)


def _synthesize(lo: np.ndarray, hi: np.ndarray, h: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    # x[n] = sum_k lo[k] h[n - 2k] + hi[k] g[n - 2k]   (indices mod N)
    lo = np.moveaxis(lo, axis, 0)
    hi = np.moveaxis(hi, axis, 0)
    n = 2 * lo.shape[0]
    up_lo = np.zeros((n,) + lo.shape[1:])
    up_hi = np.zeros((n,) + hi.shape[1:])
    up_lo[0::2] = lo
    up_hi[0::2] = hi
    out = sum(h[m] * np.roll(up_lo, m, axis=0) + g[m] * np.roll(up_hi, m, axis=0) for m in range(len(h)))
    return np.moveaxis(out, 0, axis)


def _check_dwt_size(shape, family: str, levels: int):
    support = len(WAVELETS[family])
    for dim in shape:
        size = dim
        for level in range(levels):
            if size % 2 or size < support:
                raise DegenerateInputError(
                    f"image dimension {dim} too small or not divisible for {levels}-level "
                    f"{family} DWT (level {level + 1} needs an even size >= {support})"
                )
            size //= 2


def dwt2(x: np.ndarray, family: str = "haar"):
    """One level of separable periodic 2D DWT.

    Returns (LL, LH, HL, HH); the first letter is the filter applied along
    axis 0 (height), the second along axis 1 (width).
    """
    x = np.asarray(x, dtype=np.float64)
    _check_dwt_size(x.shape, family, 1)
    h, g = wavelet_filters(family)
    lo = _analyze(x, h, 0)
    hi = _analyze(x, g, 0)
    return _analyze(lo, h, 1), _analyze(lo, g, 1), _analyze(hi, h, 1), _analyze(hi, g, 1)


def idwt2(ll, lh, hl, hh, family: str = "haar") -> np.ndarray:
    h, g = wavelet_filters(family)
    lo = _synthesize(ll, lh, h, g, 1)
    hi = _synthesize(hl, hh, h, g, 1)
    return _synthesize(lo, hi, h, g, 0)


def wavedec2(x: np.ndarray, family: str = "haar", levels: int = 1):
    """Multi-level decomposition: [LL_n, (LH_n, HL_n, HH_n), ..., (LH_1, HL_1, HH_1)]."""
    x = np.asarray(x, dtype=np.float64)
    _check_dwt_size(x.shape, family, levels)
    details = []
    approx = x
    for _ in range(levels):
        approx, lh, hl, hh = dwt2(approx, family)
        details.append((lh, hl, hh))
    return [approx] + details[::-1]


def waverec2(coeffs, family: str = "haar") -> np.ndarray:
    approx = coeffs[0]
    for lh, hl, hh in coeffs[1:]:
        approx = idwt2(approx, lh, hl, hh, family)
    return approx


def dwt_layout(coeffs, rescale: bool = True) -> np.ndarray:
    """Arrange a decomposition as nested quadrants [[LL, LH], [HL, HH]]."""
    block = rescale_unit(coeffs[0]) if rescale else coeffs[0]
    for lh, hl, hh in coeffs[1:]:
        if rescale:
            lh, hl, hh = rescale_unit(lh), rescale_unit(hl), rescale_unit(hh)
        block = np.block([[block, lh], [hl, hh]])
    return block


def dwt_compose(img: ImageTensor, family: str = "haar", levels: int = 1) -> ImageTensor:
    gray = to_grayscale(img).data[:, :, 0]
    coeffs = wavedec2(gray, family, levels)
    return ImageTensor(dwt_layout(coeffs, rescale=True)[:, :, None])


# --------------------------------------------------------------------------
# median filtering


def _check_window(window):
    if isinstance(window, bool) or not isinstance(window, (int, np.integer)):
        raise TransformError(f"median window must be an integer, got {window!r}")
    if window < 3 or window % 2 == 0:
        raise TransformError(f"median window must be odd and >= 3, got {window}")


def median_filter(img: ImageTensor, window: int = 5) -> ImageTensor:
    """Exact window x window median with replicate padding, per channel."""
    _check_window(window)
    r = window // 2
    padded = np.pad(img.data, ((r, r), (r, r), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (window, window), axis=(0, 1))
    flat = win.reshape(win.shape[:3] + (window * window,))
    # odd count: partition places the exact middle order statistic at index k
    k = window * window // 2
    return ImageTensor(np.partition(flat, k, axis=-1)[..., k])


# --------------------------------------------------------------------------
# dispatch


def apply_transform(img: ImageTensor, spec: TransformSpec, path: str | None = None) -> ImageTensor:
    """Apply ``spec`` to one image.

    ``path`` (the image's dataset-relative path) only matters for tile
    scrambling, where the effective seed is ``seed XOR stable_hash(path)``
    unless the spec is ``shared``.
    """
    if isinstance(spec, Identity):
        return img
    if isinstance(spec, CropBackground):
        return crop_background(img, spec.x0, spec.y0, spec.w, spec.h)
    if isinstance(spec, FlipAugment):
        return flip_augment(img, spec.mode)
    if isinstance(spec, TileScramble):
        seed = int(spec.seed)
        if path is not None and not spec.shared:
            seed ^= stable_hash(path)
        return tile_scramble(img, int(spec.tile), seed)
    if isinstance(spec, DftMagnitude):
        return dft_magnitude(img, spec.log_scale, spec.center)
    if isinstance(spec, DwtCompose):
        return dwt_compose(img, spec.family, int(spec.levels))
    if isinstance(spec, MedianFilter):
        return median_filter(img, int(spec.window))
    if isinstance(spec, Compose):
        for step in spec.steps:
            img = apply_transform(img, step, path)
        return img
    raise TransformError(f"not a transform spec: {spec!r}")


def apply_to_dataset(ds: LabeledDataset, spec: TransformSpec, jobs: int = 1) -> LabeledDataset:
    """Transform every image, keeping order, labels and split assignment."""

    def one(item):
        try:
            return apply_transform(item.image, spec, item.path)
        except Exception as exc:
            raise TransformError(f"transform failed on {item.path}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            images = list(pool.map(one, ds.items))
    else:
        images = [one(it) for it in ds.items]
    items = [replace(it, image=im) for it, im in zip(ds.items, images)]
    return LabeledDataset(list(ds.class_names), items, dict(ds.meta))
