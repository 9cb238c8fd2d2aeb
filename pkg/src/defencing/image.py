"""Image and patch containers, file I/O, and full-reference quality metrics.

Images are stored planar (one row-major plane per channel) as float64
samples in [0, 1]. Supported file formats: 8-bit PNG and binary PGM (P5) /
PPM (P6) with maxval 255 or 65535.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "Image",
    "Patch",
    "FenceMask",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "psnr",
    "ssim",
    "extract_patch",
    "resize_bilinear",
]


@dataclass(frozen=True)
class Image:
    """Multi-channel raster of unit-range samples, immutable after construction.

    ``planes`` has shape (channels, height, width); channels is 1 or 3.
    """

    planes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.planes, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ValueError(f"image array must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[0] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"zero-dimension image: shape {arr.shape}")
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        object.__setattr__(self, "planes", arr)

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Flat sample vector, planar layout (channel-major, then row-major)."""
        return self.planes.ravel()

    def luminance(self) -> np.ndarray:
        """(height, width) luminance plane: the channel mean for RGB."""
        if self.channels == 1:
            return self.planes[0]
        return self.planes.mean(axis=0)

    @classmethod
    def constant(cls, width: int, height: int, channels: int = 1, value: float = 0.0) -> "Image":
        return cls(np.full((channels, height, width), value, dtype=np.float64))


@dataclass(frozen=True)
class Patch:
    """Square window cut from an image; ``origin`` is its center in source coords."""

    planes: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.planes, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"patch must be square, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise ValueError("patch side must be positive")
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        object.__setattr__(self, "planes", arr)

    @property
    def side(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def samples(self) -> np.ndarray:
        return self.planes.ravel()

    def luminance(self) -> np.ndarray:
        if self.channels == 1:
            return self.planes[0]
        return self.planes.mean(axis=0)


@dataclass(frozen=True)
class FenceMask:
    """Per-pixel binary occlusion map: True (1) marks fence, False background.

    The fusion data term keeps exactly the pixels where ``bits`` is False.
    """

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr = arr.astype(bool)
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def coverage(self) -> float:
        """Fraction of pixels marked as fence."""
        return float(self.bits.mean())

    def keep_weights(self) -> np.ndarray:
        """(H, W) float64 data-term weights: 1 where background-visible, 0 where fenced."""
        return (~self.bits).astype(np.float64)


# --- file I/O ---------------------------------------------------------------


def _read_pnm(path: Path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6); returns (channels, H, W) in [0, 1]."""
    data = path.read_bytes()

    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed. Pixel data starts after the single whitespace
    # byte that terminates maxval.
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r} (binary P5/P6 only)")
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    pos += 1  # single whitespace after maxval
    if width < 1 or height < 1:
        raise ValueError(f"{path}: zero-dimension image {width}x{height}")
    if maxval not in (255, 65535):
        raise ValueError(f"{path}: unsupported maxval {maxval} (255 or 65535)")

    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    raw = data[pos : pos + count * dtype.itemsize]
    if len(raw) < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated pixel data")
    flat = np.frombuffer(raw, dtype=dtype).astype(np.float64) / maxval
    # PNM is interleaved row-major; convert to planar.
    return flat.reshape(height, width, channels).transpose(2, 0, 1)


def _write_pnm(image: Image, path: Path) -> None:
    magic = b"P5" if image.channels == 1 else b"P6"
    interleaved = np.rint(image.planes * 255.0).astype(np.uint8).transpose(1, 2, 0)
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    path.write_bytes(header + interleaved.tobytes())


def load_image(path: str | Path) -> Image:
    """Load a PNG or binary PGM/PPM file, scaling samples to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise OSError(f"no such image file: {path}")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return Image(_read_pnm(path))
    if suffix == ".png":
        try:
            with PILImage.open(path) as pil:
                pil.load()
                if pil.mode in ("I;16", "I"):
                    arr = np.asarray(pil, dtype=np.float64) / 65535.0
                    return Image(arr[None, :, :])
                if pil.mode not in ("L", "RGB"):
                    pil = pil.convert("RGB" if len(pil.getbands()) >= 3 else "L")
                arr = np.asarray(pil, dtype=np.float64) / 255.0
        except (OSError, SyntaxError) as exc:
            raise ValueError(f"{path}: unreadable PNG ({exc})") from exc
        if arr.ndim == 2:
            return Image(arr[None, :, :])
        return Image(arr.transpose(2, 0, 1))
    raise ValueError(f"{path}: unsupported format {suffix!r} (png/pgm/ppm)")


def save_image(image: Image, path: str | Path) -> None:
    """Write 8-bit PNG or PGM/PPM chosen by extension; samples quantized by round(s*255)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        expected = ".pgm" if image.channels == 1 else ".ppm"
        if suffix != ".pnm" and suffix != expected:
            raise ValueError(f"{path}: {suffix} cannot hold a {image.channels}-channel image")
        _write_pnm(image, path)
        return
    if suffix == ".png":
        quantized = np.rint(image.planes * 255.0).astype(np.uint8)
        if image.channels == 1:
            pil = PILImage.fromarray(quantized[0], mode="L")
        else:
            pil = PILImage.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
        pil.save(path, format="PNG")
        return
    raise ValueError(f"{path}: unsupported format {suffix!r} (png/pgm/ppm)")


def save_mask(mask: FenceMask, path: str | Path) -> None:
    """Write a mask as single-channel PNG: 255 = fence, 0 = background."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ValueError(f"{path}: masks are stored as PNG")
    pil = PILImage.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L")
    pil.save(path, format="PNG")


def load_mask(path: str | Path) -> FenceMask:
    """Read a mask PNG; any sample above half range counts as fence."""
    img = load_image(path)
    if img.channels != 1:
        raise ValueError(f"{path}: mask must be single-channel")
    return FenceMask(img.planes[0] > 0.5)


# --- quality metrics --------------------------------------------------------


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB over all samples; +inf for identical images."""
    if a.planes.shape != b.planes.shape:
        raise ValueError(f"psnr: shape mismatch {a.planes.shape} vs {b.planes.shape}")
    mse = float(np.mean((a.planes - b.planes) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


_SSIM_WINDOW = 8
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _box_sums(a: np.ndarray, k: int) -> np.ndarray:
    """Sums over all k-by-k windows (valid positions) via integral image."""
    s = np.cumsum(np.cumsum(a, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM over 8x8 sliding windows of the luminance planes.

    Uses population moments and stabilizers C1=(0.01)^2, C2=(0.03)^2 for
    unit-range samples.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"ssim: dimension mismatch {a.width}x{a.height} vs {b.width}x{b.height}")
    k = _SSIM_WINDOW
    if a.width < k or a.height < k:
        raise ValueError(f"ssim: image smaller than {k}x{k} window")
    la, lb = a.luminance(), b.luminance()
    n = float(k * k)
    mu_a = _box_sums(la, k) / n
    mu_b = _box_sums(lb, k) / n
    var_a = _box_sums(la * la, k) / n - mu_a**2
    var_b = _box_sums(lb * lb, k) / n - mu_b**2
    cov = _box_sums(la * lb, k) / n - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


# --- patch geometry ---------------------------------------------------------


def extract_patch(image: Image, center: tuple[int, int], side: int) -> Patch:
    """Copy the side-by-side window centered at an integer pixel location.

    For even sides the center is the pixel at index side//2 within the window.
    """
    if side < 1:
        raise ValueError("patch side must be positive")
    cx, cy = int(center[0]), int(center[1])
    x0 = cx - side // 2
    y0 = cy - side // 2
    if x0 < 0 or y0 < 0 or x0 + side > image.width or y0 + side > image.height:
        raise ValueError(
            f"patch window [{x0},{x0 + side})x[{y0},{y0 + side}) out of bounds "
            f"for {image.width}x{image.height} image"
        )
    return Patch(image.planes[:, y0 : y0 + side, x0 : x0 + side].copy(), origin=(float(cx), float(cy)))


def resize_bilinear(patch: Patch, new_side: int) -> Patch:
    """Resample a patch to a new side with corner-aligned bilinear interpolation."""
    if new_side < 2:
        raise ValueError("resize target side must be >= 2")
    side = patch.side
    if new_side == side:
        return Patch(patch.planes.copy(), origin=patch.origin)
    if side == 1:
        return Patch(np.repeat(np.repeat(patch.planes, new_side, 1), new_side, 2), origin=patch.origin)
    pos = np.arange(new_side, dtype=np.float64) * (side - 1) / (new_side - 1)
    i0 = np.minimum(pos.astype(np.int64), side - 2)
    frac = pos - i0
    rows = patch.planes[:, i0, :] * (1.0 - frac)[None, :, None] + patch.planes[:, i0 + 1, :] * frac[None, :, None]
    out = rows[:, :, i0] * (1.0 - frac)[None, None, :] + rows[:, :, i0 + 1] * frac[None, None, :]
    return Patch(out, origin=patch.origin)
