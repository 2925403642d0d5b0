"""Raster helpers: CFA sampling, bilinear demosaicing, gradient/edge operators, image I/O.

RGB images are plain ``float`` arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``.  Mosaics carry their CFA layout in :class:`BayerMosaic`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

PATTERNS = ("GRBG", "RGGB", "GBRG", "BGGR")
DEFAULT_PATTERN = "GRBG"
_CHANNEL = {"R": 0, "G": 1, "B": 2}


class DimensionError(ValueError):
    pass


class ImageIOError(IOError):
    pass


def check_pattern(pattern: str) -> str:
    pattern = pattern.upper()
    if pattern not in PATTERNS:
        raise ValueError(f"unknown CFA pattern {pattern!r}; expected one of {PATTERNS}")
    return pattern


def pattern_channels(pattern: str) -> np.ndarray:
    """2x2 array of RGB channel indices for each tile position."""
    pattern = check_pattern(pattern)
    return np.array([_CHANNEL[c] for c in pattern]).reshape(2, 2)


def check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return image


@dataclass(frozen=True)
class BayerMosaic:
    data: np.ndarray  # (H, W), or (N, H, W) for a stack
    pattern: str = DEFAULT_PATTERN

    def __post_init__(self):
        object.__setattr__(self, "pattern", check_pattern(self.pattern))
        h, w = self.data.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    def channel_mask(self) -> np.ndarray:
        """(H, W) array with the RGB channel index sampled at each pixel."""
        tile = pattern_channels(self.pattern)
        return np.tile(tile, (self.height // 2, self.width // 2))


def mosaic(image: np.ndarray, pattern: str = DEFAULT_PATTERN) -> BayerMosaic:
    """Sample an ``(..., H, W, 3)`` image through a Bayer CFA."""
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise DimensionError(f"expected (..., H, W, 3), got {image.shape}")
    h, w = image.shape[-3:-1]
    if h % 2 or w % 2:
        raise DimensionError(f"image dimensions must be even to mosaic, got {h}x{w}")
    tile = pattern_channels(pattern)
    out = np.empty(image.shape[:-1], dtype=image.dtype)
    for dy in range(2):
        for dx in range(2):
            out[..., dy::2, dx::2] = image[..., dy::2, dx::2, tile[dy, dx]]
    return BayerMosaic(out, pattern)


# Normalized-convolution weights.  At a missing site only same-colour
# neighbours contribute, so these reduce to the usual bilinear means.
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]])
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])


def demosaic_bilinear(m: BayerMosaic) -> np.ndarray:
    """Bilinear CFA interpolation with replicate borders.

    Missing samples are the kernel-weighted mean of the available same-colour
    neighbours; sampled positions pass through unchanged.
    """
    data = np.asarray(m.data, dtype=np.float64)
    if data.ndim == 3:
        return np.stack([demosaic_bilinear(BayerMosaic(d, m.pattern)) for d in data])
    channel = m.channel_mask()
    out = np.empty(data.shape + (3,))
    for c in range(3):
        known = (channel == c).astype(np.float64)
        kernel = _KERNEL_G if c == 1 else _KERNEL_RB
        num = ndimage.correlate(data * known, kernel, mode="nearest")
        den = ndimage.correlate(known, kernel, mode="nearest")
        out[..., c] = np.where(known > 0, data, num / den)
    return out


def grad_abs(image: np.ndarray) -> np.ndarray:
    """``|d/dx| + |d/dy|`` per channel with forward differences.

    The last column (row) has a zero x (y) difference.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise DimensionError(f"gradient needs at least 2x2 pixels, got {h}x{w}")
    gx = np.zeros_like(image)
    gy = np.zeros_like(image)
    gx[:, :-1] = image[:, 1:] - image[:, :-1]
    gy[:-1, :] = image[1:, :] - image[:-1, :]
    return np.abs(gx) + np.abs(gy)


def edge_map(image: np.ndarray) -> np.ndarray:
    """Channel-averaged Sobel gradient magnitude, replicate padding.

    The Sobel taps are scaled by 1/8 so a response is in intensity-per-pixel
    units; for images in [0, 1] the magnitude never exceeds ``sqrt(0.5)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w = image.shape[:2]
    if h < 3 or w < 3:
        raise DimensionError(f"edge map needs at least 3x3 pixels, got {h}x{w}")
    # separable Sobel: central difference along one axis, [1, 2, 1] smoothing along the other
    p = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:] - p[:-2]
    gx = (dx[:-2] + 2.0 * dx[1:-1] + dx[2:]) / 8.0
    gy = (dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]) / 8.0
    return np.sqrt(gx * gx + gy * gy).mean(axis=2)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Round-half-up quantization of a [0, 1] image to 8 bits."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    return to_uint8(image).astype(np.float64) / 255.0


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace/comments
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ImageIOError(f"{path}: only binary P6 PPM is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageIOError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageIOError(f"{path}: unsupported PPM bit depth (maxval {maxval})")
    body = raw[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ImageIOError(f"{path}: truncated PPM data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or P6 PPM into a float RGB array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        pixels = _read_ppm(path)
    else:
        from PIL import Image

        try:
            with Image.open(path) as im:
                if im.mode not in ("RGB", "RGBA", "L", "P"):
                    raise ImageIOError(f"{path}: unsupported image mode {im.mode}")
                pixels = np.asarray(im.convert("RGB"))
        except (OSError, SyntaxError) as exc:
            if isinstance(exc, ImageIOError):
                raise
            raise ImageIOError(f"{path}: unreadable image ({exc})") from exc
    return pixels.astype(np.float64) / 255.0


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    pixels = to_uint8(check_rgb(image))
    if path.suffix.lower() in (".ppm", ".pnm"):
        h, w = pixels.shape[:2]
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())
    elif path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(pixels, "RGB").save(path, format="PNG")
    else:
        raise ImageIOError(f"{path}: only .png and .ppm are supported")
