"""Binary PGM/PPM reading and writing, resizing and cropping.

Frames travel through the pipeline as float32 arrays of shape [3, H, W]
with values in [0, 1].
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from camds.errors import ImageFormatError, ShapeError

logger = logging.getLogger(__name__)

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\n\r\v\f"


def _read_header(blob: bytes) -> tuple[int, int, int, int, int]:
    """Parse magic, width, height and maxval.

    Returns (channels, width, height, maxval, raster offset).
    """
    if len(blob) < 2 or blob[:2] not in _MAGIC_CHANNELS:
        raise ImageFormatError("expected a binary PGM (P5) or PPM (P6) magic number", offset=0)
    channels = _MAGIC_CHANNELS[blob[:2]]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise ImageFormatError("truncated header", offset=pos)
        byte = blob[pos : pos + 1]
        if byte in _WHITESPACE:
            pos += 1
        elif byte == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("unterminated comment in header", offset=pos)
            pos = end + 1
        else:
            start = pos
            while pos < len(blob) and blob[pos : pos + 1] not in _WHITESPACE:
                pos += 1
            token = blob[start:pos]
            if not token.isdigit():
                raise ImageFormatError(f"invalid header field {token!r}", offset=start)
            fields.append(int(token))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(blob) or blob[pos : pos + 1] not in _WHITESPACE:
        raise ImageFormatError("missing whitespace after maxval", offset=pos)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}", offset=pos)
    if not 1 <= maxval <= 65535:
        raise ImageFormatError(f"maxval {maxval} outside [1, 65535]", offset=pos)
    return channels, width, height, maxval, pos + 1


def decode_pnm(blob: bytes) -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into an integer array [H, W, channels] and its maxval."""
    channels, width, height, maxval, offset = _read_header(blob)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    count = width * height * channels
    needed = offset + count * dtype.itemsize
    if len(blob) < needed:
        raise ImageFormatError(
            f"truncated pixel data: need {needed - offset} bytes, found {len(blob) - offset}",
            offset=len(blob),
        )
    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    if raster.max(initial=0) > maxval:
        raise ImageFormatError(f"sample exceeds maxval {maxval}", offset=offset)
    return raster.reshape(height, width, channels), maxval


def read_pnm(path: Union[str, Path]) -> tuple[np.ndarray, int]:
    return decode_pnm(Path(path).read_bytes())


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Load a PGM/PPM file as float32 [3, H, W] in [0, 1]; PGM is replicated to 3 channels."""
    raster, maxval = read_pnm(path)
    image = raster.astype(np.float32) / np.float32(maxval)
    image = np.transpose(image, (2, 0, 1))
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.ascontiguousarray(image)


def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Boolean [H, W] mask: true wherever any channel is non-zero."""
    raster, _ = read_pnm(path)
    return raster.max(axis=2) > 0


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(raster: np.ndarray) -> bytes:
    """Encode uint8 [H, W] (P5) or [H, W, 3] (P6) with maxval 255."""
    raster = np.asarray(raster)
    if raster.dtype != np.uint8:
        raise ShapeError(f"raster must be uint8, got {raster.dtype}")
    if raster.ndim == 2:
        magic = b"P5"
    elif raster.ndim == 3 and raster.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"raster must be [H,W] or [H,W,3], got {raster.shape}")
    height, width = raster.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (width, height)
    return header + np.ascontiguousarray(raster).tobytes()


def save_pgm(raster: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_pnm(np.asarray(raster, dtype=np.uint8)))


def save_ppm(raster: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_pnm(np.asarray(raster, dtype=np.uint8)))


def save_image(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write a [3, H, W] float image as 8-bit PPM (or [1, H, W] / [H, W] as PGM)."""
    image = np.asarray(image)
    if image.ndim == 2:
        save_pgm(to_bytes(image), path)
    elif image.ndim == 3 and image.shape[0] == 1:
        save_pgm(to_bytes(image[0]), path)
    elif image.ndim == 3 and image.shape[0] == 3:
        save_ppm(to_bytes(np.transpose(image, (1, 2, 0))), path)
    else:
        raise ShapeError(f"cannot save image of shape {image.shape}")


# -- geometry -----------------------------------------------------------------


def _bilinear_weights(source: int, target: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: target pixel i samples source coordinate (i + 0.5) * s/t - 0.5
    coords = (np.arange(target, dtype=np.float64) + 0.5) * (source / target) - 0.5
    coords = np.clip(coords, 0, source - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, source - 1)
    return lo, hi, coords - lo


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] image."""
    if height < 1 or width < 1:
        raise ShapeError(f"target size must be positive, got {height}x{width}")
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    y0, y1, fy = _bilinear_weights(h, height)
    x0, x1, fx = _bilinear_weights(w, width)
    src = image.astype(np.float64)
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bottom = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return out.astype(image.dtype)


def resize_width(image: np.ndarray, target_width: int) -> np.ndarray:
    """Scale to ``target_width`` keeping the aspect ratio (height rounded, at least 1)."""
    _, h, w = image.shape
    if w == target_width:
        return image.copy()
    height = max(1, int(round(h * target_width / w)))
    return resize(image, height, target_width)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Central size x size window; the extra pixel of an odd margin goes to the bottom/right."""
    _, h, w = image.shape
    if size > h or size > w:
        raise ShapeError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[:, top : top + size, left : left + size].copy()


def prepare_frame(image: np.ndarray, size: int) -> np.ndarray:
    """Model input: shorter side scaled to ``size``, then center-cropped to a square."""
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image.astype(np.float32, copy=True)
    if w <= h:
        scaled = resize_width(image, size)
    else:
        scaled = resize(image, size, max(size, int(round(w * size / h))))
    return center_crop(scaled, size).astype(np.float32)
