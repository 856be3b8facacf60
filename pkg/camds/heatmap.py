"""Positive-CAM heatmap export and localization scoring."""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from camds.errors import ShapeError
from camds.images import save_pgm, save_ppm, to_bytes

logger = logging.getLogger(__name__)

# Piecewise-linear jet colormap anchors: position -> (r, g, b).
_JET_POSITIONS = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
_JET_COLORS = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
    ]
)
OVERLAY_ALPHA = 0.5


def upsample_nearest(cam: np.ndarray, size: int) -> np.ndarray:
    """Repeat each cell of an [h, w] map into a (size/h) x (size/w) block."""
    h, w = cam.shape
    if size % h or size % w:
        raise ShapeError(f"map {h}x{w} does not tile a {size}x{size} image")
    return np.repeat(np.repeat(cam, size // h, axis=0), size // w, axis=1)


def normalize_heatmap(cam: np.ndarray) -> np.ndarray:
    """Scale a non-negative map by its maximum into uint8 [0, 255]; all-zero stays zero."""
    cam = np.asarray(cam, dtype=np.float64)
    if np.any(cam < 0):
        raise ValueError("heatmap input must be non-negative (apply positive_cam first)")
    peak = cam.max(initial=0.0)
    if peak <= 0:
        return np.zeros(cam.shape, dtype=np.uint8)
    return to_bytes(cam / peak)


def colorize(gray: np.ndarray) -> np.ndarray:
    """Map uint8 intensities to jet RGB floats in [0, 1], shape [H, W, 3]."""
    t = np.asarray(gray, dtype=np.float64) / 255.0
    return np.stack([np.interp(t, _JET_POSITIONS, _JET_COLORS[:, k]) for k in range(3)], axis=-1)


def overlay(image: np.ndarray, gray: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the colorized heatmap onto a [3, S, S] frame; returns uint8 [S, S, 3]."""
    frame = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    if frame.shape[:2] != gray.shape:
        raise ShapeError(f"frame {frame.shape[:2]} and heatmap {gray.shape} differ in size")
    return to_bytes((1 - alpha) * frame + alpha * colorize(gray))


def export_cam(
    cam: np.ndarray,
    path: Union[str, Path],
    *,
    size: int,
    image: Optional[np.ndarray] = None,
    overlay_path: Optional[Union[str, Path]] = None,
) -> np.ndarray:
    """Write the positive CAM ``cam`` [h, w] as a size x size P5 heatmap.

    With ``image`` and ``overlay_path`` a P6 overlay is written as well.
    Returns the uint8 heatmap that was written.
    """
    gray = normalize_heatmap(upsample_nearest(np.asarray(cam), size))
    save_pgm(gray, path)
    logger.info("Wrote heatmap %s", path)
    if image is not None and overlay_path is not None:
        save_ppm(overlay(image, gray), overlay_path)
        logger.info("Wrote overlay %s", overlay_path)
    return gray


def activation_ratio(cam: np.ndarray, mask: np.ndarray) -> float:
    """Mean positive activation inside ``mask`` over the mean outside.

    ``cam`` is upsampled to the mask size first. NaN when either side is empty
    or the outside mean is zero.
    """
    mask = np.asarray(mask, dtype=bool)
    up = upsample_nearest(np.maximum(np.asarray(cam, dtype=np.float64), 0), mask.shape[0])
    if up.shape != mask.shape:
        raise ShapeError(f"map upsampled to {up.shape} but mask is {mask.shape}")
    inside, outside = up[mask], up[~mask]
    if inside.size == 0 or outside.size == 0:
        return float("nan")
    mean_out = outside.mean()
    if mean_out == 0:
        return float("nan")
    return float(inside.mean() / mean_out)


def mean_activation_ratio(cams: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """Pooled ratio: mean inside-mask activation over all frames divided by mean outside."""
    inside_total, inside_n, outside_total, outside_n = 0.0, 0, 0.0, 0
    for cam, mask in zip(cams, masks):
        mask = np.asarray(mask, dtype=bool)
        up = upsample_nearest(np.maximum(np.asarray(cam, dtype=np.float64), 0), mask.shape[0])
        inside_total += float(up[mask].sum())
        inside_n += int(mask.sum())
        outside_total += float(up[~mask].sum())
        outside_n += int((~mask).sum())
    if inside_n == 0 or outside_n == 0 or outside_total == 0:
        return float("nan")
    return (inside_total / inside_n) / (outside_total / outside_n)
