"""Redundancy statistics and image-quality metrics.

"Active" means the same thing here as in the key-frame masks: a Gaussian
whose image-summed blending weight exceeds the threshold in at least one
view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError, ShapeError
from .raster import rasterize

PSNR_CAP = 100.0


@dataclass(frozen=True)
class SeriesCSV:
    columns: tuple  # ((name, values), ...)

    def __post_init__(self):
        lengths = {len(v) for _, v in self.columns}
        if len(lengths) > 1:
            raise ShapeError("all CSV columns must have the same length")
        for name, values in self.columns:
            if not np.all(np.isfinite(np.asarray(values, dtype=np.float64))):
                raise ParameterError(f"column {name!r} has non-finite values")

    @property
    def rows(self):
        return len(self.columns[0][1]) if self.columns else 0

    def to_text(self):
        names = [n for n, _ in self.columns]
        lines = [",".join(names)]
        for r in range(self.rows):
            lines.append(",".join(_fmt(v[r]) for _, v in self.columns))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


# ---------------------------------------------------------------------------
# Redundancy study
# ---------------------------------------------------------------------------


def sigma_t_histogram(scene, bin_edges):
    """Count temporal variances per bin.

    Bins are ``[e_k, e_{k+1})``; values below the first edge fall in the
    first bin and values at or above the last edge in the last bin.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ParameterError("bin edges must be a strictly increasing sequence of length >= 2")
    s = scene.sigma_t()
    bins = np.searchsorted(edges, s, side="right") - 1
    bins = np.clip(bins, 0, edges.size - 2)
    return np.bincount(bins, minlength=edges.size - 1)


def histogram_csv(counts, bin_edges):
    edges = np.asarray(bin_edges, dtype=np.float64)
    return SeriesCSV((("bin_lo", edges[:-1]), ("bin_hi", edges[1:]),
                      ("count", np.asarray(counts, dtype=np.int64))))


def active_sets(scene, cameras, timestamps, threshold=0.0, **render_opts):
    """Boolean (T, N) table of Gaussians active at each timestamp, unioned over views."""
    cameras = list(cameras)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if not cameras or timestamps.size == 0:
        raise ParameterError("need at least one camera and one timestamp")
    out = np.zeros((timestamps.size, len(scene)), dtype=bool)
    for k, t in enumerate(timestamps):
        for cam in cameras:
            _, record = rasterize(scene, cam, t, record_contributions=True, **render_opts)
            out[k] |= record.weights > threshold
    return out


def active_ratio(scene, cameras, timestamps, threshold=0.0, **render_opts):
    if len(scene) == 0:
        raise ParameterError("scene is empty")
    act = active_sets(scene, cameras, timestamps, threshold, **render_opts)
    return act.sum(axis=1) / len(scene)


def iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def activation_iou(scene, cameras, ref_t, timestamps, threshold=0.0, **render_opts):
    """IoU of the active set at ``ref_t`` with the active set at each timestamp."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    act = active_sets(scene, cameras, np.concatenate([[ref_t], timestamps]), threshold,
                      **render_opts)
    return np.array([iou(act[0], row) for row in act[1:]])


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


def _rgb(frame):
    return np.asarray(getattr(frame, "rgb", frame), dtype=np.float64)


def psnr(a, b):
    """PSNR in dB for images in [0, 1]; identical images give the 100 dB cap."""
    x, y = _rgb(a), _rgb(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    r = win.size // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over RGB channels with an 11x11 Gaussian window (data range 1).

    Only windows fully inside the image are averaged.
    """
    x, y = _rgb(a), _rgb(b)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < window:
        raise ShapeError(f"images must be at least {window} pixels on each side")
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 * k1, k2 * k2
    scores = []
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]
        mx, my = _filter_valid(xc, win), _filter_valid(yc, win)
        sxx = _filter_valid(xc * xc, win) - mx * mx
        syy = _filter_valid(yc * yc, win) - my * my
        sxy = _filter_valid(xc * yc, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
