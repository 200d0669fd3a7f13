"""Key-frame visibility masks and filtered rendering.

Masks are recorded at evenly spaced key-frames, one bit per Gaussian,
OR-ed over all training views. A frame at time ``t`` is rendered with the
union of the masks of its two nearest key-frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleMaskError, ParameterError
from .raster import rasterize


@dataclass(frozen=True, eq=False)
class KeyframeMaskSet:
    keyframe_times: np.ndarray  # (K,) strictly increasing
    masks: np.ndarray  # (K, N) bool
    threshold: float = 0.0

    def __post_init__(self):
        times = np.asarray(self.keyframe_times, dtype=np.float64).reshape(-1)
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[0] != times.size:
            raise ParameterError("need one mask row per keyframe")
        if times.size == 0:
            raise ParameterError("mask set needs at least one keyframe")
        if np.any(np.diff(times) <= 0):
            raise ParameterError("keyframe times must be strictly increasing")
        times.setflags(write=False)
        masks = masks.copy()
        masks.setflags(write=False)
        object.__setattr__(self, "keyframe_times", times)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def n_gaussians(self):
        return self.masks.shape[1]

    @property
    def n_keyframes(self):
        return self.masks.shape[0]

    def __eq__(self, other):
        if not isinstance(other, KeyframeMaskSet):
            return NotImplemented
        return (self.threshold == other.threshold
                and np.array_equal(self.keyframe_times, other.keyframe_times)
                and np.array_equal(self.masks, other.masks))


def keyframe_indices(frame_count, interval):
    if not (1 <= interval <= frame_count):
        raise ParameterError(f"keyframe interval must lie in [1, {frame_count}], got {interval}")
    idx = list(range(0, frame_count, interval))
    if idx[-1] != frame_count - 1:
        idx.append(frame_count - 1)
    return np.array(idx, dtype=np.int64)


def select_keyframes(time_extent, frame_count, interval):
    """Timestamps of frames ``0, d, 2d, ...`` plus the last frame."""
    idx = keyframe_indices(frame_count, interval)
    t0, t1 = time_extent
    if frame_count == 1:
        return np.array([float(t0)])
    return np.linspace(t0, t1, frame_count)[idx]


def build_masks(scene, cameras, keyframe_times, threshold=0.0, **render_opts):
    """Visibility union over ``cameras`` at each keyframe.

    Gaussian ``g`` is set for keyframe ``t`` when, in at least one view, its
    blending weight summed over the image exceeds ``threshold``.
    """
    cameras = list(cameras)
    times = np.asarray(keyframe_times, dtype=np.float64)
    if not cameras or times.size == 0:
        raise ParameterError("need at least one camera and one keyframe")
    masks = np.zeros((times.size, len(scene)), dtype=bool)
    for k, t in enumerate(times):
        for cam in cameras:
            _, record = rasterize(scene, cam, t, record_contributions=True, **render_opts)
            masks[k] |= record.weights > threshold
    return KeyframeMaskSet(times, masks, threshold)


def nearest_keyframes(mask_set, t):
    """Indices ``(l, r)`` of the keyframes bracketing ``t``, clamped at the ends."""
    times = mask_set.keyframe_times
    r = int(np.searchsorted(times, t, side="left"))
    if r == times.size:
        return times.size - 1, times.size - 1
    if times[r] == t or r == 0:
        return r, r
    return r - 1, r


def active_set(mask_set, t):
    l, r = nearest_keyframes(mask_set, t)
    return mask_set.masks[l] | mask_set.masks[r]


def filtered_render(scene, mask_set, cam, t, **opts):
    """Render with only the Gaussians marked by the two nearest keyframes.

    ``frame.stats.processed`` counts the Gaussians that entered the pipeline.
    """
    if mask_set.n_gaussians != len(scene):
        raise IncompatibleMaskError(
            f"mask set covers {mask_set.n_gaussians} Gaussians but the scene has {len(scene)}"
        )
    frame, _ = rasterize(scene, cam, t, active_mask=active_set(mask_set, t), **opts)
    return frame
