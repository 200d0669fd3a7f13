"""Spatial-temporal variation scores and score-ranked pruning.

For Gaussian ``i`` at sampled time ``t``:

* spatial term: sum of its blending weights over every pixel of every view;
* temporal-variation term: ``1 / (0.5 * tanh(|p''(t)|) + 0.5)`` in (1, 2],
  large for slowly varying (long-lived) temporal opacity;
* volume term: product of the four scales, divided by the 90th-percentile
  volume and clipped to 1.

The combined score sums ``temporal * volume * spatial`` over the samples.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import SIGMA_T_EPS
from .errors import AlignmentError, DegenerateTimeError, FormatError, ParameterError
from .raster import TEMPORAL_CULL, rasterize

SCORES_MAGIC = b"G4DS"
COMBINE_MODES = ("time_aligned", "product_of_sums")


@dataclass(frozen=True, eq=False)
class ScoreTable:
    spatial_per_t: np.ndarray  # (N, T)
    temporal_var_per_t: np.ndarray  # (N, T)
    gamma: np.ndarray  # (N,)
    combined: np.ndarray  # (N,)
    timestamps: np.ndarray  # (T,)

    def __len__(self):
        return self.gamma.shape[0]

    @property
    def spatial_sum(self):
        return self.spatial_per_t.sum(axis=1)

    @property
    def temporal_sum(self):
        return self.temporal_var_per_t.sum(axis=1)


def spatial_scores(scene, cameras, timestamps, background=(0.0, 0.0, 0.0),
                   temporal_cull=TEMPORAL_CULL, workers=1):
    """Blending weight per (Gaussian, timestamp), summed over all pixels of all cameras."""
    cameras = list(cameras)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if not cameras or timestamps.size == 0:
        raise ParameterError("need at least one camera and one timestamp")
    out = np.zeros((len(scene), timestamps.size))
    for k, t in enumerate(timestamps):
        for cam in cameras:
            _, record = rasterize(scene, cam, t, record_contributions=True,
                                  background=background, temporal_cull=temporal_cull,
                                  workers=workers)
            out[:, k] += record.weights
    return out


def temporal_variation_scores(scene, timestamps):
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if timestamps.size == 0:
        raise ParameterError("timestamps must be nonempty")
    s = scene.sigma_t()
    if np.any(~(s > SIGMA_T_EPS)):
        raise DegenerateTimeError("scene contains a Gaussian with degenerate temporal variance")
    dt = timestamps[None, :] - scene.means[:, 3:4]
    s = s[:, None]
    p = np.exp(-dt * dt / (2.0 * s))
    d2 = (dt * dt / (s * s) - 1.0 / s) * p
    return 1.0 / (0.5 * np.tanh(np.abs(d2)) + 0.5)


def nearest_rank_percentile(values, q):
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * v.size - 1e-9))
    return float(v[rank - 1])


def volume_gamma(scene, percentile=90.0):
    if len(scene) == 0:
        raise ParameterError("scene is empty")
    vol = np.prod(scene.scales, axis=1)
    ref = nearest_rank_percentile(vol, percentile)
    return np.minimum(vol / ref, 1.0)


def combined_scores(spatial_per_t, temporal_var_per_t, gamma, mode="time_aligned"):
    """Per-Gaussian score from the per-timestamp tables.

    ``mode="time_aligned"`` sums ``temporal[i, t] * gamma[i] * spatial[i, t]``
    over ``t``; ``"product_of_sums"`` multiplies the two time totals instead.
    """
    spatial = np.asarray(spatial_per_t, dtype=np.float64)
    temporal = np.asarray(temporal_var_per_t, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if spatial.ndim != 2 or spatial.shape != temporal.shape or gamma.shape != spatial.shape[:1]:
        raise AlignmentError(
            f"misaligned score tables: spatial {spatial.shape}, temporal {temporal.shape}, gamma {gamma.shape}"
        )
    if mode == "time_aligned":
        return (temporal * gamma[:, None] * spatial).sum(axis=1)
    if mode == "product_of_sums":
        return temporal.sum(axis=1) * gamma * spatial.sum(axis=1)
    raise ParameterError(f"unknown combine mode {mode!r}; expected one of {COMBINE_MODES}")


def score_table(scene, cameras, timestamps=None, mode="time_aligned", **render_opts):
    """Compute every score component; ``timestamps`` defaults to one per source frame."""
    if timestamps is None:
        timestamps = scene.frame_times()
    timestamps = np.asarray(timestamps, dtype=np.float64)
    spatial = spatial_scores(scene, cameras, timestamps, **render_opts)
    temporal = temporal_variation_scores(scene, timestamps)
    gamma = volume_gamma(scene)
    return ScoreTable(spatial, temporal, gamma, combined_scores(spatial, temporal, gamma, mode),
                      timestamps)


def keep_count(n, ratio):
    if not (0.0 <= ratio < 1.0):
        raise ParameterError(f"prune ratio must lie in [0, 1), got {ratio}")
    # guard against 1 - 0.8 = 0.19999999999999996 style rounding
    return min(n, math.ceil(round(n * (1.0 - ratio), 9)))


def prune(scene, scores, ratio):
    """Keep the ``ceil(N * (1 - ratio))`` highest scores.

    Ties keep the lower index. Returns ``(pruned_scene, kept)`` where
    ``kept[new] = old`` and is increasing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scene)
    if scores.shape != (n,):
        raise AlignmentError(f"expected {n} scores, got shape {scores.shape}")
    k = keep_count(n, ratio)
    order = np.lexsort((np.arange(n), -scores))
    kept = np.sort(order[:k])
    return scene.subset(kept), kept


def random_prune(scene, ratio, rng):
    """Baseline: keep a uniformly random subset of the same size as :func:`prune`."""
    n = len(scene)
    kept = np.sort(rng.choice(n, size=keep_count(n, ratio), replace=False))
    return scene.subset(kept), kept


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def scores_csv(table):
    lines = ["index,spatial_sum,temporal_sum,gamma,combined"]
    for i, (s, t, g, c) in enumerate(zip(table.spatial_sum, table.temporal_sum,
                                         table.gamma, table.combined)):
        lines.append(f"{i},{s:.9g},{t:.9g},{g:.9g},{c:.9g}")
    return "\n".join(lines) + "\n"


def encode_scores(table):
    cols = np.stack([table.spatial_sum, table.temporal_sum, table.gamma, table.combined], axis=1)
    return SCORES_MAGIC + struct.pack("<I", len(table)) + cols.astype("<f4").tobytes()


def decode_scores(data):
    """Return an (N, 4) array of ``spatial_sum, temporal_sum, gamma, combined``."""
    data = bytes(data)
    if len(data) < 8:
        raise FormatError("truncated scores header", len(data))
    if data[:4] != SCORES_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 16 * n:
        raise FormatError(f"scores body must be {16 * n} bytes", len(data))
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(n, 4).astype(np.float64)
