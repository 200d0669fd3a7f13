"""Measurements behind the ``bench`` command.

Nothing here asserts an absolute speed; timings are medians of repeated
renders on whatever machine runs them.
"""

from __future__ import annotations

import time

import numpy as np

from .analysis import psnr
from .raster import rasterize
from .scoring import keep_count, prune, random_prune
from .temporal_filter import active_set, filtered_render


def time_frames(render, cameras, times, repeats=3):
    """Median wall time per frame (seconds) and the list of per-frame processed counts."""
    per_frame = []
    processed = []
    for t in times:
        for cam in cameras:
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                frame = render(cam, t)
                samples.append(time.perf_counter() - start)
            per_frame.append(float(np.median(samples)))
            processed.append(frame.stats.processed)
    return float(np.median(per_frame)), processed


def mean_psnr(reference_scene, test_scene, cameras, times, **opts):
    values = []
    for t in times:
        for cam in cameras:
            ref, _ = rasterize(reference_scene, cam, t, **opts)
            img, _ = rasterize(test_scene, cam, t, **opts)
            values.append(psnr(ref, img))
    return float(np.mean(values))


def pruning_quality(scene, scores, ratio, cameras, times, seeds, **opts):
    """PSNR against the full render for score pruning and for seeded random pruning.

    Returns ``(score_psnr, [random_psnr per seed])``.
    """
    pruned, _ = prune(scene, scores, ratio)
    score_psnr = mean_psnr(scene, pruned, cameras, times, **opts)
    random_psnrs = []
    for seed in seeds:
        rand, _ = random_prune(scene, ratio, np.random.default_rng(seed))
        random_psnrs.append(mean_psnr(scene, rand, cameras, times, **opts))
    return score_psnr, random_psnrs


def threshold_sensitivity(scene, cameras, keyframe_times, thresholds, **opts):
    """Mean mask popcount per keyframe for each visibility threshold."""
    peak = np.zeros((len(keyframe_times), len(scene)))
    for k, t in enumerate(keyframe_times):
        for cam in cameras:
            _, rec = rasterize(scene, cam, t, record_contributions=True, **opts)
            np.maximum(peak[k], rec.weights, out=peak[k])
    return [float((peak > thr).sum(axis=1).mean()) for thr in thresholds]


def bench_report(scene, pruned, masks, scores, cameras, cfg):
    opts = {"background": cfg.bg, "temporal_cull": cfg.temporal_cull, "workers": cfg.workers}
    times = pruned.frame_times()
    sample_times = times[:: max(1, len(times) // 6)]
    lines = ["# per-frame wall time (median over frames of median-of-repeats)"]

    stages = [
        ("full", lambda cam, t: rasterize(scene, cam, t, **opts)[0]),
        ("pruned", lambda cam, t: rasterize(pruned, cam, t, **opts)[0]),
        ("pruned+filter", lambda cam, t: filtered_render(pruned, masks, cam, t, **opts)),
    ]
    base = None
    lines.append("stage,seconds_per_frame,speedup_vs_full,mean_processed,max_processed")
    for name, render in stages:
        sec, processed = time_frames(render, cameras, sample_times, cfg.bench_repeats)
        base = base or sec
        lines.append(f"{name},{sec:.6f},{base / sec:.3f},{np.mean(processed):.1f},{max(processed)}")

    active = [int(active_set(masks, t).sum()) for t in times]
    lines.append("")
    lines.append(f"filter_active_mean = {np.mean(active):.1f}")
    lines.append(f"filter_active_max = {max(active)}")
    lines.append(f"filter_active_fraction_max = {max(active) / len(pruned):.4f}")

    lines.append("")
    lines.append("# visibility threshold sensitivity (mean mask popcount per keyframe)")
    thresholds = (0.0, 1e-3, 1e-2, 1e-1, 1.0)
    counts = threshold_sensitivity(pruned, cameras, masks.keyframe_times, thresholds, **opts)
    lines.append("threshold,mean_popcount")
    lines.extend(f"{thr:g},{c:.1f}" for thr, c in zip(thresholds, counts))

    lines.append("")
    lines.append(f"# pruning quality at ratio {cfg.prune_ratio} "
                 f"(kept {keep_count(len(scene), cfg.prune_ratio)} of {len(scene)})")
    seeds = range(cfg.bench_seeds)
    score_psnr, random_psnrs = pruning_quality(scene, scores, cfg.prune_ratio, cameras,
                                               sample_times, seeds, **opts)
    median_random = float(np.median(random_psnrs))
    lines.append(f"score_prune_psnr = {score_psnr:.4f}")
    lines.append(f"random_prune_psnr_median = {median_random:.4f}")
    lines.append(f"psnr_margin = {score_psnr - median_random:.4f}")
    return "\n".join(lines) + "\n"
