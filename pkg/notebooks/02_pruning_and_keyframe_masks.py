# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#   kernelspec:
#     display_name: Python 3
#     name: python3
# ---

# %% [markdown]
# # Pruning and key-frame masks on a synthetic scene
#
# The generator mixes long-lived static and moving Gaussians with chains of
# short-lived "flicker" Gaussians. Most of the scene is therefore inactive
# at any one time, which is what the score and the temporal filter exploit.

# %%
import time

import numpy as np

from splat4d import SceneSpec, generate_scene, psnr, rasterize, sigma_t_histogram
from splat4d.scoring import prune, random_prune, score_table
from splat4d.temporal_filter import active_set, build_masks, filtered_render, select_keyframes

spec = SceneSpec(n_static=150, n_moving=150, n_flicker=700, frame_count=30, n_views=4, width=64, height=64)
scene, cams = generate_scene(spec)
print(len(scene), "Gaussians")
print("Sigma_t histogram [0, 0.25), [0.25, inf):", sigma_t_histogram(scene, [0.0, 0.25, np.inf]))

# %% [markdown]
# ## Score-based pruning
#
# Scores combine the rendered blending weight, a temporal term that favours
# long lifespans and a volume factor. Half of the Gaussians are dropped
# here; a random subset of the same size is the baseline.

# %%
table = score_table(scene, cams)
pruned, kept = prune(scene, table.combined, 0.5)
baseline, _ = random_prune(scene, 0.5, np.random.default_rng(0))


def mean_psnr(other):
    return np.mean([psnr(rasterize(scene, c, t)[0], rasterize(other, c, t)[0])
                    for c in cams for t in scene.frame_times()[::5]])


print(f"score pruning  {mean_psnr(pruned):6.2f} dB")
print(f"random pruning {mean_psnr(baseline):6.2f} dB")

# %% [markdown]
# ## Key-frame masks
#
# Visibility is recorded every 10 frames on the unpruned scene. A frame
# renders only the Gaussians set in its two nearest key-frames.

# %%
masks = build_masks(scene, cams, select_keyframes(scene.time_extent, scene.frame_count, 10))
print("mask popcounts:", masks.masks.sum(axis=1))
for t in scene.frame_times()[::6]:
    start = time.perf_counter()
    frame = filtered_render(scene, masks, cams[0], t)
    fast = time.perf_counter() - start
    start = time.perf_counter()
    full, _ = rasterize(scene, cams[0], t)
    slow = time.perf_counter() - start
    print(f"t={t:.2f} processed {frame.stats.processed:4d}/{len(scene)}"
          f"  active {active_set(masks, t).sum():4d}  psnr {psnr(full, frame):6.2f} dB"
          f"  {slow * 1e3:5.1f} ms -> {fast * 1e3:5.1f} ms")
