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
# # Colour codebooks and the storage budget
#
# After pruning, the spherical-harmonic blocks are replaced by indices into
# a k-means codebook. Geometry, rotors and opacity stay at full precision.

# %%
import numpy as np

from splat4d import SceneSpec, generate_scene, psnr, rasterize
from splat4d.postprocess import distinct_block_count, quantize_sh, storage_report
from splat4d.scoring import prune, score_table
from splat4d.temporal_filter import build_masks, select_keyframes

spec = SceneSpec(n_static=200, n_moving=200, n_flicker=600, frame_count=20, n_views=3, width=48, height=48,
                 sh_degree=2)
scene, cams = generate_scene(spec)
pruned, _ = prune(scene, score_table(scene, cams).combined, 0.8)
print(len(scene), "->", len(pruned), "Gaussians;", distinct_block_count(pruned), "distinct SH blocks")

# %% [markdown]
# Quality rises with the codebook size, and the error curve of every run
# only goes down.

# %%
t = 0.5
reference, _ = rasterize(pruned, cams[0], t)
for K in (2, 8, 32, distinct_block_count(pruned)):
    quantized, book = quantize_sh(pruned, K)
    value = psnr(reference, rasterize(quantized, cams[0], t)[0])
    print(f"K={K:4d}  psnr {value:7.2f} dB  Lloyd updates {len(book.sse_history) - 1:2d}"
          f"  final SSE {book.sse_history[-1]:.4f}")

# %% [markdown]
# The report counts bytes straight from the file formats.

# %%
masks = build_masks(pruned, cams, select_keyframes(pruned.time_extent, pruned.frame_count, 5))
_, book = quantize_sh(pruned, 32)
print(storage_report(scene, pruned, masks, book).to_text())
