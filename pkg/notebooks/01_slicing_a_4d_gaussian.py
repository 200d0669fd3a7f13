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
# # Slicing a 4D Gaussian in time
#
# A 4D Gaussian carries its motion in the off-diagonal block of its
# covariance. Conditioning on a time gives an ordinary 3D Gaussian whose
# centre slides linearly and whose weight fades with distance from the
# temporal centre.

# %%
import numpy as np

from splat4d import condition_at_time, covariance4d, from_motion, temporal_opacity, temporal_opacity_d2

g = from_motion(
    position=[0.0, 0.0, 0.0],
    velocity=[0.8, 0.0, 0.2],
    spatial_cov=np.diag([0.01, 0.02, 0.01]),
    t_center=0.5,
    sigma_t=0.2,
)
print("rotors:", np.round(g.q_l, 4), np.round(g.q_r, 4))
print("covariance:\n", np.round(covariance4d(g), 5))

# %% [markdown]
# The conditional mean moves with the velocity we asked for, and the
# conditional covariance does not change with time.

# %%
for t in (0.3, 0.5, 0.7):
    cg = condition_at_time(g, t)
    print(f"t={t:.1f}  mean={np.round(cg.mean3, 4)}  weight={cg.temporal_weight:.4f}")
    print("        cov diag", np.round(np.diag(cg.cov3), 5))

# %% [markdown]
# The second derivative of the temporal weight is what the pruning score
# looks at. It is most negative at the temporal centre and crosses zero
# one standard deviation away.

# %%
ts = np.linspace(0.0, 1.0, 11)
for t in ts:
    print(f"t={t:.1f}  p={temporal_opacity(g, t):.4f}  p''={temporal_opacity_d2(g, t):9.3f}")
