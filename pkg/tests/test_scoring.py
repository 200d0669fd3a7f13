import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import front_camera, random_scene
from splat4d import raster
from splat4d.core import Gaussian4D, Scene4D
from splat4d.errors import AlignmentError, FormatError, ParameterError
from splat4d.raster import Camera, rasterize
from splat4d.scoring import (
    combined_scores,
    decode_scores,
    encode_scores,
    keep_count,
    nearest_rank_percentile,
    prune,
    random_prune,
    score_table,
    scores_csv,
    spatial_scores,
    temporal_variation_scores,
    volume_gamma,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])
SMALL_CAM = Camera(8, 8, 8.0, 8.0, 3.5, 3.5)


def flat(mean, scales=(1e4, 1e4, 0.01, 1.0), opacity=1.0):
    return Gaussian4D(mean, scales, IDENTITY_Q, IDENTITY_Q, opacity, np.zeros((1, 3)))


def scene_with_volumes(volumes):
    gs = [Gaussian4D([0, 0, 0, 0], [v, 1, 1, 1], IDENTITY_Q, IDENTITY_Q, 0.5) for v in volumes]
    return Scene4D.from_gaussians(gs)


def one_time_scene(sigma_ts, mu=0.5):
    gs = [Gaussian4D([0, 0, 0, mu], [1, 1, 1, math.sqrt(s)], IDENTITY_Q, IDENTITY_Q, 0.5)
          for s in sigma_ts]
    return Scene4D.from_gaussians(gs)


# --- spatial score -------------------------------------------------------------


def test_full_coverage_splat_scores_every_pixel():
    # a wall far wider than the view: alpha hits the 0.99 clamp at every pixel
    scene = Scene4D.from_gaussians([flat([0, 0, 2, 0.5])])
    s = spatial_scores(scene, [SMALL_CAM], [0.5])
    assert s.shape == (1, 1)
    assert s[0, 0] == pytest.approx(64 * raster.ALPHA_MAX, abs=1e-9)


def test_two_coaxial_half_opaque_splats():
    scene = Scene4D.from_gaussians([flat([0, 0, 2, 0.5], opacity=0.5), flat([0, 0, 3, 0.5], opacity=0.5)])
    s = spatial_scores(scene, [SMALL_CAM], [0.5])[:, 0]
    np.testing.assert_allclose(s, [0.5 * 64, 0.25 * 64], rtol=1e-6)


def test_temporally_culled_gaussian_scores_zero():
    scene = Scene4D.from_gaussians([flat([0, 0, 2, 0.5], scales=(1e4, 1e4, 0.01, 0.01))])
    s = spatial_scores(scene, [SMALL_CAM], [0.0, 0.2, 1.0])
    np.testing.assert_array_equal(s, 0.0)


def test_spatial_scores_sum_contribution_records(rng):
    scene = random_scene(rng, 60)
    cams = [front_camera(24, 24), front_camera(16, 20, distance=3.0)]
    times = [0.1, 0.6]
    s = spatial_scores(scene, cams, times)
    for k, t in enumerate(times):
        expected = sum(rasterize(scene, c, t, record_contributions=True)[1].weights for c in cams)
        np.testing.assert_array_equal(s[:, k], expected)
    with pytest.raises(ParameterError):
        spatial_scores(scene, [], times)


# --- temporal variation -----------------------------------------------------------


def test_temporal_variation_values():
    scene = one_time_scene([0.04, 0.01, 1e6])
    inflection = temporal_variation_scores(scene.subset([0]), [0.5 + 0.2, 0.5 - 0.2])
    np.testing.assert_allclose(inflection, 2.0, atol=1e-12)
    at_peak = temporal_variation_scores(scene, [0.5])[:, 0]
    assert at_peak[1] == pytest.approx(1.0 / (0.5 * math.tanh(100.0) + 0.5), abs=1e-15)
    assert at_peak[1] == pytest.approx(1.0, abs=1e-12)
    assert at_peak[2] == pytest.approx(2.0, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 10.0), min_size=1, max_size=8), st.lists(st.floats(-2, 3), min_size=1, max_size=5))
def test_temporal_variation_range(sigmas, times):
    v = temporal_variation_scores(one_time_scene(sigmas), times)
    assert np.all(v > 1.0 - 1e-12) and np.all(v <= 2.0)


def test_longer_lifespan_scores_higher_at_peak():
    # |p''| at the peak is 1/sigma_t: 4, 1, 2, 0.25
    v = temporal_variation_scores(one_time_scene([0.25, 1.0, 0.5, 4.0]), [0.5])[:, 0]
    assert v[3] > v[1] > v[2] > v[0]


# --- volume gamma ----------------------------------------------------------------


def test_gamma_uniform_volume():
    np.testing.assert_array_equal(volume_gamma(scene_with_volumes([0.3] * 7)), 1.0)


def test_gamma_nearest_rank():
    vols = np.arange(1, 101, dtype=float)
    scene = scene_with_volumes(np.random.default_rng(0).permutation(vols))
    p90 = np.sort(vols)[math.ceil(0.9 * 100) - 1]
    assert p90 == 90
    g = volume_gamma(scene)
    v = np.prod(scene.scales, axis=1)
    np.testing.assert_allclose(g[v == 45], 45 / p90, rtol=1e-15)
    assert g[np.argmax(v)] == 1.0
    assert nearest_rank_percentile([5.0], 90) == 5.0
    assert nearest_rank_percentile([3, 1, 2], 50) == 2.0


# --- combined score --------------------------------------------------------------


def test_combined_examples():
    assert combined_scores([[3.0, 4.0]], [[2.0, 2.0]], [1.0])[0] == 14.0
    assert combined_scores(np.zeros((2, 3)), np.full((2, 3), 1.7), [1.0, 0.5]).tolist() == [0.0, 0.0]
    assert combined_scores([[3.0, 4.0]], [[2.0, 1.0]], [0.5], mode="product_of_sums")[0] == 10.5


def test_combined_matches_triple_loop(rng):
    n, T = 13, 7
    s = rng.uniform(0, 10, (n, T))
    tv = rng.uniform(1, 2, (n, T))
    g = rng.uniform(0, 1, n)
    out = combined_scores(s, tv, g)
    for i in range(n):
        acc = 0.0
        for t in range(T):
            acc += s[i, t] * tv[i, t] * g[i]
        assert abs(out[i] - acc) < 1e-12


def test_combined_alignment_and_mode_errors():
    with pytest.raises(AlignmentError):
        combined_scores(np.zeros((2, 3)), np.zeros((2, 4)), np.ones(2))
    with pytest.raises(AlignmentError):
        combined_scores(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3))
    with pytest.raises(ParameterError):
        combined_scores(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(2), mode="max")


def test_score_table_is_consistent(rng):
    scene = random_scene(rng, 40, frame_count=4)
    table = score_table(scene, [front_camera(20, 20)])
    assert table.spatial_per_t.shape == (40, 4)
    np.testing.assert_allclose(table.timestamps, scene.frame_times())
    recomputed = (table.spatial_per_t * table.temporal_var_per_t * table.gamma[:, None]).sum(axis=1)
    np.testing.assert_allclose(table.combined, recomputed, atol=1e-9)
    assert np.all(table.spatial_per_t >= 0) and np.all(np.isfinite(table.combined))


# --- prune -------------------------------------------------------------------------


def test_prune_count_and_ties(rng):
    scene = random_scene(rng, 10)
    pruned, kept = prune(scene, rng.uniform(size=10), 0.8)
    assert len(pruned) == 2 and len(kept) == 2
    four = random_scene(rng, 4)
    _, kept = prune(four, np.ones(4), 0.5)
    assert kept.tolist() == [0, 1]
    assert keep_count(5000, 0.8) == 1000
    assert keep_count(7, 0.0) == 7


def test_prune_keeps_highest_and_maps_indices(rng):
    scene = random_scene(rng, 20)
    scores = rng.permutation(20).astype(float)
    pruned, kept = prune(scene, scores, 0.75)
    assert sorted(kept.tolist()) == kept.tolist()
    assert set(kept.tolist()) == set(np.argsort(scores)[-5:].tolist())
    for new, old in enumerate(kept):
        np.testing.assert_array_equal(pruned.means[new], scene.means[old])


def test_prune_errors(rng):
    scene = random_scene(rng, 5)
    with pytest.raises(ParameterError):
        prune(scene, np.ones(5), 1.0)
    with pytest.raises(ParameterError):
        prune(scene, np.ones(5), -0.1)
    with pytest.raises(AlignmentError):
        prune(scene, np.ones(4), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=30), st.floats(0.0, 0.95),
       st.floats(1e-3, 1e3))
def test_prune_scale_invariance(scores, ratio, c):
    rng = np.random.default_rng(0)
    scene = random_scene(rng, len(scores))
    _, a = prune(scene, np.array(scores), ratio)
    _, b = prune(scene, c * np.array(scores), ratio)
    # scaling may merge near-equal floats into ties; compare ranks on exactly representable scores
    if len(set(scores)) == len(set((c * np.array(scores)).tolist())):
        assert a.tolist() == b.tolist()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=30), st.floats(0.0, 0.95),
       st.integers(0, 29), st.integers(1, 20))
def test_prune_monotone_under_boost(scores, ratio, which, boost):
    rng = np.random.default_rng(0)
    scene = random_scene(rng, len(scores))
    which %= len(scores)
    s = np.array(scores, dtype=float)
    _, before = prune(scene, s, ratio)
    s[which] += boost
    _, after = prune(scene, s, ratio)
    if which in before:
        assert which in after


def test_random_prune_is_seeded(rng):
    scene = random_scene(rng, 50)
    _, a = random_prune(scene, 0.5, np.random.default_rng(3))
    _, b = random_prune(scene, 0.5, np.random.default_rng(3))
    assert a.tolist() == b.tolist() and len(a) == 25


# --- export ------------------------------------------------------------------------


def test_score_export_round_trip(rng):
    scene = random_scene(rng, 12, frame_count=3)
    table = score_table(scene, [front_camera(16, 16)])
    arr = decode_scores(encode_scores(table))
    np.testing.assert_allclose(arr[:, 3], table.combined.astype(np.float32), rtol=0)
    assert len(encode_scores(table)) == 8 + 16 * 12
    lines = scores_csv(table).splitlines()
    assert lines[0] == "index,spatial_sum,temporal_sum,gamma,combined" and len(lines) == 13
    with pytest.raises(FormatError):
        decode_scores(b"G4DX" + encode_scores(table)[4:])
    with pytest.raises(FormatError):
        decode_scores(encode_scores(table)[:-3])
