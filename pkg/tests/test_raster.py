import math

import numpy as np
import pytest

from conftest import front_camera, random_scene
from splat4d import raster
from splat4d.core import Gaussian4D, Scene4D, condition_at_time
from splat4d.errors import FormatError, ParameterError, ShapeError
from splat4d.raster import (
    Camera,
    RenderFrame,
    decode_frame,
    encode_frame,
    encode_ppm,
    evaluate_sh,
    load_frame,
    project,
    rasterize,
    reference_render,
    save_frame,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def gaussian(mean, scales, opacity=1.0, color=(1.0, 0.0, 0.0)):
    sh = np.zeros((1, 3))
    sh[0] = (np.asarray(color) - 0.5) / raster.SH_C0
    return Gaussian4D(mean, scales, IDENTITY_Q, IDENTITY_Q, opacity, sh)


def python_render(scene, cam, t, background=(0.0, 0.0, 0.0)):
    """Pixel-by-pixel oracle built from the scalar operations."""
    splats = []
    for i, g in enumerate(scene):
        cg = condition_at_time(g, t)
        if cg.temporal_weight < raster.TEMPORAL_CULL:
            continue
        s = project(cg, cam, g.sh, scene.sh_degree, g.opacity)
        if s is None or np.linalg.det(s.cov2) < raster.DET_EPS:
            continue
        splats.append((s.depth, i, s))
    splats.sort(key=lambda e: (e[0], e[1]))
    rgb = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    weights = np.zeros(len(scene))
    for py in range(cam.height):
        for px in range(cam.width):
            T, acc = 1.0, np.zeros(3)
            for _, i, s in splats:
                d = np.array([px, py]) - s.mean2
                q = d @ np.linalg.solve(s.cov2, d)
                if q > 9.0:
                    continue
                a = min(raster.ALPHA_MAX, s.alpha_base * math.exp(-0.5 * q))
                if a < raster.ALPHA_MIN:
                    continue
                acc += s.rgb * a * T
                weights[i] += a * T
                T *= 1.0 - a
                if T < raster.T_STOP:
                    break
            rgb[py, px] = acc + T * np.asarray(background)
            trans[py, px] = T
    return rgb, trans, weights


# --- spherical harmonics ----------------------------------------------------


def test_sh_degree_zero_is_view_independent():
    sh = np.array([[0.7, -0.2, 0.1]])
    for d in ([0, 0, 1], [0, 0, -1], [1, 0, 0]):
        np.testing.assert_allclose(evaluate_sh(sh, d), raster.SH_C0 * sh[0] + 0.5, atol=1e-15)


def test_sh_degree_one_at_pole_uses_z_coefficient():
    sh = np.zeros((4, 3))
    sh[2] = [1.0, 2.0, 3.0]
    sh[1] = sh[3] = 5.0  # multiplied by y and x, both zero at the pole
    np.testing.assert_allclose(evaluate_sh(sh, [0, 0, 1]), 0.5 + raster.SH_C1 * sh[2], atol=1e-15)


def test_sh_basis_is_orthonormal_on_the_sphere():
    # Gauss-Legendre in cos(theta) times uniform phi integrates products of degree <= 6 exactly
    nodes, w_nodes = np.polynomial.legendre.leggauss(12)
    phi = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    ct, ph = np.meshgrid(nodes, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    quad_w = (w_nodes[:, None] * np.full(phi.size, 2 * np.pi / phi.size)).ravel()
    basis = []
    for k in range(16):
        sh = np.zeros((dirs.shape[0], 16, 3))
        sh[:, k, 0] = 1.0
        basis.append(evaluate_sh(sh, dirs)[:, 0] - 0.5)
    basis = np.array(basis)
    gram = (basis * quad_w) @ basis.T
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-12)


def test_sh_shape_errors():
    with pytest.raises(ShapeError):
        evaluate_sh(np.zeros((5, 3)), [0, 0, 1])
    with pytest.raises(ParameterError):
        evaluate_sh(np.zeros((1, 3)), [0, 0, 2])


# --- projection --------------------------------------------------------------


def test_project_on_axis_lands_on_principal_point():
    cam = Camera(64, 64, 50.0, 50.0, 32.0, 32.0)
    cg = condition_at_time(gaussian([0, 0, 5, 0], [0.1, 0.1, 0.1, 1]), 0.0)
    s = project(cg, cam, np.zeros((1, 3)), 0)
    np.testing.assert_allclose(s.mean2, [32, 32], atol=1e-12)
    assert s.depth == 5.0
    # isotropic: cov2 = (f * 0.1 / 5)^2 + dilation
    np.testing.assert_allclose(s.cov2, np.eye(2) * ((50 * 0.1 / 5) ** 2 + raster.DILATION), atol=1e-12)


def test_project_behind_camera_is_none():
    cam = Camera(64, 64, 50.0, 50.0, 32.0, 32.0)
    cg = condition_at_time(gaussian([0, 0, -1, 0], [0.1, 0.1, 0.1, 1]), 0.0)
    assert project(cg, cam, np.zeros((1, 3)), 0) is None


def test_camera_validation():
    with pytest.raises(ParameterError):
        Camera(0, 10, 1.0, 1.0, 0, 0)
    with pytest.raises(ParameterError):
        Camera(10, 10, -1.0, 1.0, 0, 0)
    with pytest.raises(ParameterError):
        Camera(10, 10, 1.0, 1.0, 0, 0, np.diag([2.0, 1, 1, 1]))


def test_look_at_centre_and_orientation():
    cam = front_camera(32, 32)
    np.testing.assert_allclose(cam.center, [0, 0, -4], atol=1e-12)
    # world +y is up, image +y is down
    cg = condition_at_time(gaussian([0, 0.5, 0, 0], [0.05] * 3 + [1]), 0.0)
    assert project(cg, cam, np.zeros((1, 3)), 0).mean2[1] < 16


# --- rasterization -----------------------------------------------------------


def test_empty_scene_renders_background():
    scene = Scene4D.from_gaussians([gaussian([0, 0, 0, 5], [0.1, 0.1, 0.1, 0.01])])
    frame, rec = rasterize(scene, front_camera(20, 10), 0.0, background=(0.2, 0.4, 0.6),
                           record_contributions=True)
    np.testing.assert_array_equal(frame.rgb, np.broadcast_to([0.2, 0.4, 0.6], (10, 20, 3)))
    np.testing.assert_array_equal(frame.transmittance, 1.0)
    assert frame.stats.temporally_culled == 1
    assert rec.weights[0] == 0.0


def test_opaque_splat_centre_pixel():
    cam = Camera(17, 17, 40.0, 40.0, 8.0, 8.0)
    scene = Scene4D.from_gaussians([gaussian([0, 0, 3, 0], [0.3, 0.3, 0.3, 1], 1.0, (0.8, 0.6, 0.4))])
    bg = np.array([0.1, 0.2, 0.3])
    frame, _ = rasterize(scene, cam, 0.0, background=bg)
    a = raster.ALPHA_MAX  # clamped opacity at the splat centre
    np.testing.assert_allclose(frame.rgb[8, 8], a * np.array([0.8, 0.6, 0.4]) + (1 - a) * bg, atol=1e-12)
    assert frame.transmittance[8, 8] == pytest.approx(1 - a, abs=1e-15)


def test_single_splat_matches_closed_form():
    cam = Camera(24, 20, 30.0, 30.0, 11.3, 9.6)
    g = gaussian([0.05, -0.02, 2.5, 0.1], [0.2, 0.1, 0.3, 0.5], 0.7, (0.3, 0.9, 0.5))
    scene = Scene4D.from_gaussians([g])
    t = 0.3
    frame, _ = rasterize(scene, cam, t)
    cg = condition_at_time(g, t)
    s = project(cg, cam, g.sh, 0, g.opacity)
    inv = np.linalg.inv(s.cov2)
    for py in range(cam.height):
        for px in range(cam.width):
            d = np.array([px, py]) - s.mean2
            q = d @ inv @ d
            a = min(0.99, s.alpha_base * math.exp(-0.5 * q)) if q <= 9 else 0.0
            a = a if a >= 1 / 255 else 0.0
            np.testing.assert_allclose(frame.rgb[py, px], a * s.rgb, atol=1e-12)
            assert abs(frame.transmittance[py, px] - (1 - a)) < 1e-12


def test_rasterize_matches_python_oracle(rng):
    for _ in range(3):
        scene = random_scene(rng, 25, degree=2, scale=(0.05, 0.5))
        cam = front_camera(20, 14)
        t = rng.uniform(0, 1)
        frame, rec = rasterize(scene, cam, t, record_contributions=True, background=(0.1, 0.1, 0.1))
        rgb, trans, weights = python_render(scene, cam, t, (0.1, 0.1, 0.1))
        np.testing.assert_allclose(frame.rgb, rgb, atol=1e-10)
        np.testing.assert_allclose(frame.transmittance, trans, atol=1e-10)
        np.testing.assert_allclose(rec.weights, weights, atol=1e-10)


def test_tiled_equals_reference_and_is_thread_independent(rng):
    for _ in range(5):
        scene = random_scene(rng, 150, degree=3)
        cam = front_camera(int(rng.integers(8, 65)), int(rng.integers(8, 65)))
        t = rng.uniform(0, 1)
        ref, ref_rec = reference_render(scene, cam, t, record_contributions=True)
        for workers in (1, 3):
            frame, rec = rasterize(scene, cam, t, record_contributions=True, workers=workers)
            assert frame.identical(ref)
            np.testing.assert_allclose(rec.weights, ref_rec.weights, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(rec.hits, ref_rec.hits)


def test_weight_sum_equals_opacity_coverage(rng):
    scene = random_scene(rng, 200)
    frame, rec = rasterize(scene, front_camera(40, 30), 0.5, record_contributions=True)
    assert rec.weights.sum() == pytest.approx(np.sum(1 - frame.transmittance), abs=1e-9)
    assert np.all(rec.weights >= 0)
    assert np.all(rec.hits == (rec.weights > 0))


def test_full_mask_equals_no_mask_and_empty_mask_is_background(rng):
    scene = random_scene(rng, 100)
    cam = front_camera(32, 32)
    base, _ = rasterize(scene, cam, 0.4)
    full, _ = rasterize(scene, cam, 0.4, active_mask=np.ones(100, bool))
    assert full.identical(base)
    empty, _ = rasterize(scene, cam, 0.4, active_mask=np.zeros(100, bool))
    assert empty.stats.processed == 0
    np.testing.assert_array_equal(empty.rgb, 0.0)
    with pytest.raises(ShapeError):
        rasterize(scene, cam, 0.4, active_mask=np.ones(99, bool))


def test_near_culling_counted():
    scene = Scene4D.from_gaussians([gaussian([0, 0, -10, 0], [0.1] * 3 + [1]),
                                    gaussian([0, 0, 0, 0], [0.1] * 3 + [1])])
    frame, _ = rasterize(scene, front_camera(16, 16), 0.0)
    assert frame.stats.near_culled == 1
    assert frame.stats.splats == 1


def test_singular_footprint_skipped(monkeypatch):
    monkeypatch.setattr(raster, "DILATION", 0.0)
    scene = Scene4D.from_gaussians([gaussian([0, 0, 0, 0], [1e-8, 1e-8, 1e-8, 1])])
    frame, _ = raster.rasterize(scene, front_camera(16, 16), 0.0)
    assert frame.stats.singular_skipped == 1
    np.testing.assert_array_equal(frame.rgb, 0.0)


def test_render_is_deterministic(rng):
    scene = random_scene(rng, 120)
    cam = front_camera(48, 40)
    a, _ = rasterize(scene, cam, 0.2, workers=2)
    b, _ = rasterize(scene, cam, 0.2, workers=2)
    assert a.identical(b)


def test_background_validation(rng):
    scene = random_scene(rng, 3)
    with pytest.raises(ParameterError):
        rasterize(scene, front_camera(8, 8), 0.0, background=(0, 0, 2))


# --- frame files -------------------------------------------------------------


def test_frame_round_trip(tmp_path, rng):
    frame = RenderFrame(rng.uniform(size=(5, 7, 3)), rng.uniform(size=(5, 7)))
    path = tmp_path / "f.frame"
    save_frame(path, frame)
    back = load_frame(path)
    assert path.stat().st_size == 12 + 16 * 35
    np.testing.assert_array_equal(back.rgb, frame.rgb.astype(np.float32))
    np.testing.assert_array_equal(back.transmittance, frame.transmittance.astype(np.float32))


def test_frame_decode_errors():
    data = encode_frame(RenderFrame(np.zeros((2, 2, 3)), np.ones((2, 2))))
    with pytest.raises(FormatError):
        decode_frame(b"XXXX" + data[4:])
    with pytest.raises(FormatError) as info:
        decode_frame(data[:-1])
    assert info.value.offset == len(data) - 1


def test_ppm_encoding():
    rgb = np.zeros((2, 3, 3))
    rgb[0, 0] = [1.0, 0.5, 2.0]
    data = encode_ppm(RenderFrame(rgb, np.ones((2, 3))))
    header = b"P6\n3 2\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 18
    assert data[len(header):len(header) + 3] == bytes([255, 128, 255])
