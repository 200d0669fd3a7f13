"""Synthetic dynamic scenes built directly as 4D Gaussians.

Three populations stand in for what a trained 4D splatting model contains:

* static: zero velocity, very long temporal support;
* moving: linear trajectories, temporal support covering the whole clip;
* flicker: chains of short-lived Gaussians laid along moving trajectories,
  consecutive members overlapping at half of their peak temporal weight.

Cameras sit on a horizontal ring looking at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .core import Scene4D, from_motion, sh_coeff_count
from .errors import FormatError, ParameterError
from .raster import SH_C0, Camera

HALF_HEIGHT_WIDTH = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters.

    ``*_var_t`` ranges are temporal variances (``Sigma_t``), not standard
    deviations. ``extent`` is the half-size of the cube holding all centers.
    """

    seed: int = 0
    n_static: int = 750
    n_moving: int = 750
    n_flicker: int = 3500
    frame_count: int = 60
    t_min: float = 0.0
    t_max: float = 1.0
    extent: float = 1.0
    static_var_t: tuple = (4.0, 16.0)
    moving_var_t: tuple = (0.5, 2.0)
    flicker_var_t: tuple = (1e-4, 4e-4)
    speed: tuple = (0.3, 1.0)
    spatial_std: tuple = (0.025, 0.07)
    opacity: tuple = (0.5, 0.95)
    flicker_offset: float = 0.04
    sh_degree: int = 1
    n_views: int = 8
    camera_radius: float = 4.0
    camera_height: float = 1.0
    width: int = 128
    height: int = 128
    fov_x: float = 50.0

    def __post_init__(self):
        counts = (self.n_static, self.n_moving, self.n_flicker)
        if min(counts) < 0 or sum(counts) == 0:
            raise ParameterError("class counts must be >= 0 with at least one nonzero")
        if self.frame_count < 1:
            raise ParameterError("frame_count must be >= 1")
        if not self.t_min < self.t_max:
            raise ParameterError("t_min must be < t_max")
        for name in ("static_var_t", "moving_var_t", "flicker_var_t", "speed",
                     "spatial_std", "opacity"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ParameterError(f"{name} must satisfy 0 < lo <= hi")
        if not (self.static_var_t[0] > self.moving_var_t[1]
                and self.moving_var_t[0] > self.flicker_var_t[1]):
            raise ParameterError("temporal variance ranges must be ordered static > moving > flicker")
        if self.opacity[1] > 1:
            raise ParameterError("opacity range must lie in (0, 1]")
        if self.n_views < 1:
            raise ParameterError("n_views must be >= 1")
        sh_coeff_count(self.sh_degree)

    @property
    def n_total(self):
        return self.n_static + self.n_moving + self.n_flicker


_TUPLE_KEYS = {f.name for f in fields(SceneSpec) if isinstance(f.default, tuple)}
_INT_KEYS = {f.name for f in fields(SceneSpec) if isinstance(f.default, int)}


def parse_spec(text, base=None):
    """Read ``key = value`` lines (``#`` comments) into a :class:`SceneSpec`.

    Range keys take two numbers separated by a comma or whitespace.
    """
    base = base or SceneSpec()
    known = {f.name for f in fields(SceneSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value' on line {lineno}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise FormatError(f"unknown scene spec key {key!r} on line {lineno}", lineno)
        try:
            if key in _TUPLE_KEYS:
                parts = value.replace(",", " ").split()
                if len(parts) != 2:
                    raise ValueError
                values[key] = (float(parts[0]), float(parts[1]))
            elif key in _INT_KEYS:
                values[key] = int(value)
            else:
                values[key] = float(value)
        except ValueError:
            raise FormatError(f"bad value for {key!r} on line {lineno}: {value!r}", lineno) from None
    return replace(base, **values)


def format_spec(spec):
    lines = []
    for f in fields(SceneSpec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = f"{v[0]!r}, {v[1]!r}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def camera_ring(spec):
    cams = []
    for k in range(spec.n_views):
        angle = 2.0 * math.pi * k / spec.n_views
        eye = (spec.camera_radius * math.cos(angle), spec.camera_height,
               spec.camera_radius * math.sin(angle))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                                   spec.width, spec.height, spec.fov_x))
    return cams


def _random_sh(rng, degree):
    k = sh_coeff_count(degree)
    sh = np.zeros((k, 3))
    sh[0] = (rng.uniform(0.1, 0.9, 3) - 0.5) / SH_C0
    if k > 1:
        sh[1:] = rng.normal(0.0, 0.08, (k - 1, 3))
    return sh


def _spatial_cov(rng, std_range):
    std = rng.uniform(*std_range, 3)
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    cov = (rot * std**2) @ rot.T
    return 0.5 * (cov + cov.T)


def _velocity(rng, speed_range):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * rng.uniform(*speed_range)


def generate_scene(spec):
    """Build ``(scene, cameras)`` from ``spec``; identical output for identical specs.

    Gaussians are ordered static, then moving, then flicker.
    """
    rng = np.random.default_rng(spec.seed)
    t0, t1 = spec.t_min, spec.t_max
    span = t1 - t0
    ext = spec.extent
    gaussians = []

    def opacity():
        return rng.uniform(*spec.opacity)

    for _ in range(spec.n_static):
        gaussians.append(from_motion(
            rng.uniform(-ext, ext, 3), np.zeros(3), _spatial_cov(rng, spec.spatial_std),
            rng.uniform(t0, t1), math.sqrt(rng.uniform(*spec.static_var_t)),
            opacity(), _random_sh(rng, spec.sh_degree)))

    trajectories = []
    for _ in range(spec.n_moving):
        t_c = rng.uniform(t0, t1)
        vel = _velocity(rng, spec.speed)
        # keep the whole path inside the cube
        pos = rng.uniform(-ext, ext, 3) * 0.6
        trajectories.append((pos, vel, t_c))
        gaussians.append(from_motion(
            pos, vel, _spatial_cov(rng, spec.spatial_std), t_c,
            math.sqrt(rng.uniform(*spec.moving_var_t)), opacity(),
            _random_sh(rng, spec.sh_degree)))

    remaining = spec.n_flicker
    while remaining > 0:
        if trajectories:
            pos, vel, t_c = trajectories[rng.integers(len(trajectories))]
        else:
            pos, vel, t_c = rng.uniform(-ext, ext, 3) * 0.6, _velocity(rng, spec.speed), 0.5 * (t0 + t1)
        sigma_t = math.sqrt(rng.uniform(*spec.flicker_var_t))
        spacing = HALF_HEIGHT_WIDTH * sigma_t
        length = min(remaining, int(math.ceil(span / spacing)) + 1)
        start = t0 + rng.uniform(0.0, spacing)
        offset = rng.normal(0.0, spec.flicker_offset, 3)
        sh = _random_sh(rng, spec.sh_degree)
        for k in range(length):
            tk = start + k * spacing
            centre = pos + vel * (tk - t_c) + offset
            gaussians.append(from_motion(
                centre, vel, _spatial_cov(rng, spec.spatial_std), tk, sigma_t,
                opacity(), sh))
        remaining -= length

    scene = Scene4D.from_gaussians(gaussians, spec.sh_degree, (t0, t1), spec.frame_count)
    return scene, camera_ring(spec)


def class_labels(spec):
    """Class name per Gaussian index, matching :func:`generate_scene` ordering."""
    return np.array(["static"] * spec.n_static + ["moving"] * spec.n_moving
                    + ["flicker"] * spec.n_flicker)


# Presets mirroring the redundancy regimes used in the acceptance runs.
DEFAULT_SPEC = SceneSpec()
SIGMA_T_70_SPEC = SceneSpec(n_static=750, n_moving=750, n_flicker=3500)
INACTIVE_85_SPEC = SceneSpec(n_static=250, n_moving=250, n_flicker=4500)
