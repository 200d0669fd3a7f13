"""Deterministic CPU splatting of time-conditioned 4D Gaussians.

Both renderers share one preprocessing pass (temporal cull, conditioning,
EWA projection, depth sort) and one per-pixel alpha rule. They differ only
in how pixels find their splats: :func:`rasterize` bins splats into 16x16
tiles, :func:`reference_render` visits every splat for every pixel. Because
the blend order and arithmetic are identical the two are bit-identical.

A splat influences a pixel only inside its 3-sigma ellipse; outside it the
alpha is zero by definition, which is what makes tile binning exact.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import batch_condition, sh_coeff_count
from .errors import FormatError, ParameterError, ShapeError

Z_NEAR = 0.01
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_STOP = 1e-4
DILATION = 0.3
TILE_SIZE = 16
SIGMA_EXTENT = 3.0
TEMPORAL_CULL = 0.05
DET_EPS = 1e-12

RENDER_CONSTANTS = {
    "z_near": Z_NEAR,
    "alpha_min": ALPHA_MIN,
    "alpha_max": ALPHA_MAX,
    "transmittance_stop": T_STOP,
    "dilation": DILATION,
    "tile_size": TILE_SIZE,
    "sigma_extent": SIGMA_EXTENT,
}

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``world_to_camera`` maps world points to a frame with +z forward, +y down."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4).copy()
        if not (0 < self.width <= 4096 and 0 < self.height <= 4096):
            raise ParameterError("image size must be in 1..4096")
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        rot = w2c[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ParameterError("world_to_camera rotation block is not orthogonal")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self):
        rot = self.world_to_camera[:3, :3]
        return -rot.T @ self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg=50.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, w2c)


@dataclass(frozen=True)
class Splat2D:
    mean2: np.ndarray
    cov2: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha_base: float


@dataclass
class RenderStats:
    processed: int = 0
    temporally_culled: int = 0
    near_culled: int = 0
    singular_skipped: int = 0
    splats: int = 0
    tile_entries: int = 0
    constants: dict = field(default_factory=lambda: dict(RENDER_CONSTANTS))


@dataclass(eq=False)
class RenderFrame:
    """Rendered image.

    ``rgb`` is (H, W, 3) and ``transmittance`` is (H, W), both float64 in
    memory; files store float32.
    """

    rgb: np.ndarray
    transmittance: np.ndarray
    stats: RenderStats = field(default_factory=RenderStats)

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    def identical(self, other):
        """Bitwise equality of both planes."""
        return (self.rgb.shape == other.rgb.shape
                and self.rgb.tobytes() == other.rgb.tobytes()
                and self.transmittance.tobytes() == other.transmittance.tobytes())


@dataclass(eq=False)
class ContributionRecord:
    """Per-Gaussian blending weight summed over every pixel of one render.

    Arrays are aligned with the scene's Gaussian index.
    """

    weights: np.ndarray
    hits: np.ndarray


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def evaluate_sh(sh, dirs):
    """Real SH color for unit view directions, with the +0.5 offset.

    Parameters
    ----------
    sh : array_like
        Coefficients, shape ``(K, 3)`` or ``(N, K, 3)`` with ``K`` in {1, 4, 9, 16}.
    dirs : array_like
        Unit directions, shape ``(3,)`` or ``(N, 3)``.

    Returns
    -------
    ndarray
        RGB of shape ``(3,)`` or ``(N, 3)``; not clamped.
    """
    sh = np.asarray(sh, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        dirs = dirs.reshape(1, 3)
    if sh.ndim != 3 or sh.shape[2] != 3 or sh.shape[1] not in (1, 4, 9, 16):
        raise ShapeError(f"SH coefficients must be (N, K, 3) with K a square <= 16, got {sh.shape}")
    if dirs.shape != (sh.shape[0], 3):
        raise ShapeError(f"dirs must be (N, 3), got {dirs.shape}")
    if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-6):
        raise ParameterError("view directions must be unit length")
    k = sh.shape[1]
    out = SH_C0 * sh[:, 0]
    if k > 1:
        x, y, z = (dirs[:, i:i + 1] for i in range(3))
        out = out - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if k > 4:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            out = (out + SH_C2[0] * xy * sh[:, 4] + SH_C2[1] * yz * sh[:, 5]
                   + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                   + SH_C2[3] * xz * sh[:, 7] + SH_C2[4] * (xx - yy) * sh[:, 8])
            if k > 9:
                out = (out + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
                       + SH_C3[1] * xy * z * sh[:, 10]
                       + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
                       + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
                       + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
                       + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                       + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    out = out + 0.5
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def _project_batch(mean3, cov3, cam):
    """EWA projection. Returns ``(mean2, cov2, depth, keep)``."""
    w2c = cam.world_to_camera
    rot = w2c[:3, :3]
    pc = mean3 @ rot.T + w2c[:3, 3]
    z = pc[:, 2]
    keep = z > Z_NEAR
    zs = np.where(keep, z, 1.0)
    inv_z = 1.0 / zs
    m = mean3.shape[0]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * pc[:, 0] * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * pc[:, 1] * inv_z * inv_z
    T = J @ rot
    cov2 = T @ cov3 @ np.swapaxes(T, -1, -2)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    mean2 = np.stack([cam.fx * pc[:, 0] * inv_z + cam.cx,
                      cam.fy * pc[:, 1] * inv_z + cam.cy], axis=1)
    return mean2, cov2, z, keep


def project(cg, cam, sh, sh_degree, opacity=1.0):
    """Project one conditional Gaussian; ``None`` if it lies behind the near plane."""
    sh = np.asarray(sh, dtype=np.float64)
    if sh.shape != (sh_coeff_count(sh_degree), 3):
        raise ShapeError(f"expected {(sh_coeff_count(sh_degree), 3)} SH coefficients, got {sh.shape}")
    mean2, cov2, z, keep = _project_batch(
        np.asarray(cg.mean3, dtype=np.float64)[None], np.asarray(cg.cov3, dtype=np.float64)[None], cam
    )
    if not keep[0]:
        return None
    view = np.asarray(cg.mean3) - cam.center
    view = view / np.linalg.norm(view)
    rgb = np.clip(evaluate_sh(sh, view), 0.0, 1.0)
    return Splat2D(mean2[0], cov2[0], float(z[0]), rgb, float(opacity) * cg.temporal_weight)


@dataclass
class _SplatBatch:
    gaussian: np.ndarray  # scene index, sorted by (depth, index)
    mean2: np.ndarray
    conic: np.ndarray  # (M, 3): a, b, c of the inverse 2x2 covariance
    extent: np.ndarray  # (M, 2) 3-sigma half widths in x, y
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


def _as_mask(active_mask, n):
    if active_mask is None:
        return None
    mask = np.asarray(active_mask)
    if mask.dtype != np.bool_:
        mask = mask.astype(bool)
    if mask.shape != (n,):
        raise ShapeError(f"active_mask must have shape ({n},), got {mask.shape}")
    return mask


def prepare_splats(scene, cam, t, active_mask=None, temporal_cull=TEMPORAL_CULL):
    """Cull, condition, project and depth-sort the scene at time ``t``."""
    n = len(scene)
    stats = RenderStats()
    mask = _as_mask(active_mask, n)
    idx = np.arange(n) if mask is None else np.flatnonzero(mask)
    stats.processed = int(idx.size)

    cov = scene.covariances(idx)
    mean3, cov3, p = batch_condition(scene.means[idx], cov, float(t))
    live = p >= temporal_cull
    stats.temporally_culled = int(idx.size - np.count_nonzero(live))
    idx, mean3, cov3, p = idx[live], mean3[live], cov3[live], p[live]

    mean2, cov2, depth, front = _project_batch(mean3, cov3, cam)
    stats.near_culled = int(idx.size - np.count_nonzero(front))
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    ok = front & (det >= DET_EPS)
    stats.singular_skipped = int(np.count_nonzero(front & ~(det >= DET_EPS)))

    idx, mean3, mean2, depth, p = idx[ok], mean3[ok], mean2[ok], depth[ok], p[ok]
    a, b, c, det = a[ok], b[ok], c[ok], det[ok]
    view = mean3 - cam.center
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    rgb = np.clip(evaluate_sh(scene.sh[idx], view), 0.0, 1.0)
    alpha = scene.opacity[idx] * p
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    extent = SIGMA_EXTENT * np.sqrt(np.stack([a, c], axis=1))

    order = np.lexsort((idx, depth))
    stats.splats = int(order.size)
    batch = _SplatBatch(
        gaussian=np.ascontiguousarray(idx[order]),
        mean2=np.ascontiguousarray(mean2[order]),
        conic=np.ascontiguousarray(conic[order]),
        extent=np.ascontiguousarray(extent[order]),
        rgb=np.ascontiguousarray(rgb[order]),
        alpha=np.ascontiguousarray(alpha[order]),
        depth=np.ascontiguousarray(depth[order]),
    )
    return batch, stats


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _pixel_alpha(px, py, mx, my, ca, cb, cc, base):
    dx = px - mx
    dy = py - my
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if q > SIGMA_EXTENT * SIGMA_EXTENT:
        return 0.0
    alpha = base * math.exp(-0.5 * q)
    if alpha > ALPHA_MAX:
        alpha = ALPHA_MAX
    return alpha


@njit(cache=True, nogil=True)
def _bin_tiles(mean2, extent, width, height, tiles_x, tiles_y):
    m = mean2.shape[0]
    rect = np.empty((m, 4), dtype=np.int64)
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for s in range(m):
        x0 = math.floor(mean2[s, 0] - extent[s, 0]) - 1
        x1 = math.ceil(mean2[s, 0] + extent[s, 0]) + 1
        y0 = math.floor(mean2[s, 1] - extent[s, 1]) - 1
        y1 = math.ceil(mean2[s, 1] + extent[s, 1]) + 1
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
            rect[s, 0] = 1
            rect[s, 1] = 0
            rect[s, 2] = 1
            rect[s, 3] = 0
            continue
        tx0 = max(x0, 0) // TILE_SIZE
        tx1 = min(x1, width - 1) // TILE_SIZE
        ty0 = max(y0, 0) // TILE_SIZE
        ty1 = min(y1, height - 1) // TILE_SIZE
        rect[s, 0] = tx0
        rect[s, 1] = tx1
        rect[s, 2] = ty0
        rect[s, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    # splats are visited in blend order, so each tile list is already sorted
    for s in range(m):
        for ty in range(rect[s, 2], rect[s, 3] + 1):
            for tx in range(rect[s, 0], rect[s, 1] + 1):
                tile = ty * tiles_x + tx
                entries[fill[tile]] = s
                fill[tile] += 1
    return offsets, entries


@njit(cache=True, nogil=True)
def _blend_tiles(tiles, offsets, entries, mean2, conic, rgb, alpha, width, tiles_x, height,
                 bg, out_rgb, out_t, entry_w, entry_hits, record):
    for k in range(tiles.shape[0]):
        tile = tiles[k]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        lo = offsets[tile]
        hi = offsets[tile + 1]
        for py in range(ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, height)):
            for px in range(tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, width)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for e in range(lo, hi):
                    s = entries[e]
                    a = _pixel_alpha(float(px), float(py), mean2[s, 0], mean2[s, 1],
                                     conic[s, 0], conic[s, 1], conic[s, 2], alpha[s])
                    if a < ALPHA_MIN:
                        continue
                    w = a * T
                    r += rgb[s, 0] * w
                    g += rgb[s, 1] * w
                    b += rgb[s, 2] * w
                    if record:
                        entry_w[e] += w
                        entry_hits[e] += 1
                    T = T * (1.0 - a)
                    # stop after the splat that drives T below the cutoff, so it is recorded
                    if T < T_STOP:
                        break
                out_rgb[py, px, 0] = r + T * bg[0]
                out_rgb[py, px, 1] = g + T * bg[1]
                out_rgb[py, px, 2] = b + T * bg[2]
                out_t[py, px] = T


@njit(cache=True, nogil=True)
def _blend_brute_force(mean2, conic, rgb, alpha, width, height, bg, out_rgb, out_t,
                       splat_w, splat_hits):
    m = mean2.shape[0]
    for py in range(height):
        for px in range(width):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for s in range(m):
                a = _pixel_alpha(float(px), float(py), mean2[s, 0], mean2[s, 1],
                                 conic[s, 0], conic[s, 1], conic[s, 2], alpha[s])
                if a < ALPHA_MIN:
                    continue
                w = a * T
                r += rgb[s, 0] * w
                g += rgb[s, 1] * w
                b += rgb[s, 2] * w
                splat_w[s] += w
                splat_hits[s] += 1
                T = T * (1.0 - a)
                # stop after the splat that drives T below the cutoff, so it is recorded
                if T < T_STOP:
                    break
            out_rgb[py, px, 0] = r + T * bg[0]
            out_rgb[py, px, 1] = g + T * bg[1]
            out_rgb[py, px, 2] = b + T * bg[2]
            out_t[py, px] = T


# ---------------------------------------------------------------------------
# Public renderers
# ---------------------------------------------------------------------------


def _background(background):
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if np.any(bg < 0) or np.any(bg > 1):
        raise ParameterError("background must lie in [0, 1]")
    return bg


def _scatter_record(n, batch, splat_w, splat_hits):
    weights = np.zeros(n)
    hits = np.zeros(n, dtype=bool)
    weights[batch.gaussian] = splat_w
    hits[batch.gaussian] = splat_hits > 0
    return ContributionRecord(weights, hits)


def rasterize(scene, cam, t, active_mask=None, record_contributions=False,
              background=(0.0, 0.0, 0.0), temporal_cull=TEMPORAL_CULL, workers=1):
    """Tile-based render of ``scene`` at time ``t``.

    Parameters
    ----------
    active_mask : array_like of bool, optional
        Gaussians with a cleared bit are skipped before any other work.
    record_contributions : bool
        Also return a :class:`ContributionRecord`.
    workers : int
        Number of threads sharing the tile list. The output does not depend
        on it: every tile is owned by one thread and contribution entries are
        merged in tile order.

    Returns
    -------
    (RenderFrame, ContributionRecord or None)
    """
    bg = _background(background)
    batch, stats = prepare_splats(scene, cam, t, active_mask, temporal_cull)
    w, h = cam.width, cam.height
    tiles_x = -(-w // TILE_SIZE)
    tiles_y = -(-h // TILE_SIZE)
    offsets, entries = _bin_tiles(batch.mean2, batch.extent, w, h, tiles_x, tiles_y)
    stats.tile_entries = int(entries.size)

    out_rgb = np.empty((h, w, 3))
    out_t = np.empty((h, w))
    entry_w = np.zeros(entries.size)
    entry_hits = np.zeros(entries.size, dtype=np.int64)
    all_tiles = np.arange(tiles_x * tiles_y, dtype=np.int64)
    args = (offsets, entries, batch.mean2, batch.conic, batch.rgb, batch.alpha, w, tiles_x, h,
            bg, out_rgb, out_t, entry_w, entry_hits, bool(record_contributions))
    workers = max(1, int(workers))
    if workers == 1:
        _blend_tiles(all_tiles, *args)
    else:
        chunks = np.array_split(all_tiles, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [pool.submit(_blend_tiles, c, *args) for c in chunks if c.size]:
                fut.result()

    frame = RenderFrame(out_rgb, out_t, stats)
    if not record_contributions:
        return frame, None
    m = batch.gaussian.size
    splat_w = np.bincount(entries, weights=entry_w, minlength=m)
    splat_hits = np.bincount(entries, weights=entry_hits, minlength=m)
    return frame, _scatter_record(len(scene), batch, splat_w, splat_hits)


def reference_render(scene, cam, t, active_mask=None, record_contributions=False,
                     background=(0.0, 0.0, 0.0), temporal_cull=TEMPORAL_CULL):
    """Brute-force oracle: every pixel walks the whole depth-sorted splat list."""
    bg = _background(background)
    batch, stats = prepare_splats(scene, cam, t, active_mask, temporal_cull)
    w, h = cam.width, cam.height
    out_rgb = np.empty((h, w, 3))
    out_t = np.empty((h, w))
    m = batch.gaussian.size
    splat_w = np.zeros(m)
    splat_hits = np.zeros(m, dtype=np.int64)
    _blend_brute_force(batch.mean2, batch.conic, batch.rgb, batch.alpha, w, h, bg,
                       out_rgb, out_t, splat_w, splat_hits)
    frame = RenderFrame(out_rgb, out_t, stats)
    if not record_contributions:
        return frame, None
    return frame, _scatter_record(len(scene), batch, splat_w, splat_hits)


# ---------------------------------------------------------------------------
# Frame files
# ---------------------------------------------------------------------------

FRAME_MAGIC = b"FRM1"


def encode_frame(frame):
    h, w = frame.transmittance.shape
    rgb = np.moveaxis(frame.rgb, 2, 0).astype("<f4")
    return (FRAME_MAGIC + np.array([w, h], dtype="<u4").tobytes() + rgb.tobytes()
            + frame.transmittance.astype("<f4").tobytes())


def decode_frame(data):
    data = bytes(data)
    if len(data) < 12:
        raise FormatError("truncated frame header", len(data))
    if data[:4] != FRAME_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    w, h = np.frombuffer(data, dtype="<u4", count=2, offset=4)
    w, h = int(w), int(h)
    need = 12 + 16 * w * h
    if len(data) != need:
        raise FormatError(f"frame body must be {need} bytes", len(data))
    planes = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    rgb = np.moveaxis(planes[: 3 * w * h].reshape(3, h, w), 0, 2)
    trans = planes[3 * w * h:].reshape(h, w)
    return RenderFrame(np.ascontiguousarray(rgb), trans)


def encode_ppm(frame):
    h, w = frame.transmittance.shape
    img = np.round(np.clip(frame.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def save_frame(path, frame):
    from .fileutil import atomic_write_bytes

    atomic_write_bytes(path, encode_frame(frame))


def load_frame(path):
    with open(path, "rb") as fh:
        return decode_frame(fh.read())


def save_ppm(path, frame):
    from .fileutil import atomic_write_bytes

    atomic_write_bytes(path, encode_ppm(frame))

