"""Binary ``.g4d`` scene files and mapping-driven PLY import.

Layout (little-endian)::

    "G4D1" | u32 version=1 | u32 count | u8 sh_degree | u8 flags | u8[2] pad
    f32 t_min | f32 t_max | u32 frame_count
    per Gaussian: mean 4f | scales 4f | q_l 4f | q_r 4f | opacity f | sh (d+1)^2*3 f
    [flags & 1: sh omitted from records, followed by count x u32 codebook indices]

The flags byte occupies the first padding byte, so plain scenes have
all-zero padding.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import Scene4D, sh_coeff_count
from .errors import FormatError, ParameterError

MAGIC = b"G4D1"
VERSION = 1
FLAG_SH_BY_REFERENCE = 1
_HEADER = struct.Struct("<4sIIBB2xffI")
HEADER_SIZE = _HEADER.size


def record_floats(sh_degree, sh_by_reference=False):
    n = 17
    if not sh_by_reference:
        n += 3 * sh_coeff_count(sh_degree)
    return n


def scene_nbytes(n, sh_degree, sh_by_reference=False):
    size = HEADER_SIZE + n * 4 * record_floats(sh_degree, sh_by_reference)
    if sh_by_reference:
        size += 4 * n
    return size


def _records(scene, with_sh):
    n = len(scene)
    cols = [scene.means, scene.scales, scene.q_l, scene.q_r, scene.opacity[:, None]]
    if with_sh:
        cols.append(scene.sh.reshape(n, -1))
    return np.concatenate(cols, axis=1).astype("<f4")


def encode_scene(scene, assignments=None):
    """Serialize ``scene``; pass codebook ``assignments`` to store SH by reference."""
    by_ref = assignments is not None
    header = _HEADER.pack(
        MAGIC, VERSION, len(scene), scene.sh_degree,
        FLAG_SH_BY_REFERENCE if by_ref else 0,
        scene.time_extent[0], scene.time_extent[1], scene.frame_count,
    )
    body = _records(scene, with_sh=not by_ref).tobytes()
    if by_ref:
        a = np.asarray(assignments, dtype="<u4")
        if a.shape != (len(scene),):
            raise ParameterError("one assignment per Gaussian is required")
        body += a.tobytes()
    return header + body


def decode_scene(data, codebook_entries=None):
    """Parse ``.g4d`` bytes.

    Scenes stored with SH by reference need ``codebook_entries`` (K x dim);
    the return value is then ``(scene, assignments)`` instead of ``scene``.
    """
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise FormatError("truncated header", len(data))
    magic, version, n, degree, flags, t0, t1, frames = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if degree > 3:
        raise FormatError(f"invalid sh_degree {degree}", 12)
    by_ref = bool(flags & FLAG_SH_BY_REFERENCE)
    expected = scene_nbytes(n, degree, by_ref)
    if len(data) < expected:
        raise FormatError(f"truncated body: need {expected} bytes", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after scene body", expected)

    width = record_floats(degree, by_ref)
    rec = np.frombuffer(data, dtype="<f4", count=n * width, offset=HEADER_SIZE)
    rec = rec.reshape(n, width).astype(np.float64)
    k = sh_coeff_count(degree)
    q_l = rec[:, 8:12]
    q_r = rec[:, 12:16]
    q_l = q_l / np.linalg.norm(q_l, axis=1, keepdims=True) if n else q_l
    q_r = q_r / np.linalg.norm(q_r, axis=1, keepdims=True) if n else q_r
    assignments = None
    if by_ref:
        if codebook_entries is None:
            raise FormatError("scene stores SH by reference; a codebook is required", 13)
        assignments = np.frombuffer(
            data, dtype="<u4", count=n, offset=HEADER_SIZE + n * width * 4
        ).astype(np.int64)
        entries = np.asarray(codebook_entries, dtype=np.float64)
        if n and assignments.max() >= entries.shape[0]:
            raise FormatError("assignment index exceeds codebook size")
        sh = entries[assignments].reshape(n, k, 3)
    else:
        sh = rec[:, 17:].reshape(n, k, 3)
    scales = rec[:, 4:8]
    if n and not np.all(scales > 0):
        raise FormatError("non-positive scale in scene file")
    scene = Scene4D(
        means=rec[:, 0:4], scales=scales, q_l=q_l, q_r=q_r, opacity=rec[:, 16],
        sh=sh, sh_degree=degree, time_extent=(t0, t1), frame_count=frames,
    )
    if by_ref:
        return scene, assignments
    return scene


def save_scene(path, scene, assignments=None):
    from .fileutil import atomic_write_bytes

    atomic_write_bytes(path, encode_scene(scene, assignments))


def load_scene(path, codebook_entries=None):
    with open(path, "rb") as fh:
        return decode_scene(fh.read(), codebook_entries)


# ---------------------------------------------------------------------------
# PLY import
# ---------------------------------------------------------------------------

_BASE_FIELDS = (
    ["mean_x", "mean_y", "mean_z", "mean_t"]
    + ["scale_x", "scale_y", "scale_z", "scale_t"]
    + ["ql_w", "ql_x", "ql_y", "ql_z", "qr_w", "qr_x", "qr_y", "qr_z", "opacity"]
)
_TRANSFORMS = {
    "identity": lambda v: v,
    "exp": np.exp,
    "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)),
}


def parse_mapping(text):
    """Parse ``field = ply_property [: transform]`` lines.

    Recognized fields are ``mean_{x,y,z,t}``, ``scale_{x,y,z,t}``,
    ``ql_{w,x,y,z}``, ``qr_{w,x,y,z}``, ``opacity`` and ``sh_<k>_<r|g|b>``.
    Optional transforms: ``identity`` (default), ``exp``, ``sigmoid``.
    """
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'field = property' on line {lineno}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        transform = "identity"
        if ":" in value:
            value, transform = (part.strip() for part in value.split(":", 1))
        if transform not in _TRANSFORMS:
            raise FormatError(f"unknown transform {transform!r} on line {lineno}", lineno)
        if key not in _BASE_FIELDS and not _is_sh_field(key):
            raise FormatError(f"unknown field {key!r} on line {lineno}", lineno)
        if key in mapping:
            raise FormatError(f"duplicate field {key!r} on line {lineno}", lineno)
        mapping[key] = (value, transform)
    missing = [f for f in _BASE_FIELDS if f not in mapping]
    if missing:
        raise FormatError(f"mapping is missing fields: {', '.join(missing)}")
    return mapping


def _is_sh_field(key):
    parts = key.split("_")
    return (len(parts) == 3 and parts[0] == "sh" and parts[1].isdigit()
            and int(parts[1]) < 16 and parts[2] in ("r", "g", "b"))


def import_ply(ply_path, mapping_text, time_extent=(0.0, 1.0), frame_count=1):
    """Build a scene from a PLY vertex table using an explicit property mapping."""
    from plyfile import PlyData

    mapping = parse_mapping(mapping_text)
    vertex = PlyData.read(str(ply_path))["vertex"]
    names = set(vertex.data.dtype.names)

    def column(field):
        prop, transform = mapping[field]
        if prop not in names:
            raise FormatError(f"PLY has no property {prop!r} (mapped from {field})")
        return _TRANSFORMS[transform](np.asarray(vertex.data[prop], dtype=np.float64))

    sh_fields = [k for k in mapping if k.startswith("sh_")]
    n_coeffs = 1 + max((int(k.split("_")[1]) for k in sh_fields), default=0)
    degree = int(round(np.sqrt(n_coeffs))) - 1
    if (degree + 1) ** 2 != n_coeffs:
        raise FormatError(f"SH coefficient count {n_coeffs} is not a perfect square")
    n = len(vertex.data)
    sh = np.zeros((n, n_coeffs, 3))
    for k in range(n_coeffs):
        for c, ch in enumerate("rgb"):
            key = f"sh_{k}_{ch}"
            if key not in mapping:
                raise FormatError(f"mapping is missing {key}")
            sh[:, k, c] = column(key)

    def stack(prefix, suffixes):
        return np.stack([column(f"{prefix}_{s}") for s in suffixes], axis=1)

    q_l = stack("ql", "wxyz")
    q_r = stack("qr", "wxyz")
    return Scene4D(
        means=stack("mean", "xyzt"),
        scales=stack("scale", "xyzt"),
        q_l=q_l / np.linalg.norm(q_l, axis=1, keepdims=True),
        q_r=q_r / np.linalg.norm(q_r, axis=1, keepdims=True),
        opacity=column("opacity"),
        sh=sh,
        sh_degree=degree,
        time_extent=time_extent,
        frame_count=frame_count,
    )
