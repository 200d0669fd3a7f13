"""Storage post-processing: SH vector quantization, mask bit-packing, byte accounting.

File formats (little-endian):

``.g4dm`` masks::

    "G4DM" | u32 version=1 | u32 n_gaussians | u32 n_keyframes | f32 threshold
    n_keyframes x f32 timestamps | n_keyframes rows of ceil(N/8) bytes, LSB-first

``.g4dc`` codebook::

    "G4DC" | u32 K | u32 dim | u32 N | u8 flags (bit0: u16 indices) | u8[3] pad
    K x dim f32 entries | N x (u16 or u32) assignments
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .scene_io import HEADER_SIZE, scene_nbytes
from .temporal_filter import KeyframeMaskSet

MASK_MAGIC = b"G4DM"
MASK_VERSION = 1
_MASK_HEADER = struct.Struct("<4sIIIf")
CODEBOOK_MAGIC = b"G4DC"
_CODEBOOK_HEADER = struct.Struct("<4sIIIB3x")
FLAG_U16 = 1


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray  # (K, dim)
    assignments: np.ndarray  # (M,)
    sse_history: tuple = field(default=())

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        assignments = np.asarray(self.assignments, dtype=np.int64)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ParameterError("codebook needs at least one entry")
        if not np.all(np.isfinite(entries)):
            raise ParameterError("codebook entries must be finite")
        if assignments.size and (assignments.min() < 0 or assignments.max() >= entries.shape[0]):
            raise ParameterError("assignment outside codebook range")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "assignments", assignments)

    @property
    def K(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def reconstruct(self):
        return self.entries[self.assignments]


def _sq_dists(x, c, chunk=2048):
    out = np.empty((x.shape[0], c.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        d = x[lo:lo + chunk, None, :] - c[None, :, :]
        out[lo:lo + chunk] = np.einsum("mkd,mkd->mk", d, d)
    return out


def _kmeans_pp(x, k, rng):
    m = x.shape[0]
    centres = np.empty((k, x.shape[1]))
    first = int(rng.integers(m))
    centres[0] = x[first]
    closest = _sq_dists(x, centres[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(m, p=closest / total))
        else:
            pick = int(rng.integers(m))
        centres[j] = x[pick]
        closest = np.minimum(closest, _sq_dists(x, centres[j:j + 1])[:, 0])
    return centres


def _centroids(x, labels, k, previous):
    """Per-cluster means, as first member + mean offset so that identical members stay exact."""
    centres = previous.copy()
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    xs = x[order]
    present, starts, counts = np.unique(sorted_labels, return_index=True, return_counts=True)
    first = xs[starts]
    dev = xs - np.repeat(first, counts, axis=0)
    sums = np.add.reduceat(dev, starts, axis=0)
    centres[present] = first + sums / counts[:, None]
    return centres, present


def kmeans_codebook(vectors, K, max_iters=50, seed=0):
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iters`` updates. Empty
    clusters are re-seeded with the point currently farthest from its centre.
    The total squared error is checked to be non-increasing after every
    update; ``sse_history[i]`` is the error after update ``i``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ParameterError("vectors must be a nonempty (M, dim) array")
    K = int(K)
    if K < 1 or K > x.shape[0]:
        raise ParameterError(f"K must lie in [1, {x.shape[0]}], got {K}")
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp(x, K, rng)
    d = _sq_dists(x, centres)
    labels = np.argmin(d, axis=1)
    history = [float(d[np.arange(x.shape[0]), labels].sum())]

    for _ in range(max_iters):
        centres, present = _centroids(x, labels, K, centres)
        empty = np.setdiff1d(np.arange(K), present)
        if empty.size:
            dist = np.einsum("md,md->m", x - centres[labels], x - centres[labels])
            for j in empty:
                far = int(np.argmax(dist))
                centres[j] = x[far]
                dist[far] = 0.0
        d = _sq_dists(x, centres)
        new_labels = np.argmin(d, axis=1)
        sse = float(d[np.arange(x.shape[0]), new_labels].sum())
        assert sse <= history[-1] * (1 + 1e-12) + 1e-300, "k-means objective increased"
        history.append(sse)
        if np.array_equal(new_labels, labels) and not empty.size:
            break
        labels = new_labels
    return Codebook(centres, labels, tuple(history))


def default_codebook_size(n):
    return max(1, min(n // 4, 4096))


def quantize_sh(scene, K, seed=0, max_iters=50):
    """Replace each Gaussian's SH block with its nearest codebook entry.

    Returns ``(quantized_scene, codebook)``; geometry and opacity are untouched.
    """
    n = len(scene)
    blocks = scene.sh.reshape(n, -1)
    book = kmeans_codebook(blocks, K, max_iters=max_iters, seed=seed)
    quantized = scene.replace(sh=book.reconstruct().reshape(scene.sh.shape))
    return quantized, book


def distinct_block_count(scene):
    return int(np.unique(scene.sh.reshape(len(scene), -1), axis=0).shape[0])


# ---------------------------------------------------------------------------
# Mask codec
# ---------------------------------------------------------------------------


def mask_header_nbytes(n_keyframes):
    return _MASK_HEADER.size + 4 * n_keyframes


def mask_nbytes(n_gaussians, n_keyframes):
    return mask_header_nbytes(n_keyframes) + n_keyframes * ((n_gaussians + 7) // 8)


def pack_masks(mask_set):
    n, k = mask_set.n_gaussians, mask_set.n_keyframes
    header = _MASK_HEADER.pack(MASK_MAGIC, MASK_VERSION, n, k, mask_set.threshold)
    times = mask_set.keyframe_times.astype("<f4").tobytes()
    rows = np.packbits(mask_set.masks, axis=1, bitorder="little")
    return header + times + rows.tobytes()


def unpack_masks(data):
    data = bytes(data)
    if len(data) < _MASK_HEADER.size:
        raise FormatError("truncated mask header", len(data))
    magic, version, n, k, threshold = _MASK_HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != MASK_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = mask_nbytes(n, k)
    if len(data) < expected:
        raise FormatError(f"truncated mask body: need {expected} bytes", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after mask body", expected)
    off = _MASK_HEADER.size
    times = np.frombuffer(data, dtype="<f4", count=k, offset=off).astype(np.float64)
    row_bytes = (n + 7) // 8
    rows = np.frombuffer(data, dtype=np.uint8, count=k * row_bytes, offset=off + 4 * k)
    bits = np.unpackbits(rows.reshape(k, row_bytes), axis=1, count=n, bitorder="little")
    return KeyframeMaskSet(times, bits.astype(bool), threshold)


# ---------------------------------------------------------------------------
# Codebook file
# ---------------------------------------------------------------------------


def encode_codebook(book):
    narrow = book.K <= 65536
    header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, book.K, book.dim, book.assignments.size,
                                   FLAG_U16 if narrow else 0)
    idx = book.assignments.astype("<u2" if narrow else "<u4")
    return header + book.entries.astype("<f4").tobytes() + idx.tobytes()


def codebook_nbytes(K, dim, n):
    return _CODEBOOK_HEADER.size + 4 * K * dim + (2 if K <= 65536 else 4) * n


def decode_codebook(data):
    data = bytes(data)
    if len(data) < _CODEBOOK_HEADER.size:
        raise FormatError("truncated codebook header", len(data))
    magic, K, dim, n, flags = _CODEBOOK_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    width = 2 if flags & FLAG_U16 else 4
    expected = _CODEBOOK_HEADER.size + 4 * K * dim + width * n
    if len(data) != expected:
        raise FormatError(f"codebook must be {expected} bytes", len(data))
    off = _CODEBOOK_HEADER.size
    entries = np.frombuffer(data, dtype="<f4", count=K * dim, offset=off).reshape(K, dim)
    idx = np.frombuffer(data, dtype="<u2" if width == 2 else "<u4", count=n,
                        offset=off + 4 * K * dim)
    return Codebook(entries.astype(np.float64), idx.astype(np.int64))


# ---------------------------------------------------------------------------
# Storage accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StorageReport:
    raw_bytes: int
    pruned_bytes: int
    masks_bytes: int
    codebook_bytes: int
    quantized_scene_bytes: int
    total_pp_bytes: int
    compression_ratio: float

    def payload_ratio(self):
        """Pruning-only ratio on per-Gaussian records (headers excluded)."""
        return (self.raw_bytes - HEADER_SIZE) / (self.pruned_bytes - HEADER_SIZE)

    def to_text(self):
        rows = [
            ("raw_bytes", self.raw_bytes),
            ("pruned_bytes", self.pruned_bytes),
            ("masks_bytes", self.masks_bytes),
            ("codebook_bytes", self.codebook_bytes),
            ("quantized_scene_bytes", self.quantized_scene_bytes),
            ("total_pp_bytes", self.total_pp_bytes),
            ("compression_ratio", f"{self.compression_ratio:.6f}"),
        ]
        if self.pruned_bytes > HEADER_SIZE:
            rows.append(("payload_prune_ratio", f"{self.payload_ratio():.6f}"))
        return "".join(f"{k} = {v}\n" for k, v in rows)


def storage_report(scene_before, scene_after, mask_set=None, codebook=None):
    """Byte counts derived from the on-disk formats.

    Without a codebook the post-processed total is the pruned scene plus
    masks; with one it is the SH-by-reference scene plus codebook plus masks.
    """
    raw = scene_nbytes(len(scene_before), scene_before.sh_degree)
    pruned = scene_nbytes(len(scene_after), scene_after.sh_degree)
    masks = 0 if mask_set is None else mask_nbytes(mask_set.n_gaussians, mask_set.n_keyframes)
    if codebook is None:
        cb = 0
        quantized = pruned
    else:
        cb = codebook_nbytes(codebook.K, codebook.dim, codebook.assignments.size)
        quantized = scene_nbytes(len(scene_after), scene_after.sh_degree, sh_by_reference=True)
    total = quantized + cb + masks
    return StorageReport(raw, pruned, masks, cb, quantized, total, raw / total)
