"""4D Gaussian primitives and their time-conditioned 3D decomposition.

A 4D Gaussian has mean ``(x, y, z, t)`` and covariance ``R diag(s^2) R^T``
where ``R`` is an SO(4) rotation stored as a pair of unit quaternions
(left and right isoclinic factors). Slicing it at time ``t`` gives a 3D
Gaussian whose mean drifts linearly with ``t`` and whose covariance does
not depend on ``t``, weighted by an unnormalized temporal Gaussian.

All math is float64. Quaternions are ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateTimeError,
    InvalidRotationError,
    InvalidRotorError,
    ParameterError,
    ShapeError,
)

UNIT_TOL = 1e-6
ROTATION_TOL = 1e-9
SIGMA_T_EPS = 1e-12


def sh_coeff_count(degree):
    if degree not in (0, 1, 2, 3):
        raise ParameterError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# Quaternion / SO(4) helpers
# ---------------------------------------------------------------------------


def left_matrix(q):
    """Matrix of ``p -> q * p`` (Hamilton product), shape (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    a, b, c, d = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([a, -b, -c, -d], -1),
            np.stack([b, a, -d, c], -1),
            np.stack([c, d, a, -b], -1),
            np.stack([d, -c, b, a], -1),
        ],
        -2,
    )


def right_matrix(q):
    """Matrix of ``p -> p * q`` (Hamilton product), shape (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    p, r, s, u = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([p, -r, -s, -u], -1),
            np.stack([r, p, u, -s], -1),
            np.stack([s, -u, p, r], -1),
            np.stack([u, s, -r, p], -1),
        ],
        -2,
    )


def _check_unit(q, name):
    norms = np.linalg.norm(np.asarray(q, dtype=np.float64), axis=-1)
    if np.any(~np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise InvalidRotorError(f"{name} is not unit-norm within {UNIT_TOL}")


def rotor_to_matrix(q_l, q_r):
    """SO(4) rotation ``L(q_l) @ R(q_r)`` for unit quaternions.

    Accepts single quaternions or stacks of shape (N, 4).
    """
    _check_unit(q_l, "q_l")
    _check_unit(q_r, "q_r")
    return left_matrix(q_l) @ right_matrix(q_r)


# The 16 products L(e_i) R(e_j) are mutually orthogonal under the Frobenius
# inner product, each with squared norm 4.
_ISOCLINIC_BASIS = np.einsum(
    "iab,jbc->ijac", left_matrix(np.eye(4)), right_matrix(np.eye(4))
)


def _canonical_sign(q):
    for v in q:
        if v > 0:
            return q
        if v < 0:
            return -q
    return q


def so4_to_isoclinic(R):
    """Factor a 4x4 rotation into ``(q_l, q_r)`` with ``rotor_to_matrix(q_l, q_r) == R``.

    The pair is only defined up to a simultaneous sign flip; the returned
    ``q_l`` has its first nonzero component positive.

    Raises
    ------
    InvalidRotationError
        If ``R`` is not orthogonal with determinant +1 within 1e-9.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (4, 4):
        raise InvalidRotationError(f"expected 4x4 matrix, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation has non-finite entries")
    if np.max(np.abs(R.T @ R - np.eye(4))) > ROTATION_TOL:
        raise InvalidRotationError("matrix is not orthogonal")
    if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
        raise InvalidRotationError("matrix is not a proper rotation (det != +1)")

    # associate matrix A = q_l q_r^T (rank one)
    A = np.einsum("ac,ijac->ij", R, _ISOCLINIC_BASIS) / 4.0
    row = int(np.argmax(np.linalg.norm(A, axis=1)))
    q_r = A[row] / np.linalg.norm(A[row])
    q_l = A @ q_r
    q_l /= np.linalg.norm(q_l)
    flipped = _canonical_sign(q_l)
    if flipped is not q_l:
        q_l, q_r = flipped, -q_r
    return q_l, q_r


def random_unit_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Primitive types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian4D:
    """One anisotropic space-time Gaussian.

    ``scales`` are linear standard deviations along the rotated principal
    axes; ``sh`` has shape ``((degree + 1)**2, 3)``.
    """

    mean: np.ndarray
    scales: np.ndarray
    q_l: np.ndarray
    q_r: np.ndarray
    opacity: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(4)
        q_l = np.asarray(self.q_l, dtype=np.float64).reshape(4)
        q_r = np.asarray(self.q_r, dtype=np.float64).reshape(4)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim != 2 or sh.shape[1] != 3 or sh.shape[0] not in (1, 4, 9, 16):
            raise ShapeError(f"sh must have shape ((d+1)^2, 3), got {sh.shape}")
        if not np.all(scales > 0):
            raise ParameterError("all scales must be > 0")
        if not (0.0 < float(self.opacity) <= 1.0):
            raise ParameterError(f"opacity must lie in (0, 1], got {self.opacity}")
        _check_unit(q_l, "q_l")
        _check_unit(q_r, "q_r")
        for name, value in (("mean", mean), ("scales", scales), ("q_l", q_l),
                            ("q_r", q_r), ("sh", sh)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "opacity", float(self.opacity))

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[0]))) - 1


@dataclass(frozen=True)
class ConditionalGaussian3D:
    mean3: np.ndarray
    cov3: np.ndarray
    temporal_weight: float


def covariance4d(g):
    """Full 4x4 covariance ``R diag(s^2) R^T``."""
    R = rotor_to_matrix(g.q_l, g.q_r)
    return (R * g.scales**2) @ R.T


def _sigma_t(cov):
    s = float(cov[3, 3])
    if not s > SIGMA_T_EPS:
        raise DegenerateTimeError(f"temporal variance {s!r} <= {SIGMA_T_EPS}")
    return s


def temporal_opacity(g, t):
    """Unnormalized temporal weight ``exp(-(t - mu_t)^2 / (2 Sigma_t))`` in (0, 1]."""
    s = _sigma_t(covariance4d(g))
    dt = float(t) - g.mean[3]
    return float(np.exp(-dt * dt / (2.0 * s)))


def temporal_opacity_d2(g, t):
    """Second time-derivative of :func:`temporal_opacity`."""
    s = _sigma_t(covariance4d(g))
    dt = float(t) - g.mean[3]
    p = np.exp(-dt * dt / (2.0 * s))
    return float((dt * dt / (s * s) - 1.0 / s) * p)


def condition_at_time(g, t):
    """Slice ``g`` at time ``t`` into a 3D Gaussian and its temporal weight."""
    cov = covariance4d(g)
    s = _sigma_t(cov)
    cross = cov[:3, 3]
    dt = float(t) - g.mean[3]
    mean3 = g.mean[:3] + cross * (dt / s)
    cov3 = cov[:3, :3] - np.outer(cross, cross) / s
    cov3 = 0.5 * (cov3 + cov3.T)
    return ConditionalGaussian3D(mean3, cov3, float(np.exp(-dt * dt / (2.0 * s))))


def from_motion(position, velocity, spatial_cov, t_center, sigma_t, opacity=1.0, sh=None):
    """Build a Gaussian that moves linearly through space over time.

    At time ``t_center + d`` the conditional mean is ``position + velocity * d``
    and the conditional covariance is ``spatial_cov``. ``sigma_t`` is the
    temporal standard deviation (so ``Sigma_t = sigma_t**2``).
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    velocity = np.asarray(velocity, dtype=np.float64).reshape(3)
    spatial_cov = np.asarray(spatial_cov, dtype=np.float64).reshape(3, 3)
    if not sigma_t > 0:
        raise ParameterError("sigma_t must be > 0")
    if not np.allclose(spatial_cov, spatial_cov.T, atol=1e-12):
        raise ParameterError("spatial_cov must be symmetric")
    if np.linalg.eigvalsh(spatial_cov).min() <= 0:
        raise ParameterError("spatial_cov must be positive definite")

    var_t = sigma_t * sigma_t
    target = np.empty((4, 4))
    target[:3, :3] = spatial_cov + np.outer(velocity, velocity) * var_t
    target[:3, 3] = target[3, :3] = velocity * var_t
    target[3, 3] = var_t

    lam, vecs = np.linalg.eigh(target)
    assert lam.min() > 0, "assembled 4D covariance is not positive definite"
    if np.linalg.det(vecs) < 0:
        vecs[:, 0] = -vecs[:, 0]
    q_l, q_r = so4_to_isoclinic(vecs)
    if sh is None:
        sh = np.zeros((1, 3))
    mean = np.concatenate([position, [t_center]])
    return Gaussian4D(mean, np.sqrt(lam), q_l, q_r, opacity, sh)


# ---------------------------------------------------------------------------
# Scene container (struct of arrays) and batch kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scene4D:
    """Ordered set of 4D Gaussians stored column-wise.

    Row ``i`` of every array is Gaussian ``i``; that index is what masks,
    score tables and codebook assignments refer to.
    """

    means: np.ndarray
    scales: np.ndarray
    q_l: np.ndarray
    q_r: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    sh_degree: int
    time_extent: tuple = (0.0, 1.0)
    frame_count: int = 1

    def __post_init__(self):
        n = np.asarray(self.means).shape[0] if np.ndim(self.means) == 2 else 0
        k = sh_coeff_count(self.sh_degree)
        arrays = {
            "means": (np.asarray(self.means, dtype=np.float64).reshape(n, 4)),
            "scales": np.asarray(self.scales, dtype=np.float64).reshape(n, 4),
            "q_l": np.asarray(self.q_l, dtype=np.float64).reshape(n, 4),
            "q_r": np.asarray(self.q_r, dtype=np.float64).reshape(n, 4),
            "opacity": np.asarray(self.opacity, dtype=np.float64).reshape(n),
        }
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.shape != (n, k, 3):
            raise ShapeError(f"sh must have shape {(n, k, 3)}, got {sh.shape}")
        arrays["sh"] = sh
        t0, t1 = (float(v) for v in self.time_extent)
        if not t0 < t1:
            raise ParameterError(f"time_extent must satisfy t_min < t_max, got {self.time_extent}")
        if int(self.frame_count) < 1:
            raise ParameterError("frame_count must be >= 1")
        if n:
            if not np.all(arrays["scales"] > 0):
                raise ParameterError("all scales must be > 0")
            op = arrays["opacity"]
            if not np.all((op > 0) & (op <= 1)):
                raise ParameterError("opacity must lie in (0, 1]")
            _check_unit(arrays["q_l"], "q_l")
            _check_unit(arrays["q_r"], "q_r")
        for name, value in arrays.items():
            value = np.ascontiguousarray(value)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "time_extent", (t0, t1))
        object.__setattr__(self, "frame_count", int(self.frame_count))
        object.__setattr__(self, "sh_degree", int(self.sh_degree))

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return Gaussian4D(self.means[i], self.scales[i], self.q_l[i], self.q_r[i],
                          self.opacity[i], self.sh[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree=None, time_extent=(0.0, 1.0), frame_count=1):
        gaussians = list(gaussians)
        if sh_degree is None:
            sh_degree = gaussians[0].sh_degree if gaussians else 0
        k = sh_coeff_count(sh_degree)
        for g in gaussians:
            if g.sh.shape[0] != k:
                raise ShapeError("all Gaussians must share the scene SH degree")
        n = len(gaussians)

        def stack(attr, shape):
            if not n:
                return np.zeros((0,) + shape)
            return np.stack([np.asarray(getattr(g, attr), dtype=np.float64) for g in gaussians])

        return cls(
            means=stack("mean", (4,)),
            scales=stack("scales", (4,)),
            q_l=stack("q_l", (4,)),
            q_r=stack("q_r", (4,)),
            opacity=np.array([g.opacity for g in gaussians], dtype=np.float64),
            sh=stack("sh", (k, 3)),
            sh_degree=sh_degree,
            time_extent=time_extent,
            frame_count=frame_count,
        )

    def subset(self, indices):
        """Scene restricted to ``indices`` (kept in the given order)."""
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(
            means=self.means[idx], scales=self.scales[idx], q_l=self.q_l[idx],
            q_r=self.q_r[idx], opacity=self.opacity[idx], sh=self.sh[idx],
        )

    def replace(self, **changes):
        fields = dict(
            means=self.means, scales=self.scales, q_l=self.q_l, q_r=self.q_r,
            opacity=self.opacity, sh=self.sh, sh_degree=self.sh_degree,
            time_extent=self.time_extent, frame_count=self.frame_count,
        )
        fields.update(changes)
        return Scene4D(**fields)

    def frame_times(self):
        """Timestamps of the source frames, evenly spaced over ``time_extent``."""
        t0, t1 = self.time_extent
        if self.frame_count == 1:
            return np.array([t0])
        return np.linspace(t0, t1, self.frame_count)

    def covariances(self, indices=None):
        """Batch of 4x4 covariances, shape (M, 4, 4)."""
        if indices is None:
            q_l, q_r, s = self.q_l, self.q_r, self.scales
        else:
            q_l, q_r, s = self.q_l[indices], self.q_r[indices], self.scales[indices]
        R = left_matrix(q_l) @ right_matrix(q_r)
        return (R * (s * s)[:, None, :]) @ np.swapaxes(R, -1, -2)

    def sigma_t(self):
        return self.covariances()[:, 3, 3]


def batch_temporal_opacity(means_t, sigma_t, t):
    if np.any(~(sigma_t > SIGMA_T_EPS)):
        raise DegenerateTimeError("scene contains a Gaussian with degenerate temporal variance")
    dt = t - means_t
    return np.exp(-dt * dt / (2.0 * sigma_t))


def batch_condition(means, cov, t):
    """Vectorized conditioning; returns ``(mean3, cov3, p)`` for every row."""
    s = cov[:, 3, 3]
    if np.any(~(s > SIGMA_T_EPS)):
        raise DegenerateTimeError("scene contains a Gaussian with degenerate temporal variance")
    cross = cov[:, :3, 3]
    dt = t - means[:, 3]
    mean3 = means[:, :3] + cross * (dt / s)[:, None]
    cov3 = cov[:, :3, :3] - cross[:, :, None] * cross[:, None, :] / s[:, None, None]
    p = np.exp(-dt * dt / (2.0 * s))
    return mean3, cov3, p
