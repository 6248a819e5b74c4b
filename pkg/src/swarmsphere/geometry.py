"""Embedded-sphere primitives.

A point on the d-sphere is a plain float64 array of length d+1 with unit
Euclidean norm; an ensemble of n points is an (n, d+1) array.  The dimension
d is a runtime quantity, nothing here is specialised to a fixed d.  All
operations are pure: inputs are never mutated and returned arrays are marked
read-only where they are shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Ensemble",
    "SkewMatrix",
    "exact_mean",
    "renormalize",
    "renormalize_rows",
    "reorthonormalize",
    "rng_stream",
    "sample_uniform",
    "sample_vmf",
    "sphere_surface",
    "tangent_project",
]

_DEGENERATE_NORM = 1e-14
_MAX_SEED = 2**64


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based random generator keyed by (seed, stream).

    Distinct streams under the same seed are statistically independent, so
    sharded Monte-Carlo loops stay reproducible no matter how the shards are
    scheduled.
    """
    if not (0 <= seed < _MAX_SEED) or not (0 <= stream < _MAX_SEED):
        raise ValueError("seed and stream must be nonnegative 64-bit integers")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def renormalize(y) -> np.ndarray:
    """Scale a vector back onto the unit sphere."""
    y = np.asarray(y, dtype=float)
    n = math.sqrt(float(y @ y))
    if n <= _DEGENERATE_NORM:
        raise ValueError("degenerate point: cannot renormalize a near-zero vector")
    return y / n


def renormalize_rows(points: np.ndarray) -> np.ndarray:
    """Row-wise renormalization of an (n, d+1) array."""
    points = np.asarray(points, dtype=float)
    norms = np.sqrt(np.einsum("ij,ij->i", points, points))
    if np.any(norms <= _DEGENERATE_NORM):
        raise ValueError("degenerate point: cannot renormalize a near-zero vector")
    return points / norms[:, None]


def tangent_project(x, v) -> np.ndarray:
    """Project v onto the tangent space of the sphere at x: v - <x,v> x."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape or x.ndim != 1:
        raise ValueError("dimension mismatch between point and vector")
    return v - float(x @ v) * x


def reorthonormalize(r) -> np.ndarray:
    """Snap a near-rotation matrix to the closest orthogonal matrix.

    Uses the Newton iteration for the orthogonal polar factor,
    Q <- (Q + Q^{-T}) / 2, which converges quadratically near the orthogonal
    group and leaves exact rotations fixed.  Inputs further than 0.5 from
    orthogonality (Frobenius defect of R^T R) are rejected, as are inputs
    that are not orientation-preserving.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError("expected a square matrix")
    n = r.shape[0]
    eye = np.eye(n)
    defect = np.linalg.norm(r.T @ r - eye)
    if not defect < 0.5:
        raise ValueError("matrix too far from orthogonal to correct")
    if np.linalg.det(r) <= 0.0:
        raise ValueError("matrix is not orientation-preserving")
    q = r
    for _ in range(50):
        q_next = 0.5 * (q + np.linalg.inv(q).T)
        if np.linalg.norm(q_next - q) <= 1e-15 * n:
            return q_next
        q = q_next
    raise ValueError("polar correction failed to converge")  # pragma: no cover


def sphere_surface(n: int) -> float:
    """Surface measure of the unit n-sphere embedded in R^{n+1}."""
    if n < 0:
        raise ValueError("sphere dimension must be nonnegative")
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


def exact_mean(points: np.ndarray) -> np.ndarray:
    """Column mean with exact (fsum) accumulation.

    The exactness matters: when an ensemble consists of exact antipodal
    pairs the mean must come out as exactly zero, otherwise summation noise
    seeds a spurious symmetry-breaking drift in mean-field runs.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    return np.array([math.fsum(points[:, j].tolist()) / n for j in range(points.shape[1])])


class SkewMatrix:
    """A (d+1) x (d+1) skew-symmetric flow generator.

    Only the strictly lower triangle is stored; the full matrix is mirrored
    on read, so the identity M^T = -M holds by construction.  Instances are
    immutable, hashable by the bit pattern of the stored triangle, and usable
    as dictionary keys for grouping particles that share a generator.
    """

    __slots__ = ("n", "_lower", "_full", "_hash")

    def __init__(self, n: int, lower):
        n = int(n)
        if n < 2:
            raise ValueError("ambient dimension must be at least 2")
        lower = np.array(lower, dtype=float).reshape(-1)
        if lower.size != n * (n - 1) // 2:
            raise ValueError(f"expected {n * (n - 1) // 2} lower-triangle entries, got {lower.size}")
        lower.flags.writeable = False
        self.n = n
        self._lower = lower
        self._full = None
        self._hash = hash((n, lower.tobytes()))

    @property
    def d(self) -> int:
        return self.n - 1

    @property
    def lower(self) -> np.ndarray:
        return self._lower

    @property
    def matrix(self) -> np.ndarray:
        if self._full is None:
            m = np.zeros((self.n, self.n))
            m[np.tril_indices(self.n, -1)] = self._lower
            m = m - m.T
            m.flags.writeable = False
            self._full = m
        return self._full

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Matrix action on a point (d+1,) or a stack of points (n, d+1)."""
        return np.asarray(points, dtype=float) @ self.matrix.T

    @classmethod
    def zero(cls, d: int) -> "SkewMatrix":
        return cls(d + 1, np.zeros((d + 1) * d // 2))

    @classmethod
    def from_matrix(cls, a, tol: float = 1e-12) -> "SkewMatrix":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        if np.max(np.abs(a + a.T)) > tol:
            raise ValueError("matrix is not skew-symmetric")
        return cls(a.shape[0], a[np.tril_indices(a.shape[0], -1)])

    @classmethod
    def random(cls, d: int, seed: int, scale: float = 1.0) -> "SkewMatrix":
        """Gaussian lower triangle with the given scale, seeded deterministically."""
        rng = rng_stream(seed)
        return cls(d + 1, scale * rng.standard_normal((d + 1) * d // 2))

    @classmethod
    def planar(cls, d: int, rate: float, plane: tuple[int, int] = (0, 1)) -> "SkewMatrix":
        """Generator of a rotation at the given rate in one coordinate plane.

        ``plane=(i, j)`` rotates axis i toward axis j.
        """
        i, j = plane
        if i == j or not (0 <= i <= d) or not (0 <= j <= d):
            raise ValueError("plane must name two distinct axes in range")
        m = np.zeros((d + 1, d + 1))
        m[j, i] = rate
        m[i, j] = -rate
        return cls.from_matrix(m)

    def __eq__(self, other):
        if not isinstance(other, SkewMatrix):
            return NotImplemented
        return self.n == other.n and self._lower.tobytes() == other._lower.tobytes()

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"SkewMatrix(n={self.n}, |lower|={np.linalg.norm(self._lower):.3g})"


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Ordered particle states on the sphere, with optional generator labels.

    ``omega`` is either None (no free flow), a single shared SkewMatrix, or a
    tuple with one SkewMatrix per particle.  Instances are immutable values;
    the point array is copied on construction and marked read-only.
    """

    points: np.ndarray
    omega: "SkewMatrix | tuple[SkewMatrix, ...] | None" = None
    time: float = 0.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, order="C")
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 2:
            raise ValueError("points must be an (n, d+1) array with d >= 1")
        norms = np.sqrt(np.einsum("ij,ij->i", pts, pts))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ensemble points must lie on the unit sphere")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        omega = self.omega
        if isinstance(omega, (list, tuple)):
            omega = tuple(omega)
            if len(omega) != pts.shape[0]:
                raise ValueError("per-particle generator list length must match the point count")
            for om in omega:
                if not isinstance(om, SkewMatrix) or om.n != pts.shape[1]:
                    raise ValueError("generator dimension must match the ambient dimension")
            object.__setattr__(self, "omega", omega)
        elif isinstance(omega, SkewMatrix):
            if omega.n != pts.shape[1]:
                raise ValueError("generator dimension must match the ambient dimension")
        elif omega is not None:
            raise TypeError("omega must be None, a SkewMatrix, or a tuple of SkewMatrix")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1] - 1

    def with_omega(self, omega) -> "Ensemble":
        return Ensemble(self.points, omega, self.time)

    def omega_groups(self) -> list[tuple["SkewMatrix | None", np.ndarray]]:
        """Distinct generators with the particle indices that carry them."""
        if not isinstance(self.omega, tuple):
            return [(self.omega, np.arange(self.n))]
        buckets: dict[SkewMatrix, list[int]] = {}
        order: list[SkewMatrix] = []
        for i, om in enumerate(self.omega):
            if om not in buckets:
                buckets[om] = []
                order.append(om)
            buckets[om].append(i)
        return [(om, np.array(buckets[om])) for om in order]


def _uniform_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    pts = rng.standard_normal((n, d + 1))
    norms = np.sqrt(np.einsum("ij,ij->i", pts, pts))
    while np.any(norms <= _DEGENERATE_NORM):  # pragma: no cover
        bad = norms <= _DEGENERATE_NORM
        pts[bad] = rng.standard_normal((int(bad.sum()), d + 1))
        norms = np.sqrt(np.einsum("ij,ij->i", pts, pts))
    return pts / norms[:, None]


def sample_uniform(d: int, n: int, seed: int) -> Ensemble:
    """n i.i.d. uniformly distributed points on the d-sphere."""
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    return Ensemble(_uniform_rows(rng_stream(seed), n, d))


def _vmf_rows(rng: np.random.Generator, mu: np.ndarray, concentration: float, n: int) -> np.ndarray:
    # Wood-style rejection sampler for the cosine against the mean direction,
    # then a uniform tangent direction.
    m = mu.size
    dm = m - 1
    kappa = float(concentration)
    b = dm / (math.sqrt(4.0 * kappa * kappa + dm * dm) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm * math.log(1.0 - x0 * x0)
    ws = np.empty(n)
    have = 0
    while have < n:
        todo = n - have
        draw = max(2 * todo, 64)
        z = rng.beta(dm / 2.0, dm / 2.0, size=draw)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(draw)
        ok = kappa * w + dm * np.log1p(-x0 * w) - c >= np.log(u)
        accepted = w[ok][:todo]
        ws[have : have + accepted.size] = accepted
        have += accepted.size
    v = rng.standard_normal((n, m))
    v -= np.outer(v @ mu, mu)
    v = renormalize_rows(v)
    pts = ws[:, None] * mu + np.sqrt(np.maximum(0.0, 1.0 - ws * ws))[:, None] * v
    return renormalize_rows(pts)


def sample_vmf(mu, concentration: float, n: int, seed: int) -> Ensemble:
    """n i.i.d. von Mises-Fisher samples with the given mean direction.

    Concentration zero reduces exactly to the uniform distribution.
    """
    mu = renormalize(mu)
    if concentration < 0:
        raise ValueError("concentration must be nonnegative")
    if n < 1:
        raise ValueError("need n >= 1")
    if concentration == 0.0:
        return sample_uniform(mu.size - 1, n, seed)
    return Ensemble(_vmf_rows(rng_stream(seed), mu, concentration, n))
