"""Ellipsoid keep-out zones.

An obstacle is the open region (x - c)' P (x - c) < 1; a point is clear
when the quadratic form is at least 1 (the boundary itself is clear). The
safety factor s >= 1 inflates all semi-axes, implemented as P / s^2, so
growing s can only turn clear points into violations, never the reverse.
Segment checks sample interpolated points at spacing h_check; sampling can
tunnel through an obstacle thinner than the spacing, so the default spacing
is half the smallest inflated semi-axis and coarser spacings are rejected
in strict mode.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolationError


@dataclass
class EllipsoidObstacle:
    center: np.ndarray           # (3,) static or (T, 3) per time index
    P: np.ndarray                # (3, 3) symmetric positive definite
    safety_factor: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.center.shape != (3,) and not (
                self.center.ndim == 2 and self.center.shape[1] == 3
                and self.center.shape[0] >= 1):
            raise ContractViolationError(
                f"center must be (3,) or (T, 3), got {self.center.shape}")
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (3, 3):
            raise ContractViolationError(f"P must be 3x3, got {self.P.shape}")
        if np.max(np.abs(self.P - self.P.T)) > 1e-9:
            raise ContractViolationError("P must be symmetric")
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError as exc:
            raise ContractViolationError("P must be positive definite") from exc
        if not (np.isfinite(self.safety_factor) and self.safety_factor >= 1.0):
            raise ContractViolationError(
                f"safety factor must be >= 1, got {self.safety_factor}")
        self._P_eff = self.P / (self.safety_factor ** 2)

    @property
    def effective_P(self):
        """Shape matrix with the safety inflation applied."""
        return self._P_eff

    def center_at(self, k):
        """Center at time index k; indices past the track clamp to the end."""
        if self.center.ndim == 1:
            return self.center
        return self.center[min(max(int(k), 0), self.center.shape[0] - 1)]

    def min_semi_axis(self):
        """Smallest semi-axis of the inflated ellipsoid."""
        return 1.0 / math.sqrt(float(np.linalg.eigvalsh(self._P_eff)[-1]))

    def quad_form(self, x, k=0):
        d = np.asarray(x, dtype=float) - self.center_at(k)
        return float(d @ self._P_eff @ d)

    def inflated(self, factor):
        """Copy with the safety factor multiplied by ``factor`` >= 1."""
        return EllipsoidObstacle(center=self.center.copy(), P=self.P.copy(),
                                 safety_factor=self.safety_factor * factor,
                                 name=self.name)

    @classmethod
    def from_semi_axes(cls, center, semi_axes, safety_factor=1.0, name=""):
        a = np.asarray(semi_axes, dtype=float)
        if a.shape != (3,) or np.any(a <= 0):
            raise ContractViolationError(
                f"semi-axes must be 3 positive numbers, got {semi_axes!r}")
        return cls(center=np.asarray(center, dtype=float),
                   P=np.diag(1.0 / a ** 2), safety_factor=safety_factor,
                   name=name)


@dataclass
class ObstacleField:
    obstacles: list = field(default_factory=list)

    @property
    def n_obs(self):
        return len(self.obstacles)

    def __iter__(self):
        return iter(self.obstacles)

    def add(self, obs):
        self.obstacles.append(obs)

    def inflated(self, factor):
        return ObstacleField([o.inflated(factor) for o in self.obstacles])

    def clearance(self, x, k=0):
        """Smallest quadratic form over the field; >= 1 means clear."""
        if not self.obstacles:
            return math.inf
        return min(o.quad_form(x, k) for o in self.obstacles)

    def default_h_check(self):
        """Half the smallest inflated semi-axis over the field."""
        if not self.obstacles:
            return math.inf
        return 0.5 * min(o.min_semi_axis() for o in self.obstacles)


def point_clear(field_or_obstacle, x, k=0):
    """True when the point is outside (or on the boundary of) every zone."""
    if isinstance(field_or_obstacle, EllipsoidObstacle):
        return field_or_obstacle.quad_form(x, k) >= 1.0
    return field_or_obstacle.clearance(x, k) >= 1.0


def segment_clear(field, xa, xb, h_check=None, k=0, strict=True):
    """Check the straight segment xa -> xb by interpolated point samples.

    ``h_check`` is the sample spacing (default: half the smallest inflated
    semi-axis). A spacing above the default bound can tunnel through thin
    obstacles; in strict mode that is a configuration error.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    if xa.shape != (3,) or xb.shape != (3,):
        raise ContractViolationError("segment endpoints must be 3-vectors")
    if field.n_obs == 0:
        return True
    bound = field.default_h_check()
    if h_check is None:
        h_check = bound
    if not (np.isfinite(h_check) and h_check > 0.0):
        raise ConfigurationError(f"h_check must be positive, got {h_check}")
    if strict and h_check > bound * (1.0 + 1e-12):
        raise ConfigurationError(
            f"h_check={h_check:.4g} exceeds the tunneling bound "
            f"{bound:.4g} (half the smallest inflated semi-axis)")
    length = float(np.linalg.norm(xb - xa))
    n_pts = max(2, int(math.ceil(length / h_check)) + 1)
    for t in np.linspace(0.0, 1.0, n_pts):
        if not point_clear(field, xa + t * (xb - xa), k):
            return False
    return True


def path_clear(field, points, h_check=None, k=0, strict=True):
    """Batched segment_clear over a polyline of vertices (M, 3).

    Equivalent to checking every consecutive segment at spacing h_check,
    with all sample quadratic forms evaluated in one vectorized sweep.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 3:
        raise ContractViolationError(f"points must be (M, 3), got {pts.shape}")
    if field.n_obs == 0:
        return True
    bound = field.default_h_check()
    if h_check is None:
        h_check = bound
    if not (np.isfinite(h_check) and h_check > 0.0):
        raise ConfigurationError(f"h_check must be positive, got {h_check}")
    if strict and h_check > bound * (1.0 + 1e-12):
        raise ConfigurationError(
            f"h_check={h_check:.4g} exceeds the tunneling bound "
            f"{bound:.4g} (half the smallest inflated semi-axis)")
    chunks = [pts[:1]]
    for i in range(pts.shape[0] - 1):
        a, b = pts[i], pts[i + 1]
        length = float(np.linalg.norm(b - a))
        n_pts = max(2, int(math.ceil(length / h_check)) + 1)
        ts = np.linspace(0.0, 1.0, n_pts)[1:, None]
        chunks.append(a + ts * (b - a))
    samples = np.vstack(chunks)
    for obs in field.obstacles:
        d = samples - obs.center_at(k)
        q = np.einsum("ni,ij,nj->n", d, obs.effective_P, d)
        if np.any(q < 1.0):
            return False
    return True


def trajectory_constraint(field, positions, start_index=0):
    """Stacked clearance residuals 1 - (p - c)'P(p - c), obstacle-major.

    positions is (N, 3); the result is (n_obs * N,) with all knots of the
    first obstacle first. Residuals <= 0 mean clear; time-varying centers
    are indexed from ``start_index`` per knot.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if pos.shape[1] != 3:
        raise ContractViolationError(
            f"positions must be (N, 3), got {pos.shape}")
    N = pos.shape[0]
    out = np.empty(field.n_obs * N)
    for j, obs in enumerate(field.obstacles):
        for i in range(N):
            out[j * N + i] = 1.0 - obs.quad_form(pos[i], start_index + i)
    return out
