"""Phase-space geometries and the backward exit-time oracle.

A phase space is a bounded convex spatial domain together with a velocity
measure.  Everything downstream (grids, boundary operators, the transport
engines) consumes three geometric primitives defined here:

* ``sojourn_time(x, v)`` -- the backward exit time
  ``t(x, v) = inf{s > 0 : x - s v not in Omega}``, i.e. the time a particle
  observed at ``x`` with velocity ``v`` has spent inside the domain since it
  last crossed the boundary.  It is 0 on incoming boundary points, positive
  on outgoing ones, and infinite for ``v = 0``.
* ``backward_exit(x, v)`` -- the incoming boundary point
  ``(x - t(x,v) v, v)`` the backward characteristic lands on.
* the decomposition of the boundary into incoming / outgoing / tangential
  parts according to the sign of ``v . n(x)``.

Only convex domains are supported (slab, ball, triangular population
domain): backward tracing then consists of single chords between boundary
hits, which keeps every formula closed-form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INCOMING = "incoming"
OUTGOING = "outgoing"
TANGENTIAL = "tangential"


class GeometryError(ValueError):
    """Raised for points outside the domain or unsupported velocity input."""


class UnboundedRayError(GeometryError):
    """Raised when a backward exit point is requested for an infinite sojourn."""


@dataclass(frozen=True)
class BoundaryPoint:
    """A point of the phase-space boundary with its classification.

    ``side`` is ``"incoming"`` iff ``v . n(x) < 0`` and ``"outgoing"`` iff
    ``v . n(x) > 0``; ``normal`` is the unit outward normal at ``position``.
    """

    position: np.ndarray
    velocity: np.ndarray
    normal: np.ndarray
    side: str


def _as_point(x, dim: int) -> np.ndarray:
    p = np.atleast_1d(np.asarray(x, dtype=float))
    if p.shape != (dim,):
        raise GeometryError(f"expected a point of dimension {dim}, got shape {p.shape}")
    return p


class PhaseSpace:
    """Base class: a convex spatial domain with a velocity specification."""

    dim: int = 0

    def __init__(self):
        # Boundary-membership tolerance, relative to the domain diameter.
        self.boundary_rtol = 1e-9

    # -- geometry ---------------------------------------------------------
    def diameter(self) -> float:
        raise NotImplementedError

    def boundary_tol(self) -> float:
        return self.boundary_rtol * self.diameter()

    def contains(self, x, tol: float = 0.0) -> bool:
        """True iff ``x`` lies in the open domain (enlarged by ``tol``)."""
        raise NotImplementedError

    def outward_normal(self, x) -> np.ndarray:
        """Unit outward normal at a boundary point."""
        raise NotImplementedError

    def max_speed(self) -> float:
        raise NotImplementedError

    def continuum_tau0(self) -> float:
        """Essential infimum of the boundary sojourn time over the full
        outgoing boundary (no tangential cutoff).

        Positive for geometries whose every outgoing state keeps a minimum
        flight time (the *regular* ones: slab, triangle with ``l1 > 0``);
        zero when arbitrarily short chords exist (ball with a full
        direction sphere).  Grid-based estimates converge to this value as
        cutoffs and resolutions refine.
        """
        raise NotImplementedError

    # -- exit-time oracle --------------------------------------------------
    def sojourn_batch(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Vectorised backward exit times for rows of ``X``, ``V``."""
        raise NotImplementedError

    def sojourn_time(self, x, v) -> float:
        """Backward exit time ``t(x, v)``; ``inf`` when the ray never leaves.

        ``x`` must lie in the closure of the domain.  For incoming boundary
        points the result is 0; for outgoing ones it is the full chord time.
        """
        x = _as_point(x, self.dim)
        v = _as_point(v, self.dim)
        if not self.contains(x, tol=self.boundary_tol()):
            raise GeometryError(f"position {x} lies outside the domain closure")
        return float(self.sojourn_batch(x[None, :], v[None, :])[0])

    def backward_exit(self, x, v) -> BoundaryPoint:
        """Trace ``(x, v)`` backwards to its entry point on the boundary."""
        x = _as_point(x, self.dim)
        v = _as_point(v, self.dim)
        t = self.sojourn_time(x, v)
        if not math.isfinite(t):
            raise UnboundedRayError("backward ray never leaves the domain")
        pos = x - t * v
        n = self.outward_normal(pos)
        return BoundaryPoint(position=pos, velocity=v.copy(), normal=n,
                             side=self.classify(pos, v))

    def classify(self, x, v) -> str:
        """Side of the boundary point: sign of ``v . n(x)``."""
        n = self.outward_normal(_as_point(x, self.dim))
        s = float(np.dot(np.atleast_1d(np.asarray(v, dtype=float)), n))
        cut = self.boundary_tol() * max(self.max_speed(), 1.0)
        if s > cut:
            return OUTGOING
        if s < -cut:
            return INCOMING
        return TANGENTIAL


class Slab(PhaseSpace):
    """1D slab ``(-a, a)`` with speeds in a bounded interval.

    The classic transport normalisation is ``speeds = (-1, 1)``; arbitrary
    bounded intervals (possibly one-sided, e.g. ``(0, vmax)``) are accepted
    so that half-range models fit in the same machinery.

    Boundary decomposition: at the wall ``x = -a`` the outward normal is
    ``-1``, so velocities ``xi > 0`` are incoming there and outgoing at
    ``x = +a`` (and symmetrically for ``xi < 0``).
    """

    dim = 1

    def __init__(self, half_width: float, speeds: tuple[float, float] = (-1.0, 1.0)):
        super().__init__()
        if half_width <= 0:
            raise GeometryError("half_width must be positive")
        lo, hi = float(speeds[0]), float(speeds[1])
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise GeometryError("speeds must be a bounded interval (lo, hi) with lo < hi")
        self.half_width = float(half_width)
        self.speeds = (lo, hi)

    def diameter(self) -> float:
        return 2.0 * self.half_width

    def max_speed(self) -> float:
        return max(abs(self.speeds[0]), abs(self.speeds[1]))

    def continuum_tau0(self) -> float:
        # every crossing needs at least the wall-to-wall flight at top speed
        return 2.0 * self.half_width / self.max_speed()

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _as_point(x, 1)
        return bool(abs(x[0]) < self.half_width + tol)

    def outward_normal(self, x) -> np.ndarray:
        x = _as_point(x, 1)
        return np.array([1.0]) if x[0] >= 0.0 else np.array([-1.0])

    def sojourn_batch(self, X, V):
        a = self.half_width
        x = np.asarray(X, dtype=float)[:, 0]
        xi = np.asarray(V, dtype=float)[:, 0]
        t = np.full(x.shape, np.inf)
        pos = xi > 0
        neg = xi < 0
        # Backward ray x - s*xi exits at -a for xi > 0, at +a for xi < 0.
        t[pos] = (x[pos] + a) / xi[pos]
        t[neg] = (a - x[neg]) / (-xi[neg])
        return np.maximum(t, 0.0)


class Ball(PhaseSpace):
    """Open ball of radius ``R`` in dimension 2 or 3.

    Velocities live on a product ``speeds x directions``; a degenerate
    speed interval ``(s, s)`` selects the single-speed (unit-sphere) model.
    """

    dim = 2

    def __init__(self, dim: int, radius: float, speeds: tuple[float, float] = (1.0, 1.0)):
        super().__init__()
        if dim not in (2, 3):
            raise GeometryError("Ball supports dimension 2 or 3")
        if radius <= 0:
            raise GeometryError("radius must be positive")
        lo, hi = float(speeds[0]), float(speeds[1])
        if lo <= 0 or hi < lo:
            raise GeometryError("speed interval must satisfy 0 < lo <= hi")
        self.dim = dim
        self.radius = float(radius)
        self.speeds = (lo, hi)

    def diameter(self) -> float:
        return 2.0 * self.radius

    def max_speed(self) -> float:
        return self.speeds[1]

    def continuum_tau0(self) -> float:
        return 0.0   # grazing chords exist for a full direction sphere

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _as_point(x, self.dim)
        return bool(np.dot(x, x) < (self.radius + tol) ** 2)

    def outward_normal(self, x) -> np.ndarray:
        x = _as_point(x, self.dim)
        r = float(np.linalg.norm(x))
        if r == 0.0:
            raise GeometryError("normal undefined at the centre")
        return x / r

    def sojourn_batch(self, X, V):
        # Positive root of |x - t v|^2 = R^2; the backward ray from an
        # interior point always has exactly one positive root.
        X = np.asarray(X, dtype=float)
        V = np.asarray(V, dtype=float)
        xv = np.einsum("ij,ij->i", X, V)
        vv = np.einsum("ij,ij->i", V, V)
        xx = np.einsum("ij,ij->i", X, X)
        t = np.full(xv.shape, np.inf)
        moving = vv > 0
        disc = xv[moving] ** 2 - vv[moving] * (xx[moving] - self.radius**2)
        t[moving] = (xv[moving] + np.sqrt(np.maximum(disc, 0.0))) / vv[moving]
        return np.maximum(t, 0.0)


class PopulationTriangle(PhaseSpace):
    """Age/cycle-length domain ``{(a, l) : 0 < a < l, l1 < l < l2}``.

    Transport moves at unit speed in the age coordinate only; the velocity
    is the fixed vector ``(1, 0)`` (a Dirac velocity measure).  The incoming
    boundary is the birth edge ``a = 0``, the outgoing boundary the division
    diagonal ``a = l``; the edges ``l = l1`` and ``l = l2`` are tangential.
    """

    dim = 2

    def __init__(self, l1: float, l2: float):
        super().__init__()
        if not (l2 > l1 >= 0):
            raise GeometryError("need l2 > l1 >= 0")
        self.l1 = float(l1)
        self.l2 = float(l2)

    def diameter(self) -> float:
        return math.hypot(self.l2, self.l2 - self.l1)

    def max_speed(self) -> float:
        return 1.0

    def continuum_tau0(self) -> float:
        return self.l1   # division at age l happens after a flight of length l

    def velocity(self) -> np.ndarray:
        return np.array([1.0, 0.0])

    def contains(self, x, tol: float = 0.0) -> bool:
        a, ell = _as_point(x, 2)
        return bool(-tol < a < ell + tol and self.l1 - tol < ell < self.l2 + tol)

    def outward_normal(self, x) -> np.ndarray:
        a, ell = _as_point(x, 2)
        tol = self.boundary_tol()
        # Nearest edge wins; corners resolve to the transport-relevant edges.
        if a <= tol:
            return np.array([-1.0, 0.0])
        if ell - a <= tol:
            return np.array([1.0, -1.0]) / math.sqrt(2.0)
        if abs(ell - self.l1) <= tol:
            return np.array([0.0, -1.0])
        if abs(ell - self.l2) <= tol:
            return np.array([0.0, 1.0])
        raise GeometryError(f"point ({a}, {ell}) is not on the boundary")

    def _check_velocity(self, V):
        V = np.asarray(V, dtype=float)
        if np.any(V[:, 1] != 0.0) or np.any(V[:, 0] <= 0.0):
            raise GeometryError("population transport uses velocities (c, 0) with c > 0")
        return V

    def sojourn_batch(self, X, V):
        V = self._check_velocity(V)
        X = np.asarray(X, dtype=float)
        # Backward motion only decreases age; exit through the birth edge.
        return np.maximum(X[:, 0] / V[:, 0], 0.0)


def regularity_tau0(space: PhaseSpace, outgoing_grid) -> float:
    """Minimum sojourn time over the outgoing trace grid.

    This is the grid estimate of ``ess inf`` of the boundary sojourn time
    over the outgoing boundary.  For the supported geometries the estimate
    converges to the true essential infimum from above under refinement of
    the tangential cutoff: the slab and the triangle attain their infimum at
    grid nodes (top speed, minimum cycle length), while for the ball the
    minimum chord time shrinks towards 0 as near-tangential directions are
    admitted.
    """
    if outgoing_grid.space is not space:
        raise GeometryError("grid was built for a different phase space")
    if outgoing_grid.side != OUTGOING:
        raise GeometryError("regularity_tau0 expects the outgoing trace grid")
    return float(np.min(outgoing_grid.sojourn))


def chord_time(space: PhaseSpace, x, v) -> float:
    """Total flight time of the chord through ``(x, v)``: ``t(x,v) + t(x,-v)``."""
    x = _as_point(x, space.dim)
    v = _as_point(v, space.dim)
    return space.sojourn_time(x, v) + space.sojourn_time(x, -v)
