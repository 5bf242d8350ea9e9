"""Quadrature grids on the phase space and its boundary, and sampled fields.

The interior grid carries weights approximating ``dx dmu(v)``; the trace
grids carry weights approximating the flux measure ``|v . n(x)| dgamma dmu``.
Velocities are treated as a *discrete* measure: the quadrature nodes are the
support, fields are never interpolated in ``v``, and the velocity tables are
generated symmetric under ``v -> -v`` (and, for the slab and the 2-ball,
under the specular reflection maps) so that reflection boundary operators
act as exact node permutations.

Grid construction rules:

* interior positions use midpoint product rules (polar cells for the ball,
  per-length age columns for the population triangle) whose weights are the
  exact cell measures, so total weights sum to the exact domain measure;
* speed nodes use an inclusive uniform lattice with trapezoid weights and
  an even node count: the lattice contains the extreme speeds exactly and
  never contains 0;
* trace nodes drop velocities with ``|v . n| <= tangential_cutoff`` (the
  cutoff defaults to ``1e-3 * max_speed``), so the tangential set carries no
  quadrature weight and every trace node has a strictly positive sojourn.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .phase_space import (
    Ball,
    GeometryError,
    INCOMING,
    OUTGOING,
    PhaseSpace,
    PopulationTriangle,
    Slab,
)


class GridError(ValueError):
    pass


class OutOfHullError(GridError):
    """Raised when an interpolation query leaves the grid hull."""


# ---------------------------------------------------------------------------
# 1D rules
# ---------------------------------------------------------------------------

def midpoint_rule(lo: float, hi: float, n: int):
    """Midpoint nodes and weights on ``[lo, hi]``."""
    if n < 1:
        raise GridError("need at least one cell")
    h = (hi - lo) / n
    nodes = lo + (np.arange(n) + 0.5) * h
    return nodes, np.full(n, h)

def inclusive_rule(lo: float, hi: float, n: int):
    """Inclusive uniform lattice with trapezoid weights.

    Contains both endpoints exactly; with an even ``n`` on a symmetric
    interval it never contains 0.  Sums exactly to ``hi - lo``.
    """
    if n < 2:
        raise GridError("need at least two nodes")
    nodes = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    return nodes, w


# ---------------------------------------------------------------------------
# Layouts: structured index/interpolation helpers per geometry
# ---------------------------------------------------------------------------

class _SlabLayout:
    def __init__(self, x_nodes):
        self.x_nodes = np.asarray(x_nodes)
        self.nx = len(self.x_nodes)

    def interp(self, values, P, kidx):
        """Linear interpolation in x within each velocity block."""
        x = np.asarray(P, dtype=float)[:, 0]
        v2 = values.reshape(-1, self.nx)
        xs = self.x_nodes
        i1 = np.clip(np.searchsorted(xs, x) - 1, 0, self.nx - 2)
        f = np.clip((x - xs[i1]) / (xs[i1 + 1] - xs[i1]), 0.0, 1.0)
        return (1.0 - f) * v2[kidx, i1] + f * v2[kidx, i1 + 1]


class _BallLayout:
    def __init__(self, r_nodes, th_nodes):
        self.r_nodes = np.asarray(r_nodes)
        self.th_nodes = np.asarray(th_nodes)
        self.nr = len(self.r_nodes)
        self.nth = len(self.th_nodes)
        self.block = self.nr * self.nth

    def interp(self, values, P, kidx):
        """Bilinear interpolation in polar (r, theta), periodic in theta."""
        P = np.asarray(P, dtype=float)
        r = np.hypot(P[:, 0], P[:, 1])
        th = np.mod(np.arctan2(P[:, 1], P[:, 0]), 2.0 * math.pi)
        v3 = values.reshape(-1, self.nr, self.nth)
        ir = np.clip(np.searchsorted(self.r_nodes, r) - 1, 0, self.nr - 2)
        fr = np.clip((r - self.r_nodes[ir]) / (self.r_nodes[ir + 1] - self.r_nodes[ir]), 0.0, 1.0)
        dth = 2.0 * math.pi / self.nth
        # theta nodes are (j + 1/2) * dth; wrap the last cell onto the first
        jt = np.floor(th / dth - 0.5).astype(int)
        ft = th / dth - 0.5 - jt
        j1 = np.mod(jt, self.nth)
        j2 = np.mod(jt + 1, self.nth)
        v00 = v3[kidx, ir, j1]
        v01 = v3[kidx, ir, j2]
        v10 = v3[kidx, ir + 1, j1]
        v11 = v3[kidx, ir + 1, j2]
        return ((1 - fr) * ((1 - ft) * v00 + ft * v01)
                + fr * ((1 - ft) * v10 + ft * v11))


class _Ball3Layout:
    def __init__(self, r_nodes, pol_nodes, az_nodes):
        self.r_nodes = np.asarray(r_nodes)
        self.pol_nodes = np.asarray(pol_nodes)
        self.az_nodes = np.asarray(az_nodes)
        self.nr = len(r_nodes)
        self.npol = len(pol_nodes)
        self.naz = len(az_nodes)
        self.block = self.nr * self.npol * self.naz

    def interp(self, values, P, kidx):
        """Trilinear in (r, polar, azimuth); azimuth periodic, rest clamped."""
        P = np.asarray(P, dtype=float)
        r = np.linalg.norm(P, axis=1)
        pol = np.arccos(np.clip(np.where(r > 0, P[:, 2] / np.maximum(r, 1e-300), 1.0), -1, 1))
        az = np.mod(np.arctan2(P[:, 1], P[:, 0]), 2 * math.pi)
        v4 = values.reshape(-1, self.nr, self.npol, self.naz)

        def _axis(nodes, q, periodic=False, period=0.0):
            n = len(nodes)
            if periodic:
                h = period / n
                j = np.floor(q / h - 0.5).astype(int)
                f = q / h - 0.5 - j
                return np.mod(j, n), np.mod(j + 1, n), f
            i = np.clip(np.searchsorted(nodes, q) - 1, 0, n - 2)
            f = np.clip((q - nodes[i]) / (nodes[i + 1] - nodes[i]), 0.0, 1.0)
            return i, i + 1, f

        ir, ir2, fr = _axis(self.r_nodes, r)
        ip, ip2, fp = _axis(self.pol_nodes, pol)
        ia, ia2, fa = _axis(self.az_nodes, az, periodic=True, period=2 * math.pi)
        out = np.zeros(len(P), dtype=values.dtype)
        for wr, jr in ((1 - fr, ir), (fr, ir2)):
            for wp, jp in ((1 - fp, ip), (fp, ip2)):
                for wa, ja in ((1 - fa, ia), (fa, ia2)):
                    out += wr * wp * wa * v4[kidx, jr, jp, ja]
        return out


class _TriangleLayout:
    def __init__(self, ell_nodes, n_age):
        self.ell_nodes = np.asarray(ell_nodes)
        self.n_age = n_age

    def interp(self, values, P, kidx):
        """Linear in age on the per-length column lattice; exact length match."""
        P = np.asarray(P, dtype=float)
        a, ell = P[:, 0], P[:, 1]
        dl = self.ell_nodes[1] - self.ell_nodes[0] if len(self.ell_nodes) > 1 else 1.0
        j = np.clip(np.rint((ell - self.ell_nodes[0]) / dl).astype(int), 0, len(self.ell_nodes) - 1)
        if np.any(np.abs(self.ell_nodes[j] - ell) > 1e-9 * self.ell_nodes[-1]):
            raise OutOfHullError("length coordinate off the column lattice")
        h = self.ell_nodes[j] / self.n_age
        v2 = values.reshape(len(self.ell_nodes), self.n_age)
        q = a / h - 0.5
        i1 = np.clip(np.floor(q).astype(int), 0, self.n_age - 2)
        f = np.clip(q - i1, 0.0, 1.0)
        return (1 - f) * v2[j, i1] + f * v2[j, i1 + 1]


# ---------------------------------------------------------------------------
# Grids and fields
# ---------------------------------------------------------------------------

@dataclass
class PhaseGrid:
    """Interior quadrature grid on ``Omega x V``.

    ``weights`` approximate ``dx dmu(v)``; ``vel_index`` maps each node to a
    row of ``vel_table``.  Immutable after construction.
    """

    space: PhaseSpace
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    vel_table: np.ndarray
    vel_weights: np.ndarray
    vel_index: np.ndarray
    layout: object

    def __len__(self):
        return len(self.weights)

    def interp(self, values, positions, vel_index):
        return self.layout.interp(values, positions, vel_index)

    def sojourn_times(self) -> np.ndarray:
        return self.space.sojourn_batch(self.positions, self.velocities)


@dataclass
class TraceGrid:
    """Boundary quadrature grid on an incoming or outgoing part.

    ``weights = gamma_weights * flux_weights`` where ``flux_weights`` is the
    velocity-quadrature weight times ``|v . n(x)|``; ``sojourn`` caches the
    boundary exit time of every node.
    """

    space: PhaseSpace
    side: str
    positions: np.ndarray
    velocities: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    gamma_weights: np.ndarray
    flux_weights: np.ndarray
    boundary_id: np.ndarray
    boundary_coord: np.ndarray
    vel_table: np.ndarray
    vel_weights: np.ndarray
    vel_index: np.ndarray
    sojourn: np.ndarray
    _locator: object = field(default=None, repr=False)

    def __len__(self):
        return len(self.weights)

    def locate(self, coords, vel_index):
        """Interpolation stencil ``(i1, i2, w1, w2)`` at boundary coordinates."""
        return self._locator(coords, vel_index)


@dataclass
class DensityField:
    grid: PhaseGrid
    values: np.ndarray

    def copy(self):
        return DensityField(self.grid, self.values.copy())


@dataclass
class TraceField:
    grid: TraceGrid
    values: np.ndarray

    def copy(self):
        return TraceField(self.grid, self.values.copy())


def field_from_function(grid, fn) -> DensityField | TraceField:
    """Sample ``fn(x, v)`` (vectorised over rows) on the grid nodes."""
    vals = np.asarray(fn(grid.positions, grid.velocities), dtype=float)
    if isinstance(grid, PhaseGrid):
        return DensityField(grid, vals)
    return TraceField(grid, vals)


def norm_p(f, p: float) -> float:
    """Weighted L^p norm ``(sum_i w_i |f_i|^p)^(1/p)``, ``p >= 1``."""
    if p < 1:
        raise ValueError("norm_p requires p >= 1")
    w = f.grid.weights
    v = np.abs(np.asarray(f.values))
    if p == 1:
        return float(np.dot(w, v))
    return float(np.dot(w, v**p) ** (1.0 / p))


def interpolate(f: DensityField, x, v) -> float:
    """Evaluate a density field off the nodes.

    Multilinear in the spatial lattice coordinates, nearest-node in the
    velocity (velocity grids are discrete measures); exact at grid nodes.
    Raises :class:`OutOfHullError` outside the domain closure.
    """
    space = f.grid.space
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not space.contains(x, tol=space.boundary_tol()):
        raise OutOfHullError(f"position {x} is outside the domain")
    d2 = np.sum((f.grid.vel_table - v[None, :]) ** 2, axis=1)
    k = int(np.argmin(d2))
    return float(f.grid.interp(f.values, x[None, :], np.array([k]))[0])


def write_field_csv(f, path):
    """Serialise a field as one row per node: coordinates, weight, value."""
    grid = f.grid
    d = grid.positions.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i+1}" for i in range(d)] + [f"v{i+1}" for i in range(d)]
                   + ["weight", "value"])
        for i in range(len(grid)):
            row = [*grid.positions[i], *grid.velocities[i], grid.weights[i], f.values[i]]
            w.writerow([f"{c:.17g}" for c in row])


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _slab_velocities(space: Slab, nv: int, cutoff: float, rule: str):
    """Speed lattice for the slab.

    ``"midpoint"`` gives exact per-half flux sums; ``"inclusive"`` places
    nodes at the extreme speeds (so the minimum boundary sojourn is attained
    exactly) at the price of O(h^2) half-range sums.  Both rules need an
    even count, which keeps a symmetric lattice zero-free.
    """
    if nv % 2:
        raise GridError("slab velocity count must be even (keeps the lattice zero-free)")
    if rule not in ("midpoint", "inclusive"):
        raise GridError("speed_rule must be 'midpoint' or 'inclusive'")
    build = midpoint_rule if rule == "midpoint" else inclusive_rule
    nodes, w = build(space.speeds[0], space.speeds[1], nv)
    if space.speeds[0] == -space.speeds[1]:
        # force bitwise antisymmetry so reflections pair weights exactly
        nodes = 0.5 * (nodes - nodes[::-1])
        w = 0.5 * (w + w[::-1])
    keep = np.abs(nodes) > cutoff
    return nodes[keep], w[keep]


def _speed_rule(lo: float, hi: float, n: int, dim: int, rule: str = "midpoint"):
    """Speed nodes/weights for the radial part of a Lebesgue velocity measure."""
    if lo == hi:
        return np.array([lo]), np.array([1.0])   # single-speed (Dirac) model
    if n % 2:
        raise GridError("speed node count must be even")
    build = midpoint_rule if rule == "midpoint" else inclusive_rule
    s, w = build(lo, hi, n)
    if dim == 2:
        return s, w * s          # both rules are exact for the linear factor s
    nodes, _ = midpoint_rule(lo, hi, n)
    edges = np.linspace(lo, hi, n + 1)
    return nodes, np.diff(edges**3) / 3.0


def build_grids(space: PhaseSpace, *, nx: int = 64, nv: int = 32,
                n_boundary: int | None = None, n_dir: int | None = None,
                tangential_cutoff: float | None = None,
                speed_rule: str = "midpoint"):
    """Build the interior grid and both trace grids for a phase space.

    Resolution parameters by geometry:

    ==================  =====================================================
    Slab                ``nx`` spatial cells, ``nv`` speed nodes (even)
    Ball (2D)           ``nx`` radial cells, ``n_boundary`` boundary-angle
                        cells, ``n_dir`` direction angles (even, a multiple
                        of ``n_boundary``), ``nv`` speed nodes
    Ball (3D)           ``nx`` radial cells, ``n_dir`` azimuth count (even;
                        ``n_dir // 2`` polar cells), same split for the
                        boundary sphere, ``nv`` speed nodes
    PopulationTriangle  ``nx`` age cells per column, ``nv`` length columns
    ==================  =====================================================

    Returns ``(phase, trace_in, trace_out)``.
    """
    cutoff = tangential_cutoff if tangential_cutoff is not None else 1e-3 * space.max_speed()
    if cutoff >= space.max_speed():
        raise GridError("tangential cutoff must stay below the maximum speed")
    if isinstance(space, Slab):
        return _build_slab(space, nx, nv, cutoff, speed_rule)
    if isinstance(space, Ball) and space.dim == 2:
        return _build_ball2(space, nx, nv, n_boundary, n_dir, cutoff, speed_rule)
    if isinstance(space, Ball):
        return _build_ball3(space, nx, nv, n_boundary, n_dir, cutoff)
    if isinstance(space, PopulationTriangle):
        return _build_triangle(space, nx, nv)
    raise GridError(f"unsupported phase space {type(space).__name__}")


def _make_trace(space, side, pos, vel, nrm, gamma, fluxw, bid, coord,
                vel_table, vel_weights, vel_index, locator):
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    tg = TraceGrid(
        space=space, side=side, positions=pos, velocities=vel,
        normals=np.asarray(nrm, dtype=float),
        weights=np.asarray(gamma) * np.asarray(fluxw),
        gamma_weights=np.asarray(gamma, dtype=float),
        flux_weights=np.asarray(fluxw, dtype=float),
        boundary_id=np.asarray(bid, dtype=int),
        boundary_coord=np.asarray(coord, dtype=float),
        vel_table=vel_table, vel_weights=vel_weights,
        vel_index=np.asarray(vel_index, dtype=int),
        sojourn=space.sojourn_batch(pos, vel),
    )
    tg._locator = locator(tg)
    return tg


def _slab_locator(tg):
    nvel = len(tg.vel_table)
    node_of = np.full((nvel, 2), -1)        # wall index: 0 -> -a, 1 -> +a
    node_of[tg.vel_index, (tg.boundary_coord > 0).astype(int)] = np.arange(len(tg))

    def locate(coords, kidx):
        wall = (np.asarray(coords) > 0).astype(int)
        i = node_of[np.asarray(kidx, dtype=int), wall]
        if np.any(i < 0):
            raise GridError("no trace node for requested wall/velocity")
        ones = np.ones(len(i))
        return i, i, ones, np.zeros(len(i))

    return locate


def _angle_locator(tg):
    # Per velocity row: the sorted arc of boundary angles carrying nodes.
    by_vel = {}
    for k in np.unique(tg.vel_index):
        sel = np.flatnonzero(tg.vel_index == k)
        order = np.argsort(tg.boundary_coord[sel])
        by_vel[int(k)] = (tg.boundary_coord[sel][order], sel[order])

    def locate(coords, kidx):
        coords = np.mod(np.asarray(coords, dtype=float), 2 * math.pi)
        kidx = np.asarray(kidx, dtype=int)
        n = len(coords)
        i1 = np.empty(n, dtype=int)
        i2 = np.empty(n, dtype=int)
        w1 = np.empty(n)
        for k in np.unique(kidx):
            angles, ids = by_vel.get(int(k), (None, None))
            if angles is None:
                raise GridError("no trace nodes for requested velocity")
            sel = kidx == k
            th = coords[sel]
            j = np.searchsorted(angles, th)
            jl = np.clip(j - 1, 0, len(angles) - 1)
            jr = np.clip(j, 0, len(angles) - 1)
            gap = angles[jr] - angles[jl]
            f = np.where(gap > 0, (th - angles[jl]) / np.where(gap > 0, gap, 1.0), 0.0)
            # Clamp outside the arc (lookups there carry negligible flux).
            f = np.clip(f, 0.0, 1.0)
            i1[sel] = ids[jl]
            i2[sel] = ids[jr]
            w1[sel] = 1.0 - f
        return i1, i2, w1, 1.0 - w1

    return locate


def _column_locator(tg):
    order = np.argsort(tg.boundary_coord)
    coords_sorted = tg.boundary_coord[order]

    def locate(coords, kidx):
        j = np.searchsorted(coords_sorted, np.asarray(coords, dtype=float))
        j = np.clip(j, 0, len(coords_sorted) - 1)
        jm = np.clip(j - 1, 0, len(coords_sorted) - 1)
        pick = np.where(
            np.abs(coords_sorted[jm] - coords) < np.abs(coords_sorted[j] - coords), jm, j)
        i = order[pick]
        ones = np.ones(len(i))
        return i, i, ones, np.zeros(len(i))

    return locate


def _build_slab(space: Slab, nx, nv, cutoff, speed_rule="midpoint"):
    a = space.half_width
    x_nodes, x_w = midpoint_rule(-a, a, nx)
    xi, xi_w = _slab_velocities(space, nv, cutoff, speed_rule)
    m = len(xi)
    layout = _SlabLayout(x_nodes)

    P = np.tile(x_nodes, m)[:, None]
    V = np.repeat(xi, nx)[:, None]
    W = np.repeat(xi_w, nx) * np.tile(x_w, m)
    kidx = np.repeat(np.arange(m), nx)

    phase = PhaseGrid(space, P, V, W, xi[:, None].copy(), xi_w.copy(), kidx, layout)

    def trace(side):
        parts = []
        for wall, xw, nrm in ((0, -a, -1.0), (1, a, 1.0)):
            s = xi * nrm
            keep = s > cutoff if side is OUTGOING else s < -cutoff
            k = np.flatnonzero(keep)
            parts.append((np.full(len(k), xw), xi[k], np.full(len(k), nrm),
                          np.ones(len(k)), np.abs(xi[k]) * xi_w[k],
                          np.full(len(k), wall), np.full(len(k), nrm), k))
        cols = [np.concatenate(c) for c in zip(*parts)]
        xw_, v_, n_, g_, fw_, bid_, coord_, k_ = cols
        return _make_trace(space, side, xw_[:, None], v_[:, None], n_[:, None],
                           g_, fw_, bid_, coord_, phase.vel_table, phase.vel_weights,
                           k_.astype(int), _slab_locator)

    return phase, trace(INCOMING), trace(OUTGOING)


def _build_ball2(space: Ball, nx, nv, n_boundary, n_dir, cutoff, speed_rule="midpoint"):
    R = space.radius
    n_dir = n_dir or 64
    n_boundary = n_boundary or n_dir
    if n_dir % 2 or n_dir % n_boundary:
        raise GridError("need an even direction count divisible by the boundary count")
    r_nodes, dr = midpoint_rule(0.0, R, nx)
    # interior angular cells reuse the boundary angular resolution
    th_nodes, dth = midpoint_rule(0.0, 2 * math.pi, n_boundary)
    speeds, sw = _speed_rule(space.speeds[0], space.speeds[1], nv, dim=2, rule=speed_rule)
    dirs, dw = midpoint_rule(0.0, 2 * math.pi, n_dir)

    vel_table = np.stack([np.outer(speeds, np.cos(dirs)).ravel(),
                          np.outer(speeds, np.sin(dirs)).ravel()], axis=1)
    vel_weights = np.outer(sw, dw).ravel()
    m = len(vel_table)

    layout = _BallLayout(r_nodes, th_nodes)
    rr, tt = np.meshgrid(r_nodes, th_nodes, indexing="ij")
    X = np.stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()], axis=1)
    xw = (np.repeat(r_nodes * dr, len(th_nodes)) * np.tile(dth, len(r_nodes))).ravel()

    P = np.tile(X, (m, 1))
    V = np.repeat(vel_table, len(X), axis=0)
    W = np.repeat(vel_weights, len(X)) * np.tile(xw, m)
    kidx = np.repeat(np.arange(m), len(X))
    phase = PhaseGrid(space, P, V, W, vel_table, vel_weights, kidx, layout)

    phis, _ = midpoint_rule(0.0, 2 * math.pi, n_boundary)
    gam = R * 2 * math.pi / n_boundary
    bpos = R * np.stack([np.cos(phis), np.sin(phis)], axis=1)
    nrm = bpos / R

    def trace(side):
        sgn = np.einsum("bj,kj->bk", nrm, vel_table)   # v.n per (boundary, velocity)
        mask = sgn > cutoff if side is OUTGOING else sgn < -cutoff
        b, k = np.nonzero(mask)
        return _make_trace(space, side, bpos[b], vel_table[k], nrm[b],
                           np.full(len(b), gam), np.abs(sgn[b, k]) * vel_weights[k],
                           b, phis[b], vel_table, vel_weights, k, _angle_locator)

    return phase, trace(INCOMING), trace(OUTGOING)


def _build_ball3(space: Ball, nx, nv, n_boundary, n_dir, cutoff):
    R = space.radius
    n_dir = n_dir or 16
    if n_dir % 2:
        raise GridError("azimuth count must be even")
    npol = max(n_dir // 2, 2)
    r_nodes, _ = midpoint_rule(0.0, R, nx)
    r_edges = np.linspace(0.0, R, nx + 1)
    rw = np.diff(r_edges**3) / 3.0
    pol_nodes, _ = midpoint_rule(0.0, math.pi, npol)
    pol_w = -np.diff(np.cos(np.linspace(0.0, math.pi, npol + 1)))
    az_nodes, az_w = midpoint_rule(0.0, 2 * math.pi, n_dir)

    speeds, sw = _speed_rule(space.speeds[0], space.speeds[1], nv, dim=3)

    def sph(pol, az):
        sp = np.sin(pol)
        return np.stack([sp * np.cos(az), sp * np.sin(az), np.cos(pol)], axis=-1)

    pp, aa = np.meshgrid(pol_nodes, az_nodes, indexing="ij")
    dir_vecs = sph(pp.ravel(), aa.ravel())
    dir_w = (pol_w[:, None] * az_w[None, :]).ravel()
    vel_table = (speeds[:, None, None] * dir_vecs[None, :, :]).reshape(-1, 3)
    vel_weights = np.outer(sw, dir_w).ravel()
    m = len(vel_table)

    layout = _Ball3Layout(r_nodes, pol_nodes, az_nodes)
    rr = np.repeat(r_nodes, npol * n_dir)
    pw = np.repeat(pol_nodes, n_dir)
    aw = np.tile(az_nodes, npol)
    X = rr[:, None] * np.tile(sph(pw, aw), (nx, 1))
    xw = (rw[:, None] * (pol_w[:, None] * az_w[None, :]).ravel()[None, :]).ravel()

    P = np.tile(X, (m, 1))
    V = np.repeat(vel_table, len(X), axis=0)
    W = np.repeat(vel_weights, len(X)) * np.tile(xw, m)
    kidx = np.repeat(np.arange(m), len(X))
    phase = PhaseGrid(space, P, V, W, vel_table, vel_weights, kidx, layout)

    nb_pol, nb_az = npol, n_dir
    bp, ba = np.meshgrid(midpoint_rule(0, math.pi, nb_pol)[0],
                         midpoint_rule(0, 2 * math.pi, nb_az)[0], indexing="ij")
    nrm = sph(bp.ravel(), ba.ravel())
    bpos = R * nrm
    gam = R**2 * (-np.diff(np.cos(np.linspace(0, math.pi, nb_pol + 1)))[:, None]
                  * np.full((1, nb_az), 2 * math.pi / nb_az)).ravel()
    # boundary coordinate: flattened (polar, azimuth) cell index
    bcoord = np.arange(len(bpos)).astype(float)

    def trace(side):
        sgn = nrm @ vel_table.T
        mask = sgn > cutoff if side is OUTGOING else sgn < -cutoff
        b, k = np.nonzero(mask)
        return _make_trace(space, side, bpos[b], vel_table[k], nrm[b],
                           gam[b], np.abs(sgn[b, k]) * vel_weights[k],
                           b, bcoord[b], vel_table, vel_weights, k, _nearest3_locator)

    return phase, trace(INCOMING), trace(OUTGOING)


def _nearest3_locator(tg):
    # Nearest-node lookup on the sphere, per velocity (3D trace lookups are
    # only used by the time-marching engine; the billiard engine is exact).
    by_vel = {}
    for k in np.unique(tg.vel_index):
        sel = np.flatnonzero(tg.vel_index == k)
        by_vel[int(k)] = (tg.positions[sel], sel)

    def locate(coords, kidx):
        # here "coords" are full positions (n, 3)
        pts = np.asarray(coords, dtype=float)
        kidx = np.asarray(kidx, dtype=int)
        i = np.empty(len(pts), dtype=int)
        for k in np.unique(kidx):
            P, ids = by_vel[int(k)]
            sel = np.flatnonzero(kidx == k)
            d = np.linalg.norm(pts[sel][:, None, :] - P[None, :, :], axis=2)
            i[sel] = ids[np.argmin(d, axis=1)]
        ones = np.ones(len(i))
        return i, i, ones, np.zeros(len(i))

    return locate


def _build_triangle(space: PopulationTriangle, n_age, n_length):
    l1, l2 = space.l1, space.l2
    ell, dl = midpoint_rule(l1, l2, n_length)
    na = n_age
    layout = _TriangleLayout(ell, na)

    P = np.concatenate([
        np.stack([(np.arange(na) + 0.5) * (lj / na), np.full(na, lj)], axis=1)
        for lj in ell])
    W = np.concatenate([np.full(na, (lj / na) * dl[j]) for j, lj in enumerate(ell)])
    V = np.tile(space.velocity(), (len(P), 1))
    vel_table = space.velocity()[None, :]
    phase = PhaseGrid(space, P, V, W, vel_table, np.array([1.0]),
                      np.zeros(len(P), dtype=int), layout)

    nl = len(ell)
    sq2 = math.sqrt(2.0)
    tin = _make_trace(space, INCOMING,
                      np.stack([np.zeros(nl), ell], axis=1),
                      np.tile(space.velocity(), (nl, 1)),
                      np.tile([-1.0, 0.0], (nl, 1)),
                      dl, np.ones(nl), np.arange(nl), ell,
                      vel_table, np.array([1.0]), np.zeros(nl, dtype=int),
                      _column_locator)
    tout = _make_trace(space, OUTGOING,
                       np.stack([ell, ell], axis=1),
                       np.tile(space.velocity(), (nl, 1)),
                       np.tile([1.0 / sq2, -1.0 / sq2], (nl, 1)),
                       dl * sq2, np.full(nl, 1.0 / sq2), np.arange(nl), ell,
                       vel_table, np.array([1.0]), np.zeros(nl, dtype=int),
                       _column_locator)
    return phase, tin, tout


# ---------------------------------------------------------------------------
# Exit stencils shared by the transport engines and the resolvent operators
# ---------------------------------------------------------------------------

@dataclass
class ExitStencil:
    """Backward-exit lookup into the incoming trace grid.

    For every source node: flight time ``tau`` to the incoming boundary and
    an interpolation stencil ``(i1, i2, w1, w2)`` into the incoming grid at
    the exit point (exact index pairs on the slab/triangle, angular blend on
    the ball).
    """

    tau: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def gather(self, values: np.ndarray) -> np.ndarray:
        return self.w1 * values[..., self.i1] + self.w2 * values[..., self.i2]


def _exit_coords(space, exit_pos):
    if isinstance(space, Slab):
        return np.where(exit_pos[:, 0] > 0, 1.0, -1.0)
    if isinstance(space, Ball) and space.dim == 2:
        return np.mod(np.arctan2(exit_pos[:, 1], exit_pos[:, 0]), 2 * math.pi)
    if isinstance(space, Ball):
        return exit_pos          # 3D locator works on raw positions
    if isinstance(space, PopulationTriangle):
        return exit_pos[:, 1]
    raise GridError("unsupported space")


def make_exit_stencil(positions, velocities, vel_index, space, trace_in) -> ExitStencil:
    tau = space.sojourn_batch(positions, velocities)
    if np.any(~np.isfinite(tau)):
        raise GridError("grid contains nodes with infinite sojourn time")
    exit_pos = positions - tau[:, None] * velocities
    i1, i2, w1, w2 = trace_in.locate(_exit_coords(space, exit_pos), vel_index)
    return ExitStencil(tau=tau, i1=i1, i2=i2, w1=w1, w2=w2)


def exit_stencil_for_grid(grid, trace_in) -> ExitStencil:
    return make_exit_stencil(grid.positions, grid.velocities, grid.vel_index,
                             grid.space, trace_in)
