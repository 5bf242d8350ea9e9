"""Boundary operators from outgoing to incoming traces, and their norms.

An operator ``H`` maps a field on the outgoing trace grid to a field on the
incoming one.  Implemented families:

* ``ZeroOperator`` -- absorbing wall;
* ``PairingOperator`` -- pointwise velocity remaps (specular reflection,
  bounce-back, transmission of the outgoing trace to the paired incoming
  node), optionally scaled by a constant or a function of the wall point.
  These are built as exact node permutations and are therefore exactly
  norm-preserving when unscaled;
* ``DiffuseOperator`` -- re-emission kernels local in the wall point,
  ``(Hg)(x,v) = sum_{v'} h(x,v,v') g(x,v') |v'.n| w_{v'}``;
* ``NonlocalKernelOperator`` -- dense kernels coupling all outgoing nodes,
  as in cell-population birth laws;
* ``SumOperator`` -- convex mixtures, e.g. scaled reflection plus a diffuse
  part (the classical wall model).

Norm estimation: for ``p = 1`` the operator norm of a kernel with fixed
sign is the exact maximum over source nodes of the weighted column mass;
for ``p = 2`` a power iteration on ``H* H`` with the weighted inner
products; for other ``p`` only a sampled lower bound is offered.

The truncation ``chi_eps`` zeroes the input on outgoing nodes with sojourn
time above ``eps``; sweeping ``eps`` and extrapolating the norm profile to
``eps -> 0`` evaluates the generation criterion
``limsup_{eps -> 0} ||H chi_eps|| < 1`` and the largest contraction scale
``eps0 = sup{eps : ||H chi_eps|| < 1}``, which bounds the semigroup growth
exponent by ``max(0, ln||H|| / eps0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretization import TraceGrid
from .phase_space import Ball, PopulationTriangle, Slab


class OperatorError(ValueError):
    pass


class PowerIterationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Operator classes
# ---------------------------------------------------------------------------

class BoundaryOperator:
    """Base class: linear map from outgoing-trace values to incoming ones."""

    kind = "abstract"
    nonnegative = True     # entrywise sign, used by exact L1 column sums

    def __init__(self, in_grid: TraceGrid, out_grid: TraceGrid):
        if in_grid.side != "incoming" or out_grid.side != "outgoing":
            raise OperatorError("operator needs (incoming, outgoing) trace grids")
        self.in_grid = in_grid
        self.out_grid = out_grid

    def apply(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint_apply(self, f: np.ndarray) -> np.ndarray:
        """Adjoint with respect to the weighted L2 pairings."""
        raise NotImplementedError

    def column_masses(self) -> np.ndarray:
        """Per outgoing node j: ``sum_i w_i |A_ij| / w'_j`` (exact L1 columns)."""
        raise NotImplementedError

    def dense_matrix(self) -> np.ndarray:
        """The (n_in, n_out) action matrix on raw value vectors."""
        raise NotImplementedError

    def _check(self, g):
        g = np.asarray(g)
        if g.shape[-1] != len(self.out_grid):
            raise OperatorError("trace values do not match the outgoing grid")
        return g


def apply(H: BoundaryOperator, g):
    """Apply a boundary operator to a trace field or raw value array."""
    from .discretization import TraceField
    if isinstance(g, TraceField):
        if g.grid is not H.out_grid:
            raise OperatorError("field lives on a different outgoing grid")
        return TraceField(H.in_grid, H.apply(g.values))
    return H.apply(g)


class ZeroOperator(BoundaryOperator):
    kind = "zero"

    def apply(self, g):
        g = self._check(g)
        return np.zeros(g.shape[:-1] + (len(self.in_grid),), dtype=g.dtype)

    def adjoint_apply(self, f):
        return np.zeros(f.shape[:-1] + (len(self.out_grid),), dtype=f.dtype)

    def column_masses(self):
        return np.zeros(len(self.out_grid))

    def dense_matrix(self):
        return np.zeros((len(self.in_grid), len(self.out_grid)))


class PairingOperator(BoundaryOperator):
    """``(Hg)_i = scale_i * g[source_i]`` for an exact node pairing."""

    def __init__(self, in_grid, out_grid, source, scale, kind="pairing"):
        super().__init__(in_grid, out_grid)
        self.kind = kind
        self.source = np.asarray(source, dtype=int)
        scale = np.asarray(scale, dtype=float)
        self.scale = np.broadcast_to(scale, (len(in_grid),)).copy()
        self.nonnegative = bool(np.all(self.scale >= 0))
        counts = np.bincount(self.source, minlength=len(out_grid))
        self.is_bijection = bool(np.all(counts == 1))
        wi = in_grid.weights
        wo = out_grid.weights[self.source]
        self.weight_preserving = self.is_bijection and bool(
            np.allclose(wi, wo, rtol=1e-12, atol=0.0))

    def apply(self, g):
        g = self._check(g)
        return self.scale * g[..., self.source]

    def adjoint_apply(self, f):
        f = np.asarray(f)
        out = np.zeros(len(self.out_grid), dtype=f.dtype)
        np.add.at(out, self.source, np.conj(self.scale) * self.in_grid.weights * f)
        return out / self.out_grid.weights

    def column_masses(self):
        cm = np.zeros(len(self.out_grid))
        np.add.at(cm, self.source, self.in_grid.weights * np.abs(self.scale))
        return cm / self.out_grid.weights

    def dense_matrix(self):
        A = np.zeros((len(self.in_grid), len(self.out_grid)))
        A[np.arange(len(self.in_grid)), self.source] = self.scale
        return A


def _table_lookup(vel_table, targets, label):
    """Nearest-row search in the velocity table; error when not exact."""
    tol = 1e-9 * max(float(np.max(np.abs(vel_table))), 1.0)
    idx = np.empty(len(targets), dtype=int)
    step = max(1, 2_000_000 // max(len(vel_table), 1))
    for s in range(0, len(targets), step):
        chunk = targets[s:s + step]
        d = np.max(np.abs(chunk[:, None, :] - vel_table[None, :, :]), axis=2)
        j = np.argmin(d, axis=1)
        if np.any(d[np.arange(len(chunk)), j] > tol):
            raise OperatorError(
                f"{label}: mapped velocity is not on the grid "
                "(the velocity table is not closed under this reflection)")
        idx[s:s + step] = j
    return idx


def _match_nodes(in_grid, out_grid, target_velocity, target_coord, label,
                 target_vel_index=None):
    """Find, for every incoming node, the outgoing node with the given
    velocity and boundary coordinate; raise if any match is not exact."""
    if target_vel_index is None:
        target_vel_index = _table_lookup(out_grid.vel_table,
                                         np.asarray(target_velocity, dtype=float),
                                         label)
    kmap = {}
    coords = np.round(out_grid.boundary_coord, 12)
    for j in range(len(out_grid)):
        kmap.setdefault((int(out_grid.vel_index[j]), coords[j]), j)
    source = np.empty(len(in_grid), dtype=int)
    tc = np.round(np.asarray(target_coord, dtype=float), 12)
    for i in range(len(in_grid)):
        key = (int(target_vel_index[i]), tc[i])
        if key not in kmap:
            raise OperatorError(f"{label}: no outgoing node at coordinate "
                                f"{target_coord[i]} with the mapped velocity")
        source[i] = kmap[key]
    return source


def _scale_values(scale, positions):
    if callable(scale):
        return np.asarray([scale(x) for x in positions], dtype=float)
    return float(scale)


def specular_reflection(in_grid, out_grid, scale=1.0) -> PairingOperator:
    """Reflection across the tangent plane: reads ``g(x, v - 2 (v.n) n)``."""
    space = in_grid.space
    if isinstance(space, Ball) and space.dim == 3:
        raise OperatorError("no reflection-closed direction grid exists on the "
                            "3-ball; use bounce_back or a 2D ball")
    v = in_grid.velocities
    n = in_grid.normals
    tv = v - 2.0 * np.sum(v * n, axis=1, keepdims=True) * n
    src = _match_nodes(in_grid, out_grid, tv, in_grid.boundary_coord, "specular")
    op = PairingOperator(in_grid, out_grid, src,
                         _scale_values(scale, in_grid.positions), kind="specular")
    op.scale_spec = scale
    return op


def bounce_back(in_grid, out_grid, scale=1.0) -> PairingOperator:
    """Velocity reversal: reads ``g(x, -v)``; needs a symmetric velocity set."""
    src = _match_nodes(in_grid, out_grid, -in_grid.velocities,
                       in_grid.boundary_coord, "bounce-back")
    op = PairingOperator(in_grid, out_grid, src,
                         _scale_values(scale, in_grid.positions), kind="bounce-back")
    op.scale_spec = scale
    return op


def transmission(in_grid, out_grid, scale=1.0) -> PairingOperator:
    """Feed each incoming node from the outgoing node with the same velocity.

    On the slab this pairs opposite walls (a periodic-type condition); on
    the population triangle it pairs the division point ``(l, l)`` with the
    birth point ``(0, l)``.
    """
    space = in_grid.space
    if isinstance(space, Slab):
        coord = -in_grid.boundary_coord       # the opposite wall
    elif isinstance(space, PopulationTriangle):
        coord = in_grid.boundary_coord        # same cycle length
    else:
        raise OperatorError("transmission pairing is defined for slab/triangle")
    src = _match_nodes(in_grid, out_grid, in_grid.velocities, coord, "transmission",
                       target_vel_index=in_grid.vel_index)
    op = PairingOperator(in_grid, out_grid, src,
                         _scale_values(scale, in_grid.positions), kind="transmission")
    op.scale_spec = scale
    return op


class DiffuseOperator(BoundaryOperator):
    """Wall-local re-emission kernel.

    ``(Hg)(x, v) = sum_{v' outgoing at x} h(x, v, v') g(x, v') |v'.n| w_{v'}``.
    The kernel values are stored per wall block so the criterion evaluators
    can form q-powered column integrals without the flux weights baked in.
    """

    kind = "diffuse"

    def __init__(self, in_grid, out_grid, kernel, normalization="none", scale=1.0):
        super().__init__(in_grid, out_grid)
        self.blocks = []           # (in_idx, out_idx, h_values, matrix)
        bids = np.unique(np.concatenate([in_grid.boundary_id, out_grid.boundary_id]))
        nonneg = True
        for b in bids:
            ii = np.flatnonzero(in_grid.boundary_id == b)
            jj = np.flatnonzero(out_grid.boundary_id == b)
            if len(ii) == 0 or len(jj) == 0:
                continue
            x = in_grid.positions[ii[0]]
            h = np.asarray(kernel(x, in_grid.velocities[ii], out_grid.velocities[jj]),
                           dtype=float)
            if h.shape != (len(ii), len(jj)):
                raise OperatorError("kernel callable must return an (n_in, n_out) block")
            if normalization == "grid":
                # make each column stochastic in the incoming flux measure
                cm = in_grid.flux_weights[ii] @ np.abs(h)
                h = h / np.where(cm > 0, cm, 1.0)[None, :]
            h = scale * h
            nonneg = nonneg and bool(np.all(h >= 0))
            A = h * out_grid.flux_weights[jj][None, :]
            self.blocks.append((ii, jj, h, A))
        self.nonnegative = nonneg

    def apply(self, g):
        g = self._check(g)
        out = np.zeros(g.shape[:-1] + (len(self.in_grid),), dtype=g.dtype)
        for ii, jj, _, A in self.blocks:
            out[..., ii] = g[..., jj] @ A.T
        return out

    def adjoint_apply(self, f):
        out = np.zeros(f.shape[:-1] + (len(self.out_grid),), dtype=f.dtype)
        wi = self.in_grid.weights
        wo = self.out_grid.weights
        for ii, jj, _, A in self.blocks:
            out[..., jj] = (f[..., ii] * wi[ii]) @ np.conj(A) / wo[jj]
        return out

    def column_masses(self):
        cm = np.zeros(len(self.out_grid))
        wi = self.in_grid.weights
        wo = self.out_grid.weights
        for ii, jj, _, A in self.blocks:
            cm[jj] = wi[ii] @ np.abs(A) / wo[jj]
        return cm

    def dense_matrix(self):
        M = np.zeros((len(self.in_grid), len(self.out_grid)))
        for ii, jj, _, A in self.blocks:
            M[np.ix_(ii, jj)] = A
        return M


def wall_maxwellian(theta0: float, dim: int):
    """Gaussian wall distribution ``(2 pi theta0)^(-dim/2) exp(-|v|^2/(2 theta0))``."""
    c = (2.0 * math.pi * theta0) ** (-dim / 2.0)

    def m(v):
        v = np.asarray(v, dtype=float)
        return c * np.exp(-np.sum(v * v, axis=-1) / (2.0 * theta0))

    return m


def maxwellian_half_flux(theta0: float) -> float:
    """Exact flux ``int_{u<0} |u| M(u) du`` of the 1D wall Gaussian: sqrt(theta0/2pi)."""
    return math.sqrt(theta0 / (2.0 * math.pi))


def maxwell_diffuse(in_grid, out_grid, theta0=1.0, normalization="none", scale=1.0):
    """Diffuse re-emission with the wall Gaussian ``h(x, v, v') = M(v)``.

    ``normalization="none"`` uses the raw Gaussian (half-flux about 0.3989
    at ``theta0 = 1``); ``"flux"`` divides by the exact continuum half-flux
    so the re-emitted flux balances the incoming one; ``"grid"`` makes every
    column exactly stochastic on the discrete grid.
    """
    m = wall_maxwellian(theta0, in_grid.space.dim)
    if normalization == "flux":
        scale = scale / maxwellian_half_flux(theta0)
        normalization = "none"
    elif normalization not in ("none", "grid"):
        raise OperatorError("normalization must be 'none', 'flux' or 'grid'")

    def kernel(x, vin, vout):
        return np.repeat(m(vin)[:, None], len(vout), axis=1)

    return DiffuseOperator(in_grid, out_grid, kernel,
                           normalization=normalization, scale=scale)


class NonlocalKernelOperator(BoundaryOperator):
    """Dense coupling of all outgoing nodes: ``(Hg)_i = sum_j K_ij g_j w'_j``."""

    kind = "nonlocal-kernel"

    def __init__(self, in_grid, out_grid, kernel):
        super().__init__(in_grid, out_grid)
        K = np.asarray(kernel(in_grid, out_grid), dtype=float) \
            if callable(kernel) else np.asarray(kernel, dtype=float)
        if K.shape != (len(in_grid), len(out_grid)):
            raise OperatorError("kernel must have shape (n_in, n_out)")
        self.kernel_values = K
        self.matrix = K * out_grid.weights[None, :]
        self.nonnegative = bool(np.all(K >= 0))

    def apply(self, g):
        g = self._check(g)
        return g @ self.matrix.T

    def adjoint_apply(self, f):
        return (f * self.in_grid.weights) @ np.conj(self.matrix) / self.out_grid.weights

    def column_masses(self):
        return self.in_grid.weights @ np.abs(self.matrix) / self.out_grid.weights

    def dense_matrix(self):
        return self.matrix.copy()


class SumOperator(BoundaryOperator):
    """Sum of boundary operators on common grids (e.g. wall model mixtures)."""

    kind = "sum"

    def __init__(self, parts, kind="sum"):
        if not parts:
            raise OperatorError("need at least one part")
        super().__init__(parts[0].in_grid, parts[0].out_grid)
        for p in parts[1:]:
            if p.in_grid is not self.in_grid or p.out_grid is not self.out_grid:
                raise OperatorError("parts must share trace grids")
        self.parts = list(parts)
        self.kind = kind
        self.nonnegative = all(p.nonnegative for p in parts)

    def apply(self, g):
        out = self.parts[0].apply(g)
        for p in self.parts[1:]:
            out = out + p.apply(g)
        return out

    def adjoint_apply(self, f):
        out = self.parts[0].adjoint_apply(f)
        for p in self.parts[1:]:
            out = out + p.adjoint_apply(f)
        return out

    def column_masses(self):
        # exact when every part is entrywise nonnegative, an upper bound else
        cm = self.parts[0].column_masses()
        for p in self.parts[1:]:
            cm = cm + p.column_masses()
        return cm

    def dense_matrix(self):
        return sum(p.dense_matrix() for p in self.parts)


def maxwell_mix(in_grid, out_grid, alpha, theta0=1.0, reflection="specular",
                diffuse_scale=None, normalization="none") -> SumOperator:
    """Wall model: fraction ``alpha(x)`` reflected, the rest re-emitted
    diffusely with the wall Gaussian.  ``diffuse_scale`` defaults to
    ``1 - alpha`` pointwise when ``alpha`` is constant."""
    refl = specular_reflection if reflection == "specular" else bounce_back
    r = refl(in_grid, out_grid, scale=alpha)
    if diffuse_scale is None:
        if callable(alpha):
            raise OperatorError("pass diffuse_scale explicitly for variable alpha")
        diffuse_scale = 1.0 - float(alpha)
    d = maxwell_diffuse(in_grid, out_grid, theta0=theta0,
                        normalization=normalization, scale=diffuse_scale)
    return SumOperator([r, d], kind="maxwell-mix")


class InputScaledOperator(BoundaryOperator):
    """Composition ``H o D`` with a diagonal multiplier on the outgoing trace.

    Covers both the sojourn truncation ``chi_eps`` (0/1 diagonal) and the
    sojourn damping ``M_q`` (diagonal ``q^{min(tau, k)}``).
    """

    def __init__(self, base: BoundaryOperator, diagonal, kind=None):
        super().__init__(base.in_grid, base.out_grid)
        self.base = base
        self.diagonal = np.broadcast_to(np.asarray(diagonal, dtype=float),
                                        (len(base.out_grid),)).copy()
        self.kind = kind or f"{base.kind}*diag"
        self.nonnegative = base.nonnegative and bool(np.all(self.diagonal >= 0))

    def apply(self, g):
        return self.base.apply(self._check(g) * self.diagonal)

    def adjoint_apply(self, f):
        return self.diagonal * self.base.adjoint_apply(f)

    def column_masses(self):
        return self.base.column_masses() * np.abs(self.diagonal)

    def dense_matrix(self):
        return self.base.dense_matrix() * self.diagonal[None, :]


@dataclass(frozen=True)
class TruncationMask:
    """Indicator of the outgoing states with sojourn time at most ``eps``."""

    eps: float
    mask: np.ndarray

    @staticmethod
    def build(out_grid: TraceGrid, eps: float) -> "TruncationMask":
        if eps <= 0:
            raise OperatorError("eps must be positive")
        return TruncationMask(eps=float(eps), mask=out_grid.sojourn <= eps)


def truncate(H: BoundaryOperator, eps: float) -> InputScaledOperator:
    """Compose ``H`` with the sojourn truncation: input zeroed where tau > eps."""
    tm = TruncationMask.build(H.out_grid, eps)
    op = InputScaledOperator(H, tm.mask.astype(float), kind=f"{H.kind}*chi")
    op.truncation = tm
    return op


def sojourn_damping(H: BoundaryOperator, q: float, k_cap: float) -> InputScaledOperator:
    """Compose ``H`` with the multiplier ``q^{min(tau, k_cap)}`` on the input."""
    if not 0.0 < q < 1.0:
        raise OperatorError("q must lie in (0, 1)")
    tau_k = np.minimum(H.out_grid.sojourn, k_cap)
    op = InputScaledOperator(H, q**tau_k, kind=f"{H.kind}*Mq")
    op.q = q
    op.k_cap = k_cap
    return op


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def _weighted_norm(grid, v, p):
    v = np.abs(v)
    if p == 1:
        return float(np.dot(grid.weights, v))
    return float(np.dot(grid.weights, v**p) ** (1.0 / p))


def operator_norm(H: BoundaryOperator, p: float, *, tol: float = 1e-8,
                  max_iter: int = 500, rng=None) -> float:
    """Operator norm of ``H`` from the weighted L^p_out to L^p_in space.

    ``p = 1``: exact maximum weighted column mass (requires an entrywise
    sign, which every implemented family with nonnegative data has).
    ``p = 2``: power iteration on ``H* H`` to relative tolerance ``tol``;
    raises :class:`PowerIterationError` if the iteration cap is hit.
    Other ``p``: use :func:`sampled_norm_lower_bound`.
    """
    if p == 1:
        if not H.nonnegative:
            raise OperatorError("exact p=1 norm implemented for sign-definite "
                                "operators; use sampled_norm_lower_bound")
        cm = H.column_masses()
        return float(cm.max()) if len(cm) else 0.0
    if p == 2:
        n_in, n_out = len(H.in_grid), len(H.out_grid)
        if n_in == 0 or n_out == 0:
            return 0.0
        if n_in * n_out <= 4_000_000:
            # exact: singular values of the matrix between the weighted spaces
            A = H.dense_matrix()
            A = np.sqrt(H.in_grid.weights)[:, None] * A / np.sqrt(H.out_grid.weights)[None, :]
            return float(np.linalg.svd(A, compute_uv=False)[0]) if A.size else 0.0
        rng = rng or np.random.default_rng(0)
        g = rng.standard_normal(len(H.out_grid))
        sigma = 0.0
        for _ in range(max_iter):
            f = H.apply(g)
            nf = _weighted_norm(H.in_grid, f, 2)
            ng = _weighted_norm(H.out_grid, g, 2)
            if nf == 0.0 or ng == 0.0:
                return 0.0
            new = nf / ng
            g2 = H.adjoint_apply(f)
            n2 = _weighted_norm(H.out_grid, g2, 2)
            if n2 == 0.0:
                return new
            g = g2 / n2
            if abs(new - sigma) <= tol * max(new, 1e-300):
                return new
            sigma = new
        raise PowerIterationError(f"power iteration did not converge in {max_iter} steps")
    raise OperatorError("exact norms implemented for p in {1, 2}; "
                        "use sampled_norm_lower_bound for general p")


def sampled_norm_lower_bound(H: BoundaryOperator, p: float, *, samples: int = 200,
                             rng=None) -> float:
    """Certified lower bound on ``||H||_p`` from random normalised inputs."""
    rng = rng or np.random.default_rng(0)
    best = 0.0
    for _ in range(samples):
        g = rng.standard_normal(len(H.out_grid))
        ng = _weighted_norm(H.out_grid, g, p)
        if ng == 0.0:
            continue
        best = max(best, _weighted_norm(H.in_grid, H.apply(g), p) / ng)
    return best


# ---------------------------------------------------------------------------
# Criterion evaluators
# ---------------------------------------------------------------------------

def extrapolate_to_zero(eps: np.ndarray, values: np.ndarray, n_fit: int = 4) -> float:
    """Extrapolate a profile to ``eps -> 0`` by a linear fit on the smallest
    sweep points (clipped below at 0); falls back to the smallest value when
    the profile is flat."""
    order = np.argsort(eps)
    e = np.asarray(eps)[order][:n_fit]
    v = np.asarray(values)[order][:n_fit]
    if len(e) == 1 or np.allclose(v, v[0]):
        return float(v[0])
    slope, intercept = np.polyfit(e, v, 1)
    return float(max(intercept, 0.0))


def eps_sweep(out_grid: TraceGrid, n_eps: int = 20) -> np.ndarray:
    """Geometric sweep from the largest grid sojourn down to the smallest."""
    tau = out_grid.sojourn
    lo, hi = float(tau.min()), float(tau.max())
    if hi <= lo:
        return np.array([hi])
    return np.geomspace(lo, hi, n_eps)


@dataclass
class CriterionResult:
    """Outcome of the truncated-norm sweep for one operator.

    ``epsilon0`` is the largest truncation scale with ``||H chi_eps|| < 1``
    (``inf`` for global contractions; 0 when the operator stays >= 1 down
    to a cutoff-limited sojourn floor); ``holds`` is the generation verdict:
    on a regular geometry (positive ``continuum_tau0``) the small-sojourn
    limit is genuinely 0, otherwise the extrapolated resolved profile must
    stay below 1.
    """

    epsilon0: float
    profile: list
    holds: bool
    small_eps_limit: float
    full_norm: float
    p: float

    @property
    def growth_exponent(self) -> float:
        if self.full_norm <= 1.0 or math.isinf(self.epsilon0):
            return 0.0
        if self.epsilon0 == 0.0:
            return math.inf
        return max(0.0, math.log(self.full_norm) / self.epsilon0)


def criterion_epsilon0(H: BoundaryOperator, p: float = 1, *, n_eps: int = 20,
                       refine_iters: int = 60, workers: int = 1) -> CriterionResult:
    """Sweep ``||H chi_eps||`` over the resolved sojourn range and locate
    the contraction threshold.

    The profile is monotone nondecreasing in ``eps`` and is a step function
    on a fixed grid, so the threshold between the last sweep point below 1
    and the first at or above 1 is pinned by bisection.  When even the
    smallest resolved ``eps`` gives a norm >= 1 the threshold lies at the
    grid's sojourn floor: that floor converges to the geometric minimum
    flight time on a regular phase space (reported as ``epsilon0``) but is
    a tangential-cutoff artifact on a non-regular one (``epsilon0 = 0``,
    criterion fails).
    """
    sweep = eps_sweep(H.out_grid, n_eps)

    def norm_at(e):
        return operator_norm(truncate(H, e), p)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(norm_at, sweep))
    else:
        vals = [norm_at(e) for e in sweep]
    profile = list(zip(sweep.tolist(), vals))
    full = operator_norm(H, p)
    regular = H.out_grid.space.continuum_tau0() > 0.0
    limit = 0.0 if regular else extrapolate_to_zero(sweep, np.array(vals))
    holds = limit < 1.0

    tau_floor = float(H.out_grid.sojourn.min())
    if full < 1.0:
        eps0 = math.inf
    elif vals[0] >= 1.0:
        eps0 = tau_floor if regular else 0.0
    else:
        below = max(i for i, v in enumerate(vals) if v < 1.0)
        lo = sweep[below]
        hi = sweep[below + 1] if below + 1 < len(sweep) else sweep[-1]
        for _ in range(refine_iters):
            mid = math.sqrt(lo * hi)
            if norm_at(mid) < 1.0:
                lo = mid
            else:
                hi = mid
        eps0 = lo
    return CriterionResult(epsilon0=eps0, profile=profile, holds=holds,
                           small_eps_limit=limit, full_norm=full, p=p)


@dataclass
class CriterionVerdict:
    holds: bool
    margin: float
    lhs_limit: float
    rhs: float
    profile: list = field(default_factory=list)


def _split_mix(H):
    """Separate kernel parts from scaled-reflection parts of a wall model."""
    kernels, reflections = [], []
    parts = H.parts if isinstance(H, SumOperator) else [H]
    for p in parts:
        if isinstance(p, (DiffuseOperator, NonlocalKernelOperator)):
            kernels.append(p)
        elif isinstance(p, PairingOperator):
            reflections.append(p)
        elif isinstance(p, ZeroOperator):
            continue
        else:
            raise OperatorError(f"cannot analyse part of kind {p.kind}")
    return kernels, reflections


def _contraction_norm(reflections, p):
    if not reflections:
        return 0.0
    return sum(operator_norm(r, p) for r in reflections)


def maxwell_criterion_p1(H, *, n_eps: int = 20) -> CriterionVerdict:
    """L1 generation test for wall models: the kernel column mass over
    sources with small sojourn must stay below ``1 - sup alpha``.

    The left side is the exact discrete L1 norm of the truncated kernel
    part (the weighted column-sum reading); the right side subtracts the
    reflected fraction.
    """
    kernels, reflections = _split_mix(H)
    sweep = eps_sweep(H.out_grid, n_eps)
    vals = []
    for e in sweep:
        m = sum(operator_norm(truncate(k, e), 1) for k in kernels) if kernels else 0.0
        vals.append(m)
    regular = H.out_grid.space.continuum_tau0() > 0.0
    lhs = 0.0 if regular else extrapolate_to_zero(sweep, np.array(vals))
    sup_alpha = max((float(np.max(np.abs(r.scale))) for r in reflections), default=0.0)
    rhs = 1.0 - sup_alpha
    return CriterionVerdict(holds=lhs < rhs, margin=rhs - lhs, lhs_limit=lhs,
                            rhs=rhs, profile=list(zip(sweep.tolist(), vals)))


def _diffuse_f_eps(k: DiffuseOperator, p: float, eps: float) -> float:
    """Wall-wise Hoelder bound ``f_eps(x)`` for a diffuse kernel:
    ``sum_v |v.n| w_v ( sum_{v', tau<=eps} |h(x,v,v')|^q |v'.n| w_{v'} )^{p/q}``."""
    q = p / (p - 1.0)
    out = 0.0
    tau = k.out_grid.sojourn
    for ii, jj, h, _ in k.blocks:
        mask = tau[jj] <= eps
        inner = (np.abs(h[:, mask]) ** q) @ k.out_grid.flux_weights[jj][mask]
        val = k.in_grid.flux_weights[ii] @ inner ** (p / q)
        out = max(out, float(val))
    return out


def maxwell_criterion_pq(H, p: float, *, n_eps: int = 20) -> CriterionVerdict:
    """Generation test for wall models in L^p, 1 < p < infinity.

    Computes the Hoelder double integral ``f_eps`` of the diffuse part
    restricted to sources with sojourn at most ``eps``, extrapolates the
    wall supremum to ``eps -> 0`` and compares with ``1 - sup alpha``.  For
    kernels separable in the velocities the profile decreases monotonically
    to 0, which is the mechanism making the criterion hold for arbitrarily
    large kernels.
    """
    if p <= 1:
        raise OperatorError("maxwell_criterion_pq needs p > 1")
    kernels, reflections = _split_mix(H)
    for k in kernels:
        if not isinstance(k, DiffuseOperator):
            raise OperatorError("the L^p wall criterion applies to diffuse kernels")
    sweep = eps_sweep(H.out_grid, n_eps)
    vals = []
    for e in sweep:
        f = sum(_diffuse_f_eps(k, p, e) for k in kernels) if kernels else 0.0
        if not math.isfinite(f):
            raise OperatorError("divergent q-integral: criterion inapplicable")
        vals.append(f**(1.0 / p))
    regular = H.out_grid.space.continuum_tau0() > 0.0
    lhs = 0.0 if regular else extrapolate_to_zero(sweep, np.array(vals))
    sup_alpha = max((float(np.max(np.abs(r.scale))) for r in reflections), default=0.0)
    rhs = 1.0 - sup_alpha
    return CriterionVerdict(holds=lhs < rhs, margin=rhs - lhs, lhs_limit=lhs,
                            rhs=rhs, profile=list(zip(sweep.tolist(), vals)))


def nonlocal_criterion_l1(H, *, n_eps: int = 20) -> CriterionVerdict:
    """L1 generation test for nonlocal kernels plus a contraction.

    For a nonnegative kernel the truncated L1 norm *equals* the supremum
    over sources with ``tau <= eps`` of the weighted column mass, so the
    left side here is the exact truncated-norm profile of the kernel part;
    the right side is ``1 - ||C||`` for the remaining contraction part.
    """
    kernels, reflections = _split_mix(H)
    for k in kernels:
        if not k.nonnegative:
            raise OperatorError("the L1 nonlocal criterion requires a nonnegative kernel")
    sweep = eps_sweep(H.out_grid, n_eps)
    vals = [sum(operator_norm(truncate(k, e), 1) for k in kernels) if kernels else 0.0
            for e in sweep]
    regular = H.out_grid.space.continuum_tau0() > 0.0
    lhs = 0.0 if regular else extrapolate_to_zero(sweep, np.array(vals))
    c_norm = _contraction_norm(reflections, 1)
    rhs = 1.0 - c_norm
    return CriterionVerdict(holds=lhs < rhs, margin=rhs - lhs, lhs_limit=lhs,
                            rhs=rhs, profile=list(zip(sweep.tolist(), vals)))
