"""Age / cycle-length cell population model as a first-class scenario.

Cells age at unit speed from birth (``a = 0``) to division (``a = l``,
where the cycle length ``l`` is fixed at birth), die at the bounded rate
``mu(a, l)`` along the way, and at division feed the birth boundary
through a transition kernel plus a perfect-inheritance fraction:

    newborn density at length l  =  int k(l, l') divisions(l') dl'
                                    + c * divisions(l).

The phase space is the triangle ``{0 < a < l, l1 < l < l2}`` with the
Dirac velocity ``(1, 0)``; the generic trace machinery carries the model
(traces are one-dimensional in ``l``), mortality enters as exact
exponential attenuation along flights, and the birth law is a nonlocal
boundary operator.

Well-posedness routes: a positive minimum cycle length makes the phase
space regular (minimum flight time ``l1``), so any bounded birth law
generates; at ``l1 = 0`` the kernel criterion applies instead: the column
mass ``int k(l, l') dl`` over short-cycle sources ``l' -> 0`` must stay
below ``1 - c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boundary_ops import (
    NonlocalKernelOperator,
    SumOperator,
    criterion_epsilon0,
    extrapolate_to_zero,
    operator_norm,
    transmission,
    truncate,
)
from .discretization import build_grids
from .phase_space import PopulationTriangle
from .semigroup import Record, SemigroupRun, propagate


@dataclass
class CellModel:
    """Cycle lengths in ``(l1, l2)``, mortality rate, birth kernel, and the
    perfect-inheritance fraction ``c``."""

    l1: float
    l2: float
    mortality: object = None       # None, a constant rate, or mu(a, l)
    kernel: object = None          # None or k(l, l') vectorised over grids
    c: float = 0.0

    def __post_init__(self):
        if not (self.l2 > self.l1 >= 0.0):
            raise ValueError("need l2 > l1 >= 0")
        if self.c < 0:
            raise ValueError("need c >= 0")

    def space(self) -> PopulationTriangle:
        return PopulationTriangle(self.l1, self.l2)


def build_cell_grids(model: CellModel, n_age: int = 64, n_length: int = 48):
    space = model.space()
    phase, tin, tout = build_grids(space, nx=n_age, nv=n_length)
    return space, phase, tin, tout


def birth_operator(model: CellModel, tin, tout):
    """The division-to-birth boundary operator ``K + c * identity``."""
    parts = []
    if model.kernel is not None:
        k = model.kernel

        def matrix(gi, go):
            L = gi.boundary_coord[:, None]
            Lp = go.boundary_coord[None, :]
            return np.asarray(k(L, Lp), dtype=float)

        parts.append(NonlocalKernelOperator(tin, tout, matrix))
    if model.c > 0.0:
        parts.append(transmission(tin, tout, scale=model.c))
    if not parts:
        from .boundary_ops import ZeroOperator
        return ZeroOperator(tin, tout)
    if len(parts) == 1:
        return parts[0]
    return SumOperator(parts, kind="birth-law")


def _mortality_rate(model: CellModel):
    if model.mortality is None:
        return None
    if np.isscalar(model.mortality):
        return float(model.mortality)
    mu = model.mortality

    def rate(P, V):
        P = np.atleast_2d(P)
        return np.asarray(mu(P[:, 0], P[:, 1]), dtype=float)

    return rate


def cell_propagate(model: CellModel, initial, t_final: float, dt: float | None = None,
                   *, n_age: int = 64, n_length: int = 48, p: float = 1.0,
                   record_every: int = 1, grids=None) -> Record:
    """March the population model; returns the usual norm record with the
    per-step birth and division masses attached in ``meta``."""
    if grids is None:
        space, phase, tin, tout = build_cell_grids(model, n_age, n_length)
    else:
        space, phase, tin, tout = grids
    H = birth_operator(model, tin, tout)
    run = SemigroupRun(space=space, phase=phase, trace_in=tin, trace_out=tout,
                       H=H, initial=initial, p=p, t_final=t_final, dt=dt,
                       record_every=record_every,
                       absorption=_mortality_rate(model))
    rec = propagate(run)
    rec.meta.update(model=model, grids=(space, phase, tin, tout), operator=H)
    return rec


@dataclass
class WellPosednessVerdict:
    holds: bool
    route: str                  # "regular" or "kernel"
    tau0: float
    kernel_limit: float
    threshold: float
    growth_exponent: float


def cell_wellposedness(model: CellModel, *, n_age: int = 64, n_length: int = 200,
                       p: float = 1.0, grids=None) -> WellPosednessVerdict:
    """Decide generation for the birth law.

    With ``l1 > 0`` the phase space is regular: every bounded birth law
    generates, with growth exponent at most ``max(0, ln||H|| / l1)``.  With
    ``l1 = 0`` the L1 kernel criterion decides: the extrapolated short-cycle
    column mass must stay below ``1 - c``.
    """
    if model.c >= 1.0 and model.kernel is not None:
        return WellPosednessVerdict(False, "kernel", model.l1, math.inf,
                                    1.0 - model.c, math.inf)
    if grids is None:
        space, phase, tin, tout = build_cell_grids(model, n_age, n_length)
    else:
        space, phase, tin, tout = grids
    H = birth_operator(model, tin, tout)
    if model.l1 > 0.0:
        norm = operator_norm(H, 1 if p == 1 else 2)
        exponent = max(0.0, math.log(max(norm, 1e-300)) / model.l1)
        return WellPosednessVerdict(True, "regular", model.l1, 0.0, 1.0,
                                    exponent)
    # l1 == 0: short-cycle column-mass limit against 1 - c
    if model.kernel is None:
        limit = 0.0
        profile_ok = model.c < 1.0
    else:
        K = birth_operator(CellModel(model.l1, model.l2, kernel=model.kernel),
                           tin, tout)
        eps = np.geomspace(tout.sojourn.min(), tout.sojourn.max(), 20)
        vals = np.array([operator_norm(truncate(K, e), 1) for e in eps])
        limit = extrapolate_to_zero(eps, vals)
        profile_ok = limit < 1.0 - model.c
    crit = criterion_epsilon0(H, p=1)
    exponent = crit.growth_exponent
    return WellPosednessVerdict(bool(profile_ok), "kernel", model.l1,
                                float(limit), 1.0 - model.c, exponent)


def cell_renewal_record(model: CellModel, initial, t_final: float,
                        dt: float | None = None, *, n_age: int = 64,
                        n_length: int = 48):
    """March the model and return the birth/division mass time series.

    Births are the incoming-trace mass per step, divisions the outgoing
    one; for a pure kernel law with column mass ``m`` the identity
    ``births = m * divisions`` holds exactly on the grid, step by step.
    """
    from .semigroup import _Marcher
    space, phase, tin, tout = build_cell_grids(model, n_age, n_length)
    H = birth_operator(model, tin, tout)
    run = SemigroupRun(space=space, phase=phase, trace_in=tin, trace_out=tout,
                       H=H, initial=initial, p=1.0, t_final=t_final, dt=dt,
                       absorption=_mortality_rate(model))
    m = _Marcher(run)
    m.run_march()
    times = np.arange(m.n_steps + 1) * run.dt
    births = m.in_hist @ tin.weights
    divisions = m.out_hist @ tout.weights
    return times, births, divisions


def mitosis_kernel(l2: float, l1: float = 0.0):
    """Constant-column birth kernel with column mass exactly 2 (each
    division produces two daughters, lengths uniform on ``(l1, l2)``)."""
    width = l2 - l1

    def k(L, Lp):
        return np.full(np.broadcast(L, Lp).shape, 2.0 / width)

    return k


def proportional_kernel(l2: float):
    """Kernel ``k(l, l') = 4 l' / l2^2``: column mass ``4 l' / l2`` vanishes
    with the source cycle length, total action still doubling for uniform
    sources."""

    def k(L, Lp):
        return 4.0 * np.broadcast_to(Lp, np.broadcast(L, Lp).shape) / l2**2

    return k
