"""Transport semigroup engines: trace-history marching and exact billiards.

The boundary recursion behind the evolution problem is a delay system: the
outgoing trace at time ``t`` is found one backward flight into the past
(initial data while ``t < tau``, the incoming trace at ``t - tau`` after),
and the incoming trace is the boundary operator applied to the outgoing
one.  The marching engine fills both trace histories causally on a uniform
time step and reconstructs the interior field from them; the step must
resolve the smallest boundary flight time (``dt <= min tau / 4``).

For pure reflection operators the backward broken characteristic can be
unrolled exactly instead: ``propagate_billiard`` retraces chords through
reflections with no time discretisation, multiplying by the wall scale at
every bounce.  Nodes exceeding the bounce cap (near-tangential rays) are
flagged and excluded from norms, with the excluded weight fraction
reported -- never silently truncated.

The renormalised engine propagates the conjugated problem: boundary
operator damped by ``q^{min(tau, k)}`` (a contraction when ``q`` is chosen
below the threshold ``q^eps < (1 - ||H chi_eps||) / ||H||``), a uniform
bulk rate ``-ln q`` along flights, and the diagonal weights ``q^{min(t,k)}``
conjugating back.  Agreement with the direct engine is a testable identity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .boundary_ops import (
    BoundaryOperator,
    PairingOperator,
    operator_norm,
    sojourn_damping,
    truncate,
)
from .discretization import (
    DensityField,
    PhaseGrid,
    TraceGrid,
    exit_stencil_for_grid,
    norm_p,
)
from .phase_space import Ball, Slab

_GAUSS_N = 16


class RunError(ValueError):
    pass


@dataclass
class Record:
    """Time series produced by a propagation run."""

    times: np.ndarray
    norms: np.ndarray
    p: float
    flagged_fraction: float = 0.0
    snapshots: dict = field(default_factory=dict)
    extinct_at: float | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", f"norm_{self.p:g}", "flagged_fraction"])
            for t, n in zip(self.times, self.norms):
                w.writerow([f"{t:.17g}", f"{n:.17g}", f"{self.flagged_fraction:.17g}"])


@dataclass
class SemigroupRun:
    """Configuration of one propagation run.

    ``initial`` is either a callable ``f(x, v)`` (vectorised over rows) or a
    :class:`DensityField` on ``phase``.  ``absorption`` is ``None``, a
    uniform rate, or a callable rate ``mu(x, v)`` integrated exactly along
    flights by Gauss quadrature.
    """

    space: object
    phase: PhaseGrid
    trace_in: TraceGrid
    trace_out: TraceGrid
    H: BoundaryOperator
    initial: object
    p: float = 1.0
    t_final: float = 1.0
    dt: float | None = None
    record_every: int = 1
    absorption: object = None
    snapshot_times: tuple = ()
    bounce_cap: int = 100_000

    def __post_init__(self):
        tau_min = float(self.trace_out.sojourn.min())
        if self.dt is None:
            self.dt = tau_min / 8.0
        if self.dt > tau_min / 4.0 + 1e-15:
            raise RunError(
                f"history underrun: dt={self.dt:g} exceeds min sojourn/4="
                f"{tau_min / 4.0:g}; the delay recursion cannot be resolved")
        if self.dt <= 0 or self.t_final <= 0:
            raise RunError("dt and t_final must be positive")

    def initial_values(self) -> np.ndarray:
        if isinstance(self.initial, DensityField):
            return np.asarray(self.initial.values, dtype=float)
        return np.asarray(self.initial(self.phase.positions, self.phase.velocities),
                          dtype=float)

    def initial_eval(self, P, kidx):
        if isinstance(self.initial, DensityField):
            return self.phase.interp(self.initial.values, P, kidx)
        return np.asarray(self.initial(P, self.phase.vel_table[kidx]), dtype=float)


# ---------------------------------------------------------------------------
# attenuation along backward flights
# ---------------------------------------------------------------------------

_gauss_x, _gauss_w = np.polynomial.legendre.leggauss(_GAUSS_N)


def _flight_attenuation(absorption, end_positions, velocities, lengths):
    """``exp(-int_0^L mu(x - s v, v) ds)`` for backward flights ending at
    ``end_positions`` (vectorised; exact for uniform rates)."""
    if absorption is None:
        return 1.0
    L = np.asarray(lengths, dtype=float)
    if np.isscalar(absorption) or isinstance(absorption, float):
        return np.exp(-float(absorption) * L)
    s = 0.5 * L[:, None] * (_gauss_x[None, :] + 1.0)          # (n, G)
    P = end_positions[:, None, :] - s[:, :, None] * velocities[:, None, :]
    flat = P.reshape(-1, P.shape[-1])
    vrep = np.repeat(velocities, _GAUSS_N, axis=0)
    rates = np.asarray(absorption(flat, vrep), dtype=float).reshape(len(L), _GAUSS_N)
    integral = 0.5 * L * (rates @ _gauss_w)
    return np.exp(-integral)


# ---------------------------------------------------------------------------
# trace-history marching
# ---------------------------------------------------------------------------

def _hist_lookup(hist, u, dt, st):
    """Linear-in-time lookup of a trace history at per-node times ``u``
    through an exit stencil ``st``."""
    k0 = np.clip(np.floor(u / dt).astype(int), 0, hist.shape[0] - 2)
    f = np.clip(u / dt - k0, 0.0, 1.0)
    lo = st.w1 * hist[k0, st.i1] + st.w2 * hist[k0, st.i2]
    hi = st.w1 * hist[k0 + 1, st.i1] + st.w2 * hist[k0 + 1, st.i2]
    return (1.0 - f) * lo + f * hi


class _Marcher:
    def __init__(self, run: SemigroupRun):
        self.run = run
        self.out = run.trace_out
        self.n_steps = int(math.ceil(run.t_final / run.dt - 1e-12))
        self.dt = run.dt
        self.stencil = exit_stencil_for_grid(self.out, run.trace_in)
        self.exit_att = _flight_attenuation(
            run.absorption, self.out.positions, self.out.velocities, self.stencil.tau)
        self.phase_stencil = exit_stencil_for_grid(run.phase, run.trace_in)
        self.phase_att = _flight_attenuation(
            run.absorption, run.phase.positions, run.phase.velocities,
            self.phase_stencil.tau)
        self.in_hist = np.zeros((self.n_steps + 1, len(run.trace_in)))
        self.out_hist = np.zeros((self.n_steps + 1, len(self.out)))

    def run_march(self):
        run, out = self.run, self.out
        tau = self.stencil.tau
        for k in range(self.n_steps + 1):
            tk = k * self.dt
            vals = np.empty(len(out))
            fresh = tk < tau
            if np.any(fresh):
                P = out.positions[fresh] - tk * out.velocities[fresh]
                v0 = run.initial_eval(P, out.vel_index[fresh])
                att = _flight_attenuation(run.absorption, out.positions[fresh],
                                          out.velocities[fresh],
                                          np.full(int(fresh.sum()), tk))
                vals[fresh] = v0 * att
            old = ~fresh
            if np.any(old):
                sub = _StencilView(self.stencil, old)
                u = tk - tau[old]
                att = self.exit_att[old] if np.ndim(self.exit_att) else self.exit_att
                vals[old] = _hist_lookup(self.in_hist, u, self.dt, sub) * att
            self.out_hist[k] = vals
            self.in_hist[k] = run.H.apply(vals)

    def interior_values(self, t: float) -> np.ndarray:
        run = self.run
        ph = run.phase
        tau = self.phase_stencil.tau
        vals = np.empty(len(ph))
        fresh = t < tau
        if np.any(fresh):
            P = ph.positions[fresh] - t * ph.velocities[fresh]
            v0 = run.initial_eval(P, ph.vel_index[fresh])
            att = _flight_attenuation(run.absorption, ph.positions[fresh],
                                      ph.velocities[fresh],
                                      np.full(int(fresh.sum()), t))
            vals[fresh] = v0 * att
        old = ~fresh
        if np.any(old):
            sub = _StencilView(self.phase_stencil, old)
            u = t - tau[old]
            base = _hist_lookup(self.in_hist, u, self.dt, sub)
            att = self.phase_att[old] if np.ndim(self.phase_att) else self.phase_att
            vals[old] = base * att
        return vals


class _StencilView:
    def __init__(self, st, mask):
        self.i1 = st.i1[mask]
        self.i2 = st.i2[mask]
        self.w1 = st.w1[mask]
        self.w2 = st.w2[mask]


def _record_times(run: SemigroupRun):
    n = int(math.ceil(run.t_final / run.dt - 1e-12))
    steps = np.arange(0, n + 1, run.record_every)
    if steps[-1] != n:
        steps = np.append(steps, n)
    return steps * run.dt


def _finalize_record(run, times, norms, values_at, flagged=0.0, meta=None):
    norms = np.asarray(norms)
    extinct = None
    for t, nv in zip(times, norms):
        if nv == 0.0:
            extinct = float(t)
            break
    snaps = {float(t): values_at(float(t)) for t in run.snapshot_times}
    return Record(times=np.asarray(times), norms=norms, p=run.p,
                  flagged_fraction=flagged, snapshots=snaps,
                  extinct_at=extinct, meta=meta or {})


def propagate(run: SemigroupRun) -> Record:
    """Propagate by trace-history marching; works for every boundary operator.

    The engine runs regardless of any generation verdict (counterexample
    studies need exactly that); it reports measured norms without claiming
    anything about the underlying continuum problem.
    """
    m = _Marcher(run)
    m.run_march()
    times = _record_times(run)
    norms = [norm_p(DensityField(run.phase, m.interior_values(t)), run.p)
             for t in times]
    rec = _finalize_record(run, times, norms, m.interior_values)
    rec.meta["engine"] = "march"
    return rec


# ---------------------------------------------------------------------------
# exact billiard unrolling for reflection operators
# ---------------------------------------------------------------------------

def _normals_batch(space, P):
    if isinstance(space, Slab):
        return np.where(P[:, :1] > 0, 1.0, -1.0)
    if isinstance(space, Ball):
        return P / np.linalg.norm(P, axis=1, keepdims=True)
    raise RunError("billiard propagation supports slab and ball geometries")


def _reflect(space, kind, P, V):
    if kind == "bounce-back":
        return -V
    n = _normals_batch(space, P)
    return V - 2.0 * np.sum(V * n, axis=1, keepdims=True) * n


def billiard_values(space, kind, scale, X, V, t, value_eval, *,
                    bounce_cap=100_000, absorption=None):
    """Evaluate the reflected transport solution at time ``t`` on points
    ``(X, V)`` by unrolling the backward broken characteristic.

    ``value_eval(P, V)`` supplies the initial data at exact backward
    points; ``scale`` is the per-bounce wall factor (scalar or callable of
    the wall point).  Returns ``(values, flagged)``.
    """
    n = len(X)
    pos = np.array(X, dtype=float)
    vel = np.array(V, dtype=float)
    remaining = np.full(n, float(t))
    factor = np.ones(n)
    flagged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    values = np.zeros(n)
    bounces = 0
    radius = getattr(space, "radius", None)

    while np.any(active):
        idx = np.flatnonzero(active)
        tau = space.sojourn_batch(pos[idx], vel[idx])
        done = remaining[idx] <= tau
        di = idx[done]
        if len(di):
            P = pos[di] - remaining[di, None] * vel[di]
            att = _flight_attenuation(absorption, pos[di], vel[di], remaining[di])
            values[di] = factor[di] * value_eval(P, vel[di]) * att
            active[di] = False
        ci = idx[~done]
        if len(ci):
            step = tau[~done]
            att = _flight_attenuation(absorption, pos[ci], vel[ci], step)
            factor[ci] *= np.asarray(att) if np.ndim(att) else att
            pos[ci] -= step[:, None] * vel[ci]
            if radius is not None:
                # re-project onto the sphere to stop drift over many bounces
                pos[ci] *= radius / np.linalg.norm(pos[ci], axis=1, keepdims=True)
            remaining[ci] -= step
            if callable(scale):
                factor[ci] *= np.asarray(scale(pos[ci]), dtype=float)
            else:
                factor[ci] *= scale
            vel[ci] = _reflect(space, kind, pos[ci], vel[ci])
        bounces += 1
        if bounces > bounce_cap:
            flagged[active] = True
            values[active] = 0.0
            break
    return values, flagged


def _nearest_vel_index(vel_table, V):
    idx = np.empty(len(V), dtype=int)
    for i, v in enumerate(V):
        idx[i] = np.argmin(np.sum((vel_table - v[None, :]) ** 2, axis=1))
    return idx


def propagate_billiard(run: SemigroupRun, times=None) -> Record:
    """Exact propagation for (scaled) regular reflection operators.

    No time discretisation: every node's backward broken characteristic is
    unrolled through reflections until the initial time, multiplying by the
    wall scale at each bounce.  Nodes that exceed ``run.bounce_cap`` are
    flagged, excluded from norms, and their weight fraction reported.
    """
    H = run.H
    if not isinstance(H, PairingOperator) or H.kind not in ("specular", "bounce-back"):
        raise RunError("propagate_billiard needs a (scaled) reflection operator")
    scale = getattr(H, "scale_spec", None)
    if scale is None:
        scale = float(H.scale[0]) if np.ptp(H.scale) == 0 else None
    if scale is None:
        raise RunError("reflection scale varies but no scale_spec is attached")
    ph = run.phase

    if isinstance(run.initial, DensityField):
        init_vals = run.initial.values

        def value_eval(P, V):
            return ph.interp(init_vals, P, _nearest_vel_index(ph.vel_table, V))
    else:
        def value_eval(P, V):
            return np.asarray(run.initial(P, V), dtype=float)

    times = _record_times(run) if times is None else np.asarray(times, dtype=float)
    norms = []
    flagged_frac = 0.0
    cache = {}
    total_w = ph.weights.sum()
    for t in times:
        vals, flagged = billiard_values(
            run.space, H.kind, scale, ph.positions, ph.velocities, t, value_eval,
            bounce_cap=run.bounce_cap, absorption=run.absorption)
        cache[float(t)] = vals
        keep = ~flagged
        flagged_frac = max(flagged_frac, float(ph.weights[flagged].sum() / total_w))
        sub = DensityField(ph, np.where(keep, vals, 0.0))
        norms.append(norm_p(sub, run.p))

    def values_at(t):
        if float(t) in cache:
            return cache[float(t)]
        vals, _ = billiard_values(run.space, H.kind, scale, ph.positions,
                                  ph.velocities, t, value_eval,
                                  bounce_cap=run.bounce_cap,
                                  absorption=run.absorption)
        return vals

    rec = _finalize_record(run, times, norms, values_at, flagged=flagged_frac)
    rec.meta["engine"] = "billiard"
    return rec


# ---------------------------------------------------------------------------
# growth measurement and the renormalised engine
# ---------------------------------------------------------------------------

def growth_rate(record: Record, window: float = 0.5) -> float:
    """Least-squares slope of ``log norm`` over the trailing window.

    Returns ``-inf`` when the trailing norms vanish (mass extinct).
    """
    t = np.asarray(record.times, dtype=float)
    n = np.asarray(record.norms, dtype=float)
    cut = t[-1] - window * (t[-1] - t[0])
    sel = t >= cut
    t, n = t[sel], n[sel]
    if np.all(n == 0.0):
        return -math.inf
    pos = n > 0
    t, n = t[pos], n[pos]
    if len(t) < 10:
        raise RunError("growth_rate needs at least 10 positive samples in the window")
    slope = np.polyfit(t, np.log(n), 1)[0]
    return float(slope)


def renormalization_weights(sojourn, q: float, k_cap: float) -> np.ndarray:
    """Diagonal conjugation weights ``q^{min(t, k)}`` for given flight times."""
    return q ** np.minimum(np.asarray(sojourn, dtype=float), k_cap)


def pick_q(H: BoundaryOperator, crit, p: float = 1, safety: float = 0.9):
    """Choose the damping base from the threshold inequality
    ``q^eps < (1 - ||H chi_eps||) / ||H||`` at a scale just inside eps0.

    Returns ``(q, eps_star, truncated_norm)``.
    """
    if crit.epsilon0 == 0.0:
        raise RunError("criterion fails on this grid: no admissible q")
    if math.isinf(crit.epsilon0):
        eps_star = float(H.out_grid.sojourn.max())
    else:
        eps_star = crit.epsilon0 * (1.0 - 1e-6)
    val = operator_norm(truncate(H, eps_star), p)
    full = max(crit.full_norm, 1.0)
    q = (safety * (1.0 - val) / full) ** (1.0 / eps_star)
    q = min(max(q, 1e-12), 1.0 - 1e-12)
    return q, eps_star, val


def renormalized_propagate(run: SemigroupRun, q: float, k_cap: float | None = None) -> Record:
    """Propagate the conjugated problem and map back.

    The conjugated problem carries the damped boundary operator
    ``H M_q`` and the uniform bulk rate ``ln q`` (negative: values grow
    like ``q^{-t}`` along flights, the boundary amplification having been
    traded for bulk growth).  The returned record is the conjugated-back
    field ``q^{t_k} V(t) q^{-t_k} initial``, directly comparable with
    :func:`propagate`.  ``k_cap`` defaults to the largest grid flight time,
    which keeps the cap inactive and the conjugacy exact.
    """
    if not 0.0 < q < 1.0:
        raise RunError("q must lie in (0, 1)")
    if run.absorption is not None and not np.isscalar(run.absorption):
        raise RunError("renormalisation composes only with uniform absorption")
    t_phase = run.phase.sojourn_times()
    if k_cap is None:
        k_cap = float(max(t_phase.max(), run.trace_out.sojourn.max()))
    base = float(run.absorption or 0.0)

    w_phase = renormalization_weights(t_phase, q, k_cap)
    space = run.space
    base_run = run

    def conjugated_initial(P, V):
        # evaluate the diagonal weight q^{-min(t,k)} exactly at the query
        # point: sampling it on nodes would reintroduce interpolation error
        tk = np.minimum(space.sojourn_batch(P, V), k_cap)
        if isinstance(base_run.initial, DensityField):
            kidx = _nearest_vel_index(base_run.phase.vel_table, np.asarray(V))
            vals = base_run.phase.interp(base_run.initial.values, P, kidx)
        else:
            vals = np.asarray(base_run.initial(P, V), dtype=float)
        return vals * q ** (-tk)

    H_q = sojourn_damping(run.H, q, k_cap)
    run_v = replace(run, H=H_q, initial=conjugated_initial,
                    absorption=base + math.log(q), snapshot_times=())

    m = _Marcher(run_v)
    m.run_march()
    times = _record_times(run_v)

    def values_at(t):
        return w_phase * m.interior_values(float(t))

    norms = [norm_p(DensityField(run.phase, values_at(t)), run.p) for t in times]
    rec = _finalize_record(run, times, norms, values_at)
    rec.meta.update(engine="renormalized", q=q, k_cap=k_cap,
                    damped_norm=operator_norm(H_q, 1 if run.p == 1 else 2))
    return rec


# ---------------------------------------------------------------------------
# Laplace transform of a propagated run (for resolvent cross-checks)
# ---------------------------------------------------------------------------

def _simpson_weights(n_points: int, dt: float) -> np.ndarray:
    w = np.zeros(n_points)
    if n_points < 2:
        return w
    m = n_points if n_points % 2 else n_points - 1
    if m >= 3:
        w[0:m:2] += 2.0
        w[1:m:2] += 4.0
        w[0] -= 1.0
        w[m - 1] -= 1.0
        w[:m] *= dt / 3.0
    if m != n_points:           # trapezoid on the last interval
        w[-2] += dt / 2.0
        w[-1] += dt / 2.0
    return w


def laplace_transform(run: SemigroupRun, lambdas, engine: str = "march",
                      dt_sample: float | None = None):
    """``int_0^T exp(-lambda t) U(t) phi dt`` accumulated by Simpson's rule.

    Choose ``T = run.t_final`` large enough that the integrand tail is
    negligible for every requested ``lambda``.
    """
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if engine == "march":
        m = _Marcher(run)
        m.run_march()
        times = np.arange(m.n_steps + 1) * run.dt
        values_at = m.interior_values
        dt = run.dt
    elif engine == "billiard":
        dt = dt_sample or run.dt
        n = int(math.ceil(run.t_final / dt))
        times = np.arange(n + 1) * dt
        H = run.H
        scale = getattr(H, "scale_spec", float(H.scale[0]))
        ph = run.phase
        if isinstance(run.initial, DensityField):
            init_vals = run.initial.values

            def value_eval(P, V):
                return ph.interp(init_vals, P, _nearest_vel_index(ph.vel_table, V))
        else:
            def value_eval(P, V):
                return np.asarray(run.initial(P, V), dtype=float)

        def values_at(t):
            vals, _ = billiard_values(run.space, H.kind, scale, ph.positions,
                                      ph.velocities, t, value_eval,
                                      bounce_cap=run.bounce_cap,
                                      absorption=run.absorption)
            return vals
    else:
        raise RunError("engine must be 'march' or 'billiard'")

    w = _simpson_weights(len(times), dt)
    acc = np.zeros((len(lambdas), len(run.phase)))
    for k, t in enumerate(times):
        f = values_at(float(t))
        for j, lam in enumerate(lambdas):
            acc[j] += w[k] * math.exp(-lam * t) * f
    return {float(lam): acc[j] for j, lam in enumerate(lambdas)}
