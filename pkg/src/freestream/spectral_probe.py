"""Numerical exhibits of the negative results.

Two desk-scale counterexamples:

* **Bounce-back blow-up.**  For the amplified velocity-reversal wall
  ``(Hg)(x,v) = alpha g(x,-v)`` with ``alpha > 1``, the mode along the
  chord through ``(x, v)`` grows at the rate
  ``F0(x,v) = ln(alpha) / (t(x,v) + t(x,-v))`` -- the amplification per
  full chord flight.  Short chords near the boundary make the rate
  arbitrarily large, so no growth bound can hold.  The experiment builds
  thin phase-space beams hugging shorter and shorter chords, propagates
  them exactly with the billiard engine, and compares measured norm growth
  with the predicted chord rate; the trend is reported over a finite sweep,
  never as a literal infinity.

* **Non-closedness of the identity wall at unit norm.**  On the half-range
  interval model with ``H = identity``, the x-independent states
  ``phi_n(x,v) = h(v) 1_{v < n}`` with ``h(v) = (1+v)^{-2}`` are all in the
  generator's domain with ``T phi_n = 0``, converge in the bulk norm, yet
  their trace norms ``int_0^n v h(v) dv = ln(1+n) - n/(1+n)`` diverge, so
  the limit escapes every trace space and the operator is not closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boundary_ops import transmission
from .discretization import build_grids, midpoint_rule
from .phase_space import Ball, PhaseSpace, Slab
from .semigroup import Record, billiard_values, growth_rate


def bounceback_rate_field(space: PhaseSpace, phase, alpha: float):
    """Per-node chord growth rates ``ln(alpha)/(t(x,v) + t(x,-v))``.

    Returns ``(values, supremum)``.  The supremum is a grid estimate of the
    spectral bound; it grows without bound as the grid resolves shorter
    chords (ball), and stays at ``ln(alpha) * s_max / (2a)`` on the slab.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    fwd = space.sojourn_batch(phase.positions, phase.velocities)
    bwd = space.sojourn_batch(phase.positions, -phase.velocities)
    rates = math.log(alpha) / (fwd + bwd)
    return rates, float(np.max(rates))


@dataclass(frozen=True)
class BeamSpec:
    """A thin phase-space beam around a chord of the 2-ball.

    ``chord_offset`` is the distance of the chord from the centre,
    ``direction`` the chord angle; the beam keeps directions within
    ``half_angle`` of the chord direction (both lobes, since bounce-back
    reverses velocities) and positions within ``lateral`` of the node's own
    flight line.  The membership test is exactly invariant under the
    bounce-back flow, so the indicator initial datum evolves by pure
    amplification.
    """

    chord_offset: float
    direction: float = 0.0
    half_angle: float = 0.05
    lateral: float = 0.02
    speed: float = 1.0

    def frame(self, space: Ball):
        d = np.array([math.cos(self.direction), math.sin(self.direction)])
        n = np.array([-math.sin(self.direction), math.cos(self.direction)])
        center = self.chord_offset * n
        half = math.sqrt(max(space.radius**2 - self.chord_offset**2, 0.0))
        return center, d, n, half

    def chord_flight_time(self, space: Ball) -> float:
        _, _, _, half = self.frame(space)
        return 2.0 * half / self.speed

    def membership(self, space: Ball):
        center, _, _, _ = self.frame(space)
        cos_cut = math.cos(self.half_angle)

        def member(P, V):
            P = np.atleast_2d(P)
            V = np.atleast_2d(V)
            sp = np.linalg.norm(V, axis=1)
            dirs = V / sp[:, None]
            axis = np.array([math.cos(self.direction), math.sin(self.direction)])
            along = np.abs(dirs @ axis)              # both lobes
            perp = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)
            lat = np.abs(np.einsum("ij,ij->i", P - center[None, :], perp))
            return ((along >= cos_cut) & (lat <= self.lateral)).astype(float)

        return member

    def build_nodes(self, space: Ball, n_along=48, n_lat=6, n_ang=8):
        """Chord-aligned lattice of beam nodes with exact cell weights."""
        center, d, n, half = self.frame(space)
        safe = math.sqrt(max(space.radius**2
                             - (self.chord_offset + self.lateral)**2, 0.0))
        u, wu = midpoint_rule(-safe, safe, n_along)
        w, ww = midpoint_rule(-self.lateral, self.lateral, n_lat)
        angles = []
        for base in (self.direction, self.direction + math.pi):
            a, wa = midpoint_rule(base - self.half_angle,
                                  base + self.half_angle, n_ang)
            angles.append((a, wa))
        pos, vel, wt = [], [], []
        for a, wa in angles:
            for k, ang in enumerate(a):
                v = self.speed * np.array([math.cos(ang), math.sin(ang)])
                for j, wj in enumerate(w):
                    Pj = center[None, :] + u[:, None] * d[None, :] + wj * n[None, :]
                    inside = np.einsum("ij,ij->i", Pj, Pj) < (space.radius * (1 - 1e-12))**2
                    pos.append(Pj[inside])
                    vel.append(np.tile(v, (int(inside.sum()), 1)))
                    wt.append(wu[inside] * ww[j] * wa[k])
        return np.concatenate(pos), np.concatenate(vel), np.concatenate(wt)


def beam_for_chord_time(space: Ball, chord_time: float, *, rate_tol: float = 0.04,
                        speed: float = 1.0, direction: float = 0.0) -> BeamSpec:
    """Size a beam so the chord-rate spread inside it stays within
    ``rate_tol``.

    Near the boundary the chord time is steeply sensitive to the offset
    (``d ct/d offset = -4 d / ct``), so the lateral half-width shrinks like
    ``ct^2`` while the angular half-width, a second-order effect, shrinks
    like ``ct``.
    """
    half = 0.5 * chord_time * speed
    if not 0.0 < half < space.radius:
        raise ValueError("chord time out of range for this ball")
    d = math.sqrt(space.radius**2 - half**2)
    lateral = min(0.25 * (space.radius - d), rate_tol * chord_time**2 * speed / (8 * d))
    half_angle = min(0.1, chord_time * speed * math.sqrt(rate_tol) / (2 * d))
    return BeamSpec(chord_offset=d, direction=direction, half_angle=half_angle,
                    lateral=lateral, speed=speed)


@dataclass
class BlowupRow:
    half_angle: float
    chord_time: float
    predicted_rate: float
    measured_rate: float


def blowup_experiment(space: Ball, alpha: float, beams, *, periods: float = 8.0,
                      samples: int = 60, p: float = 1.0,
                      bounce_cap: int = 20_000) -> list[BlowupRow]:
    """Measure beam growth rates against the chord prediction.

    Each beam is propagated exactly by the billiard engine on its own
    chord-aligned node set over ``periods`` chord flights; the measured
    rate is the trailing log-norm slope.  Rows come back in sweep order.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rows = []
    for beam in beams:
        X, V, W = beam.build_nodes(space)
        member = beam.membership(space)
        T = periods * beam.chord_flight_time(space)
        times = np.linspace(0.0, T, samples)
        norms = []
        for t in times:
            vals, flagged = billiard_values(space, "bounce-back", alpha, X, V,
                                            float(t), member,
                                            bounce_cap=bounce_cap)
            v = np.where(flagged, 0.0, vals)
            norms.append(float(np.dot(W, np.abs(v)**p) ** (1.0 / p)))
        rec = Record(times=times, norms=np.asarray(norms), p=p)
        rows.append(BlowupRow(
            half_angle=beam.half_angle,
            chord_time=beam.chord_flight_time(space),
            predicted_rate=math.log(alpha) / beam.chord_flight_time(space),
            measured_rate=growth_rate(rec)))
    return rows


@dataclass
class VoigtRow:
    n: float
    bulk_distance: float
    streaming_norm: float
    trace_norm: float
    trace_norm_exact: float


def voigt_trace_norm_exact(n: float) -> float:
    """``int_0^n v (1+v)^{-2} dv = ln(1+n) - n/(1+n)``."""
    return math.log1p(n) - n / (1.0 + n)


def voigt_demo(ns, *, nx: int = 8, points_per_unit: float = 4.0,
               vmax_factor: float = 4.0) -> list[VoigtRow]:
    """Trace-norm divergence of the cut-off states on the half-range model.

    For every ``n``: builds the interval model with speeds ``(0, 4n)``,
    samples ``phi_n(x,v) = (1+v)^{-2} 1_{v<n}``, and reports the bulk
    distance to the limit state, the (identically zero) streaming norm of
    ``phi_n``, and the outgoing trace norm against its closed form.
    """
    rows = []
    for n in ns:
        vmax = vmax_factor * float(n)
        nv = max(int(points_per_unit * vmax), 400)
        nv += nv % 2
        space = Slab(0.5, speeds=(0.0, vmax))
        phase, tin, tout = build_grids(space, nx=nx, nv=nv,
                                       tangential_cutoff=1e-12 * vmax)
        # the identity wall pairs the outgoing trace straight into the
        # incoming one; it exists and has norm 1 on this model
        H = transmission(tin, tout)
        assert H.weight_preserving

        v = phase.velocities[:, 0]
        phi_n = np.where(v < n, (1.0 + v) ** -2.0, 0.0)
        phi_lim = (1.0 + v) ** -2.0
        bulk = float(np.dot(phase.weights, np.abs(phi_n - phi_lim)))

        # streaming derivative by central differences per velocity column:
        # phi_n is x-independent, so this vanishes identically
        nxn = len(phase.layout.x_nodes)
        blocks = phi_n.reshape(-1, nxn)
        dx = phase.layout.x_nodes[1] - phase.layout.x_nodes[0]
        dphi = np.gradient(blocks, dx, axis=1)
        stream = float(np.dot(phase.weights, np.abs(v * dphi.ravel())))

        vt = tout.velocities[:, 0]
        trace_vals = np.where(vt < n, (1.0 + vt) ** -2.0, 0.0)
        trace = float(np.dot(tout.weights, trace_vals))
        rows.append(VoigtRow(n=float(n), bulk_distance=bulk,
                             streaming_norm=stream, trace_norm=trace,
                             trace_norm_exact=voigt_trace_norm_exact(float(n))))
    return rows
