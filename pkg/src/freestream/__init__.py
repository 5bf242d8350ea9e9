"""Numerical laboratory for collisionless transport with abstract walls.

Free streaming on a convex phase space, coupled through a linear boundary
operator feeding the outgoing trace back into the incoming one: reflecting,
diffuse, mixed, or nonlocal walls.  The package discretises the phase
space, estimates boundary-operator norms and their small-sojourn
truncations, propagates the flow exactly along characteristics, assembles
the resolvent, and reproduces the classical counterexamples (bounce-back
blow-up, non-closed identity wall) at desk scale.
"""

from .phase_space import (
    Ball,
    BoundaryPoint,
    GeometryError,
    PhaseSpace,
    PopulationTriangle,
    Slab,
    chord_time,
    regularity_tau0,
)
from .discretization import (
    DensityField,
    PhaseGrid,
    TraceField,
    TraceGrid,
    build_grids,
    field_from_function,
    interpolate,
    norm_p,
    write_field_csv,
)
from .boundary_ops import (
    BoundaryOperator,
    CriterionResult,
    ZeroOperator,
    bounce_back,
    criterion_epsilon0,
    maxwell_criterion_p1,
    maxwell_criterion_pq,
    maxwell_diffuse,
    maxwell_mix,
    maxwellian_half_flux,
    nonlocal_criterion_l1,
    operator_norm,
    sampled_norm_lower_bound,
    sojourn_damping,
    specular_reflection,
    transmission,
    truncate,
)
from .semigroup import (
    Record,
    SemigroupRun,
    growth_rate,
    laplace_transform,
    pick_q,
    propagate,
    propagate_billiard,
    renormalized_propagate,
)
from .resolvent import ResolventOperators, batty_balance, norm_bound_table
from .spectral_probe import (
    BeamSpec,
    beam_for_chord_time,
    blowup_experiment,
    bounceback_rate_field,
    voigt_demo,
)
from .population import (
    CellModel,
    cell_propagate,
    cell_wellposedness,
    mitosis_kernel,
    proportional_kernel,
)

__version__ = "0.1.0"
