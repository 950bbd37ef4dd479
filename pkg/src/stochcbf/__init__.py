"""Stochastic control barrier function safety filters and Monte Carlo verification."""

from .sde import (
    BLOWUP_LIMIT,
    ControlAffineSystem,
    IntegrationBlowupError,
    LinearSystem,
    Trajectory,
    brownian_increments,
    em_step,
    make_rng,
    simulate,
)
from .barriers import (
    AffineInputConstraint,
    BoundaryError,
    ClassKFamily,
    ClassKFunction,
    ReciprocalBarrier,
    SafetyFunction,
    Sense,
    clf_constraint,
    ito_drift,
    rcbf_constraint,
    zcbf_constraint,
)
from .high_degree import (
    AffineChain,
    NoRelativeDegreeError,
    build_affine_chain,
    hrd_constraint,
    ito_lift,
    membership_cbar,
    relative_degree,
)
from .estimator import (
    AffineKind,
    EkfState,
    EstimatorConfigError,
    ObservationModel,
    PairwiseDistanceKind,
    ShrunkSafety,
    UnsupportedSafetyError,
    calibrate_lambda_star,
    ekf_step,
    gamma_lti,
    riccati_step,
    shrink,
)
from .qp import (
    Fallback,
    QpProblem,
    QpResult,
    QpStatus,
    Table1Context,
    Table1Mode,
    TraceVariant,
    safety_filter_policy,
    solve_qp,
    table1_constraint,
)

__version__ = "0.1.0"
