"""Certified interior-point BoxQP solver and Koopman MPC pipeline for the KdV equation."""

__version__ = "0.1.0"

from .boxqp import (  # noqa: E402
    BoxQpProblem,
    DenseHessian,
    IpmIterate,
    KoopmanHessian,
    NumericalBreakdown,
    SolveReport,
    certified_iteration_bound,
    initialize,
    neighborhood_residual,
    newton_direction,
    newton_direction_structured,
    predictor_step_size,
    solve,
)
from .condensing import (  # noqa: E402
    KoopmanBoxQp,
    NmpcSpec,
    PredictionStack,
    build_boxqp,
    build_general_qp,
    build_prediction_stack,
    build_rbar,
)
from .kdv import KdvConfig, TrajectoryLog, closed_loop, generate_dataset, kdv_step, sinusoidal_reference  # noqa: E402
from .koopman import KoopmanModel, LiftSpec, SnapshotSet, fit_edmd, lift, predict, sample_rbf_centers  # noqa: E402
