"""Matrix balancing based interior point solvers for assignment-form optimal transport."""

__version__ = "0.1.0"

from .core import (
    DomainError, NumericalError, ShapeError, SupportError, TransportPlan, PairwiseCost,
    CgConfig, SchurOperator, apply_adjoint, apply_marginal, cg_solve, l2_cost, magic, reshape,
    schur_apply, unreshape,
)
from .support import (
    SupportSet, has_support, has_total_support, k_smallest_select, threshold_select, totalize,
)
from .balancing import (
    BalanceConfig, BalanceReport, BalancerState, PathSchedule, balance, balance_error,
    balanced_matrix, kr_balance, lb_balance, ne_balance, sk_balance, stabilized_path,
)
from .ipm import (
    CenteringConfig, DualPotential, SolveReport, c_transform_potential, duality_diagnostics,
    ipmb_solve, newton_center, snne_solve, snne_sparse_solve, try_early_termination,
)
from .registration import (
    RegistrationConfig, RigidTransform, register_rigid, register_rigid_entropic, svd_update,
    warm_start_coarse_to_fine,
)
