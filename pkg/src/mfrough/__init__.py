"""Mean-field rough differential equations driven by Gaussian rough paths.

Particle approximations of ``dX = F(X, law(X)) dW`` built on exact
piecewise-linear lifts, p-variation controls, controlled-path calculus with
Lions derivatives, and explicit/Picard solvers.
"""
from .controlled import (
    ControlledPath,
    TripleNorm,
    compose_field,
    germ_diagnostics,
    lions_derivative_check,
    rough_integral,
    triple_norm,
)
from .fields import BUILTINS, MeanFieldField, make_field
from .rough_setup import (
    DriverSpec,
    RoughSetup,
    build_setup,
    chen_residual,
    covariance_rho_variation_check,
    lift_piecewise_linear,
    sample_gaussian_driver,
    setup_from_paths,
)
from .solver import (
    SolveConfig,
    Solution,
    WindowPolicy,
    convergence_study,
    explicit_step_solve,
    gamma_map,
    mckean_vlasov_oracle,
    picard_solve,
    solve,
)
from .variation import (
    Control,
    Ensemble,
    GridPath,
    TimeGrid,
    TwoIndexArray,
    accumulation_times,
    build_control,
    build_control_v,
    build_control_w,
    local_accumulation_N,
    lq_p_variation,
    p_variation,
)

__version__ = "0.1.0"
