"""rcdlab: entropy, optimal transport, Dirichlet forms and heat flows on
finite metric measure spaces, with certified solvers and inequality checks."""

from .mmspace import (
    FiniteMMSpace,
    ValidationReport,
    check_growth_condition,
    load_space,
    make_model_space,
    product_space,
    save_space,
    validate_space,
)
from .measures import (
    ProbMeasure,
    TiltedReference,
    bump_measure,
    dirac,
    excess_mass,
    entropy_monotone_limit_check,
    fisher_information,
    gaussian_measure,
    measure_from_density,
    relative_entropy,
    tilt_reference,
    uniform_measure,
)
from .ot import (
    KantorovichPair,
    SlopeDiagnostics,
    TransportPlan,
    c_transform,
    check_slackness,
    kantorovich_potentials,
    potential_stability_probe,
    slope_diagnostics,
    w2,
    w2_distance,
)
from .geodesy import (
    DiscreteCurvePlan,
    GeodesicTrace,
    IntermediateSpec,
    build_good_geodesic,
    cd_convexity_check,
    cd_residual,
    combine_restricted,
    curve_plan_from_trace,
    epsilon_min,
    intermediate_entropy_min,
    length_band_split,
    metric_brenier_probe,
)
from .dirichlet import (
    CarreDuChamp,
    DirichletForm,
    calibrated_segment,
    cheeger_energy,
    chain_rule_check,
    dirichlet_form,
    energy,
    essential_bound_check,
    gamma,
    intrinsic_metric,
    laplacian,
    locality_check,
    mod2,
    path_step_lengths,
    product_form,
    transfer_identity_check,
    weighted_form,
)
from .heat import (
    FlowTrace,
    HeatKernel,
    bakry_emery_check,
    contraction_check,
    heat_kernel,
    identification_check,
    jko_flow,
    lipschitz_regularization_check,
    log_sobolev_check,
    semigroup_apply,
    semigroup_flow,
    tensorization_check,
)
from .evi import (
    InequalityReport,
    dw2_derivative_check,
    ede_check,
    entropy_inequality_check,
    evi_check,
    rcd_verify,
)
from .solvers import InfeasibleError, SolverError

__version__ = "0.1.0"
