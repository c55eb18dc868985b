"""Simulators and a discrete-time DMFT solver for multi-pass SGD.

The package has three layers: finite-size simulators of the training
dynamics (``hidim``), Monte Carlo machinery for the limiting processes and
their correlation/response kernels (``mc``, ``sampling``), and closed-form
kernel maps plus the self-consistent solver (``analytic``, ``fixedpoint``).
"""

from .analytic import LinearAux, ResolventKernel, linear_map, ridge_map, volterra_resolvent
from .errors import (
    ConfigError,
    DivergenceError,
    DmftSgdError,
    InvalidInputError,
    KernelNotPSDError,
    NonConvergenceError,
    StructuralError,
    UnsupportedModelError,
)
from .fixedpoint import (
    ConvergenceReport,
    SolveOptions,
    free_theta_kernels,
    kernel_distance,
    predict_observables,
    solve,
    theta_distance,
)
from .grid import TimeGrid
from .hidim import (
    SimConfig,
    generate_dataset,
    run_gradient_flow,
    run_one_pass_sgd,
    run_sgd,
    run_sme,
    simulate,
)
from .kernels import (
    DMFTState,
    ThetaKernels,
    TwoTimeKernel,
    XiKernels,
    load_kernel,
    load_state,
    psd_project,
    save_kernel,
    save_state,
)
from .mc import (
    TrajectorySample,
    estimate_theta_kernels,
    estimate_xi_kernels,
    sample_theta_trajectory,
    sample_xi_trajectory,
)
from .model import (
    CustomTeacher,
    HuberLoss,
    InitLaw,
    LinearActivation,
    ModelSpec,
    NoiseLaw,
    Ridge,
    SinActivation,
    SquaredLoss,
    TanhActivation,
    eval_Dg,
    eval_f,
    eval_f_jacobians,
    eval_g,
)
from .onepass import one_pass_overlap_ode
from .sampling import derive_seeds, derived_seed, sample_driver, sample_gp
from .traces import ObservableTrace, compare_traces, read_trace_csv, write_trace_csv

__version__ = "0.1.0"
