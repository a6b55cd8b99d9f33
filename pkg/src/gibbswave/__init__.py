"""
Pseudospectral simulation of a stochastically driven cubic Klein-Gordon
field on the circle coupled to heat reservoirs, with Gibbs-measure
sampling and reproducible experiment drivers.
"""

__version__ = "0.1.0"

from .spectral_field import (
    FourierField,
    SystemState,
    cubic,
    from_physical,
    inner_product,
    lp_norm,
    project_high,
    project_low,
    sobolev_norm,
    to_physical,
)
from .linear_system import (
    CouplingConfig,
    LinearPropagator,
    assemble_generator,
    build_propagator,
    check_semigroup_bound,
    step_linear,
)
from .dynamics import (
    BlowUpError,
    ContractionError,
    SplittingIntegrator,
    bourgain_functional,
    energy,
    picard_solve,
    run_trajectory,
    simulate_pair,
    step_nonlinear,
    verify_I_N_drift,
)
from .measures import (
    GibbsSampler,
    estimate_Z,
    quartic_action,
    sample_gibbs,
    sample_nu0,
    tightness_report,
)
from .config import ConfigError, ExperimentConfig
from .report import EnsembleReport
from .experiments import run_experiment
