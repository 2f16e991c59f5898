"""Bayesian motor unit number estimation from stimulus-response curves.

A fully adapted particle filter tracks, per candidate unit count, conjugate
posteriors of the force process and grid posteriors of each unit's
excitability curve, producing an unbiased-in-expectation evidence estimate
per unit count. A stability protocol escalates particle and grid resolution
until the evidence is reproducible, and a post-run orthant correction imposes
a physiological lower bound on twitch forces before comparing unit counts.
"""

__version__ = "0.1.0"

from .conjugate import (
    BaselineStats,
    UnitStats,
    baseline_update,
    firing_update,
    init_baseline_stats,
    init_unit_stats,
    observation_predictive_logdensity,
    set_nu_prior,
)
from .engine import (
    Diagnostics,
    Particle,
    RunResult,
    assimilate_baseline_phase,
    assimilate_supramaximal,
    combo_log_tables,
    particle_weight,
    propagate,
    smc_run,
)
from .errors import (
    AnnihilatedPosteriorError,
    NumericalError,
    ResourceCapError,
    SmcMuneError,
    ValidationError,
)
from .grid import (
    EMPTY_KEY,
    GridCache,
    GridPosterior,
    Lattice,
    child_key,
    grid_posterior_summary,
    grid_update,
    init_grid,
    trapezium_integral,
    unit_fire_predictive,
)
from .model import (
    ModelConfig,
    StimulusResponseSeries,
    cv_of_excitability,
    excitability_prior_logdensity,
    excitability_prob,
    excitability_slope_at_median,
    get_curve,
    model_prior,
    reorder_series,
)
from .orthant import OrthantQuery, student_t_orthant
from .postprocess import (
    IntervalSummary,
    LevelRow,
    ParameterReport,
    UnitSummary,
    mixture_fire_curve,
    mixture_response_density,
    modal_firing_by_level,
    posterior_mixture_summaries,
    posterior_orthant,
    prior_orthant_log,
    recalibrate_log_ml,
    unit_display_order,
)
from .resampling import multinomial_resample, residual_systematic_resample
from .selection import (
    SelectionResult,
    StabilityConfig,
    StabilityRecord,
    hpcs,
    run_with_stability,
    select,
)
from .simulate import (
    SimulatedLatents,
    StimulusDesign,
    TrueSystem,
    detect_alternation,
    simulate_dataset,
    simulate_params,
)
from .oracle import OracleLimits, enumerate_path_logs, exact_log_ml
from .dataio import (
    dump_grid_csv,
    load_config,
    load_series_csv,
    parse_config_text,
    read_json,
    save_series_csv,
    write_json,
)

__all__ = [
    "__version__",
    # errors
    "SmcMuneError",
    "ValidationError",
    "NumericalError",
    "AnnihilatedPosteriorError",
    "ResourceCapError",
    # model
    "ModelConfig",
    "StimulusResponseSeries",
    "reorder_series",
    "get_curve",
    "excitability_prob",
    "excitability_slope_at_median",
    "cv_of_excitability",
    "model_prior",
    "excitability_prior_logdensity",
    # conjugate
    "BaselineStats",
    "UnitStats",
    "init_baseline_stats",
    "baseline_update",
    "set_nu_prior",
    "init_unit_stats",
    "firing_update",
    "observation_predictive_logdensity",
    # grid
    "EMPTY_KEY",
    "child_key",
    "Lattice",
    "GridPosterior",
    "GridCache",
    "init_grid",
    "grid_update",
    "unit_fire_predictive",
    "trapezium_integral",
    "grid_posterior_summary",
    # resampling
    "residual_systematic_resample",
    "multinomial_resample",
    # engine
    "Particle",
    "Diagnostics",
    "RunResult",
    "assimilate_baseline_phase",
    "particle_weight",
    "combo_log_tables",
    "propagate",
    "assimilate_supramaximal",
    "smc_run",
    # orthant
    "OrthantQuery",
    "student_t_orthant",
    # postprocess
    "IntervalSummary",
    "UnitSummary",
    "ParameterReport",
    "LevelRow",
    "prior_orthant_log",
    "posterior_orthant",
    "recalibrate_log_ml",
    "posterior_mixture_summaries",
    "modal_firing_by_level",
    "unit_display_order",
    "mixture_fire_curve",
    "mixture_response_density",
    # selection
    "StabilityConfig",
    "StabilityRecord",
    "SelectionResult",
    "run_with_stability",
    "select",
    "hpcs",
    # simulate
    "TrueSystem",
    "StimulusDesign",
    "SimulatedLatents",
    "simulate_params",
    "simulate_dataset",
    "detect_alternation",
    # oracle
    "OracleLimits",
    "exact_log_ml",
    "enumerate_path_logs",
    # dataio
    "load_series_csv",
    "save_series_csv",
    "dump_grid_csv",
    "load_config",
    "parse_config_text",
    "write_json",
    "read_json",
]
