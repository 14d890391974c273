"""Delayed stochastic approximation under Markovian sampling.

Library surface: validated finite Markov observation chains with exact
mixing-time computation, TD / Q-learning / Markovian-SGD operator instances
with exact mean fields and fixed points, delay schedules, the four update
engines (non-delayed, constant delay, time-varying delay, delay-adaptive),
ensemble metrics with exponential rate fitting, and numerical checks of the
finite-time bounds. The ``delaysa`` CLI drives experiments from JSON configs.
"""
from .chain import (
    MarkovChain,
    MixingReport,
    StationaryDistribution,
    build_chain,
    chain_from_config,
    default_theta_grid,
    mixing_report,
    operator_mixing_time,
    random_ergodic,
    sample_path,
    stationary,
    tv_mixing_time,
)
from .engine import (
    ConstantDelay,
    DelayAdaptive,
    HistoryBuffer,
    ManualStep,
    NonDelayed,
    RunConfig,
    RunTrace,
    StepSizeInfo,
    TheoremStep,
    TimeVarying,
    resolve_step_size,
    run,
    run_constant_delay,
    run_delay_adaptive,
    run_ensemble,
    run_non_delayed,
    run_time_varying,
    step_non_delayed,
)
from .metrics import (
    EnsembleResult,
    RateFit,
    WeightScheme,
    ensemble_mse,
    fit_rate,
    select_weighted_iterate,
    update_count_check,
    update_fraction,
)
from .operators import (
    OperatorConstants,
    QObservation,
    QProblem,
    SgdObservation,
    SgdProblem,
    TDObservation,
    TDProblem,
    audit_constants,
    make_q,
    make_sgd,
    make_td,
    orthonormal_features,
    problem_from_config,
)
from .schedule import (
    BurstySchedule,
    ConstantSchedule,
    DelayStats,
    TraceSchedule,
    UniformSchedule,
    generate,
    next_delay,
    stats,
)
from .verify import (
    BoundCheck,
    check_adaptive_drift,
    check_drift_lemma,
    check_theorem_bound,
    check_uniform_boundedness,
    windowed_max,
)

__version__ = "0.1.0"
