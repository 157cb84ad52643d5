"""
 teamspill

 teamspill simulates and analyzes randomized experiments in which treated and
  control users play together in short-lived team sessions. Control players who
  shared a session with treated teammates are contaminated by spillover, so the
  usual treated-vs-control difference is biased. teamspill
     - simulates such experiments (assignment, matchmaking, outcomes)
     - counts each player's exposure to treated teammates
     - fits multinomial propensity models for the exposure level
     - estimates per-level and overall treatment effects with a
        normalized (Hajek) inverse-propensity estimator
     - evaluates the estimators by Monte Carlo against the known truth

 Dependencies:
    - Python 3.11 or later
    - numpy, scipy, pandas, scikit-learn, statsmodels

 To get started, try:
 ```python3
    import teamspill
    data = teamspill.simulate_experiment(teamspill.SimulationConfig.from_case('I', seed=1))
    help(teamspill.run_all_estimators)
 ```
 or run `teamspill --help`.
"""
from .basic import (
    TeamspillError as TeamspillError,
    ConfigError as ConfigError,
    InvalidDataError as InvalidDataError,
    UndefinedLevelError as UndefinedLevelError,
    StratificationError as StratificationError,
    EOFError as EOFError,
    SignedError as SignedError,
    Validation as Validation,
    )
from .domain import (
    GroupLabel as GroupLabel,
    PlayerRecord as PlayerRecord,
    GameSession as GameSession,
    ExposureCategory as ExposureCategory,
    ExperimentDataset as ExperimentDataset,
    count_exposures as count_exposures,
    classify_groups as classify_groups,
    truncate_exposure as truncate_exposure,
    )
from .simulator import (
    CasePreset as CasePreset,
    SimulationConfig as SimulationConfig,
    case_study_config as case_study_config,
    simulate_experiment as simulate_experiment,
    simulate_matching as simulate_matching,
    generate_outcomes as generate_outcomes,
    oracle_inclusion as oracle_inclusion,
    oracle_propensities as oracle_propensities,
    true_mu as true_mu,
    true_tau as true_tau,
    )
from .propensity import (
    ModelKind as ModelKind,
    PropensityFit as PropensityFit,
    PropensityTable as PropensityTable,
    fit_multinomial_linear as fit_multinomial_linear,
    fit_boosted_trees as fit_boosted_trees,
    fit_propensity as fit_propensity,
    predict_propensities as predict_propensities,
    cross_validate as cross_validate,
    stabilize_weights as stabilize_weights,
    )
from .estimators import (
    EstimatorKind as EstimatorKind,
    EstimatorSettings as EstimatorSettings,
    TauEstimate as TauEstimate,
    naive_overall as naive_overall,
    naive_per_m as naive_per_m,
    naive_without_control_mixed as naive_without_control_mixed,
    hajek_level as hajek_level,
    estimate_baseline as estimate_baseline,
    estimate_tau_m as estimate_tau_m,
    estimate_overall_tau as estimate_overall_tau,
    run_estimation as run_estimation,
    run_all_estimators as run_all_estimators,
    )
from .evaluation import (
    McConfig as McConfig,
    McSummary as McSummary,
    run_replication as run_replication,
    run_monte_carlo as run_monte_carlo,
    summarize_replicates as summarize_replicates,
    bias_comparison as bias_comparison,
    group_share_report as group_share_report,
    )
from .ingest import (
    load_dataset as load_dataset,
    write_dataset as write_dataset,
    )


__version__ = '0.1'
version = __version__
