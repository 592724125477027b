"""Diagnostic evaluation toolkit for three-class A-EGJA / E-EGJA / control
predictions: confusion metrics with Wald intervals, ROC/PR curves, paired
hypothesis tests, reader-study pooling, and a small feature-fusion head
trainable on synthetic data.
"""

from .data import (
    CLASS_ORDER,
    ClassLabel,
    Dataset,
    FoldSpec,
    ParseError,
    PredictionRecord,
    ReaderRecord,
    SynthSpec,
    argmax_severity,
    fold_datasets,
    kfold_split,
    parse_label,
    parse_predictions,
    parse_readers,
    serialize_predictions,
    serialize_readers,
    subgroup,
    summarize,
    synth_generate,
)
from .metrics import (
    BinaryStats,
    ConfusionMatrix,
    CurveSeries,
    MetricReport,
    OverallStats,
    RateCI,
    class_stats,
    cohen_kappa,
    compute_report,
    confusion_matrix,
    macro_stats,
    micro_curves,
    pr_points,
    rate_ci,
    roc_points,
    wald_ci,
)
from .stats import (
    TestResult,
    bootstrap_auc_variance,
    bowker_test,
    chi2_sf,
    delong_auc_cov,
    delong_auc_variance,
    delong_test,
    delong_test_micro,
    kappa_test,
    midranks,
    std_normal_cdf,
)
from .aggregate import (
    evaluate,
    group_vs_group_kappa,
    inverse_count_weights,
    join_predictions,
    model_vs_reader_tests,
    patient_max_aggregate,
    patient_mean_aggregate,
    per_reader_points,
    pool_readers,
    reader_group_report,
)
from .fusion import (
    AdamState,
    DivergenceError,
    FeatureBundle,
    HeadConfig,
    HeadParams,
    FULL_SCALE_SHAPE,
    TrainSpec,
    adam_step,
    backward,
    grad_check,
    head_forward,
    init_head,
    params_from_json,
    params_to_json,
    train_toy,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_ORDER",
    "ClassLabel",
    "Dataset",
    "FoldSpec",
    "ParseError",
    "PredictionRecord",
    "ReaderRecord",
    "SynthSpec",
    "argmax_severity",
    "fold_datasets",
    "kfold_split",
    "parse_label",
    "parse_predictions",
    "parse_readers",
    "serialize_predictions",
    "serialize_readers",
    "subgroup",
    "summarize",
    "synth_generate",
    "BinaryStats",
    "ConfusionMatrix",
    "CurveSeries",
    "MetricReport",
    "OverallStats",
    "RateCI",
    "class_stats",
    "cohen_kappa",
    "compute_report",
    "confusion_matrix",
    "macro_stats",
    "micro_curves",
    "pr_points",
    "rate_ci",
    "roc_points",
    "wald_ci",
    "TestResult",
    "bootstrap_auc_variance",
    "bowker_test",
    "chi2_sf",
    "delong_auc_cov",
    "delong_auc_variance",
    "delong_test",
    "delong_test_micro",
    "kappa_test",
    "midranks",
    "std_normal_cdf",
    "evaluate",
    "group_vs_group_kappa",
    "inverse_count_weights",
    "join_predictions",
    "model_vs_reader_tests",
    "patient_max_aggregate",
    "patient_mean_aggregate",
    "per_reader_points",
    "pool_readers",
    "reader_group_report",
    "AdamState",
    "DivergenceError",
    "FeatureBundle",
    "HeadConfig",
    "HeadParams",
    "FULL_SCALE_SHAPE",
    "TrainSpec",
    "adam_step",
    "backward",
    "grad_check",
    "head_forward",
    "init_head",
    "params_from_json",
    "params_to_json",
    "train_toy",
    "__version__",
]
