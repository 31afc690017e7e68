"""Satellite scene classification from CNN outputs and acquisition metadata.

The package covers everything downstream of the convolutional backbones:
deterministic image preparation (box adjustment, crop, bilinear resize,
dihedral augmentation), the 27 metadata features and their normalization, a
from-scratch fusion network joining 63 CNN class probabilities with those
features, unweighted model ensembling and temporal sequence aggregation,
evaluation (confusion matrix, per-class precision/recall/F1, weighted-F1
competition score) with the corpus filtering/splitting rules, a reproducible
synthetic dataset generator with an independent brute-force oracle, and a
CLI wiring the pipeline end to end.
"""

__version__ = "0.1.0"

from .errors import (
    DataError,
    DimensionMismatchError,
    NumericalError,
    ParseError,
    SatFusionError,
    SchemaError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
    WeightsFormatError,
)
from .rng import ALGORITHM_ID, Pcg32
from .metadata import (
    FALSE_DETECTION_INDEX,
    N_CLASSES,
    BoundingBox,
    ClassRegistry,
    ImageMetadata,
    default_registry,
    load_class_registry,
    parse_metadata,
    read_metadata_jsonl,
    split_utm,
    write_metadata_jsonl,
)
from .features import (
    DEFAULT_RANGES,
    FEATURE_NAMES,
    N_FEATURES,
    MetadataFeatureExtractor,
    NormalizationSpec,
    RawFeatures,
    extract_raw_features,
    local_solar_hour,
    normalize,
    read_features_csv,
    utm_to_direction_components,
    week_day,
    write_features_csv,
    zone_central_meridian,
)
from .image import (
    N_AUGMENTS,
    PrepPlan,
    Raster,
    apply_prep,
    augment,
    crop,
    enlarge_box,
    plan_prep,
    read_raster,
    resize,
    square_box,
    write_raster,
)
from .fusion import (
    DEFAULT_DROPOUT,
    DEFAULT_HIDDEN,
    N_INPUTS,
    AdamState,
    EpochStats,
    FusionNet,
    FusionNetClassifier,
    TrainConfig,
    apply_dropout,
    cross_entropy,
    forward,
    gradient_check,
    init_network,
    load_weights,
    loss,
    save_weights,
    softmax,
    train,
    train_step,
    write_history_csv,
)
from .ensemble import (
    PredictionRecord,
    SequenceRecord,
    aggregate_sequence,
    average_predictions,
    classify,
    classify_matrix,
    classify_with_threshold,
    ensemble_by_image,
    group_into_sequences,
    read_predictions_jsonl,
    write_classification_csv,
    write_predictions_jsonl,
)
from .evaluation import (
    CLOUD_COVER_LIMIT_PCT,
    MIN_BOX_DIM_PX,
    EvalReport,
    accuracy,
    confusion_matrix,
    evaluate_confusion,
    evaluate_pairs,
    filter_training_records,
    format_report_text,
    macro_f1,
    per_class_metrics,
    read_labels_csv,
    score,
    split_false_detections,
    weighted_f1,
    write_confusion_csv,
    write_labels_csv,
    write_report_json,
)
from .synth import (
    BruteForceResult,
    MetadataSignal,
    SynthConfig,
    SynthDataset,
    SynthRecord,
    brute_force_pipeline,
    generate_dataset,
    write_dataset,
)

__all__ = [
    "__version__",
    # errors
    "SatFusionError", "ParseError", "SchemaError", "ValidationError", "DataError",
    "WeightsFormatError", "VersionMismatchError", "DimensionMismatchError",
    "TruncatedFileError", "NumericalError",
    # rng
    "Pcg32", "ALGORITHM_ID",
    # metadata
    "N_CLASSES", "FALSE_DETECTION_INDEX", "BoundingBox", "ImageMetadata",
    "ClassRegistry", "parse_metadata", "read_metadata_jsonl", "write_metadata_jsonl",
    "split_utm", "load_class_registry", "default_registry",
    # features
    "N_FEATURES", "FEATURE_NAMES", "DEFAULT_RANGES", "RawFeatures",
    "extract_raw_features", "NormalizationSpec", "normalize",
    "MetadataFeatureExtractor", "zone_central_meridian", "utm_to_direction_components",
    "local_solar_hour", "week_day", "read_features_csv", "write_features_csv",
    # image
    "Raster", "N_AUGMENTS", "enlarge_box", "square_box", "crop", "resize", "augment",
    "PrepPlan", "plan_prep", "apply_prep", "read_raster", "write_raster",
    # fusion
    "N_INPUTS", "DEFAULT_HIDDEN", "DEFAULT_DROPOUT", "FusionNet", "TrainConfig",
    "AdamState", "EpochStats", "init_network", "softmax", "apply_dropout", "forward",
    "loss", "cross_entropy", "train_step", "train", "gradient_check", "save_weights",
    "load_weights", "write_history_csv", "FusionNetClassifier",
    # ensemble
    "PredictionRecord", "SequenceRecord", "average_predictions", "classify",
    "classify_with_threshold", "classify_matrix", "aggregate_sequence",
    "ensemble_by_image", "group_into_sequences", "read_predictions_jsonl",
    "write_predictions_jsonl", "write_classification_csv",
    # evaluation
    "CLOUD_COVER_LIMIT_PCT", "MIN_BOX_DIM_PX", "EvalReport", "confusion_matrix",
    "per_class_metrics", "accuracy", "macro_f1", "weighted_f1", "score",
    "evaluate_pairs", "evaluate_confusion", "filter_training_records",
    "split_false_detections", "read_labels_csv", "write_labels_csv",
    "write_report_json", "format_report_text", "write_confusion_csv",
    # synth
    "SynthConfig", "MetadataSignal", "SynthRecord", "SynthDataset",
    "generate_dataset", "write_dataset", "brute_force_pipeline", "BruteForceResult",
]
