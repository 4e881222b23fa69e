"""Generalized few-shot segmentation: fine-tuning baselines and evaluation."""

try:
    from ._gfsseg import *  # noqa: F401,F403  (wheel layout: extension inside the package)
except ImportError:
    from _gfsseg import *  # noqa: F401,F403  (in-tree build: extension on PYTHONPATH)

__all__ = [
    "DomainError",
    "ConfigError",
    "IngestionError",
    "NumericError",
    "EvalError",
    "DatasetSpec",
    "FoldSpec",
    "Sample",
    "Dataset",
    "Episode",
    "NetworkConfig",
    "Network",
    "Confusion",
    "pascal_fold_classes",
    "coco_fold_classes",
    "make_fold",
    "generate_synthetic_dataset",
    "load_dataset",
    "save_dataset",
    "sample_episode",
    "build_network",
    "forward",
    "predict",
    "expand_classifier_outputs",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_fraction",
    "masked_cross_entropy",
    "triplet_distance",
    "triplet_loss",
    "evaluate",
    "gfsseg_pascal_reference",
    "run_experiment_json",
    "run_experiment_file",
    "render_report",
]
