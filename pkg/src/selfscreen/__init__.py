"""Depression-anxiety screening from VLM facial-expression descriptions."""

from selfscreen.data import (
    Dataset,
    Label,
    Phq4Response,
    Sample,
    dataset_stats,
    label_from_score,
    load_dataset,
    save_dataset,
    score_phq4,
)
from selfscreen.errors import SelfscreenError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Label",
    "Phq4Response",
    "Sample",
    "SelfscreenError",
    "ValidationError",
    "dataset_stats",
    "label_from_score",
    "load_dataset",
    "save_dataset",
    "score_phq4",
]
