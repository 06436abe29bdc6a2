"""Active anomaly detection with a transferable learned query policy.

Train a query-selection policy on labeled datasets, then apply it unchanged
to new data: each round it picks one instance for the analyst, folds the
answer back into the features, and tries to maximize anomalies discovered
within the query budget.
"""

from .data import Label, RawDataset, StandardizedDataset, load_csv, standardize, shuffle
from .detector import IsolationForest, fit as fit_detector, score_all
from .engine import (
    QuerySession,
    next_query,
    run_simulated,
    session_open,
    submit_label,
    unsupervised_curve,
)
from .features import MetaFeatures, QueryState, extract
from .policy import PolicyModel, PpoHyper, init_model, load_model, save_model
from .trainer import StreamEnv, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Label",
    "RawDataset",
    "StandardizedDataset",
    "load_csv",
    "standardize",
    "shuffle",
    "IsolationForest",
    "fit_detector",
    "score_all",
    "QuerySession",
    "session_open",
    "next_query",
    "submit_label",
    "run_simulated",
    "unsupervised_curve",
    "MetaFeatures",
    "QueryState",
    "extract",
    "PolicyModel",
    "PpoHyper",
    "init_model",
    "save_model",
    "load_model",
    "StreamEnv",
    "TrainResult",
    "train",
    "__version__",
]
