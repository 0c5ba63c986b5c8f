"""Detect classifier failures by the density of their features under a GMM."""

from featdensity.classifier import MlpClassifier, TrainConfig, init_mlp, train
from featdensity.data import LabeledDataset, SplitSpec, UnlabeledDataset, gen_blobs, gen_ood, load_csv, split
from featdensity.errors import NumericError, ParseError
from featdensity.gmm import EmConfig, GmmModel, fit_em, log_density

__version__ = "0.1.0"

__all__ = [
    "EmConfig",
    "GmmModel",
    "LabeledDataset",
    "MlpClassifier",
    "NumericError",
    "ParseError",
    "SplitSpec",
    "TrainConfig",
    "UnlabeledDataset",
    "fit_em",
    "gen_blobs",
    "gen_ood",
    "init_mlp",
    "load_csv",
    "log_density",
    "split",
    "train",
]
