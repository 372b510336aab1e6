"""Post-hoc OOD detection from precomputed network features.

Fourteen detection statistics over dumped features/logits, a
Gaussian-mixture generative ensemble of their score vectors, and an
AUROC harness covering distribution-shift and error-detection protocols
across tagged shift types.
"""

__version__ = "0.1.0"

from .ensemble import GmmModel, gmm_fit, gmm_loglik
from .evaluate import auroc
from .ingest import DatasetBundle, load_dataset
from .scores import BUILTIN_ENSEMBLES, EnsembleDefinition, score_bundle
from .stats import FittedStats, fit_stats

__all__ = [
    "BUILTIN_ENSEMBLES",
    "DatasetBundle",
    "EnsembleDefinition",
    "FittedStats",
    "GmmModel",
    "auroc",
    "fit_stats",
    "gmm_fit",
    "gmm_loglik",
    "load_dataset",
    "score_bundle",
    "__version__",
]
