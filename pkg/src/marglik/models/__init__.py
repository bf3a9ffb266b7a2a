"""Built-in hierarchical models and dataset I/O."""

from .base import Dataset, HierarchicalModel, SubjectData
from .lba import LBAModel, huang_wand_logpdf, lba_density
from .logit import GMNLModel, MixedLogitModel, half_cauchy_logpdf
from .normal import NormalNormalModel, conjugate_log_marginal

MODEL_NAMES = ("normal_normal", "mixl", "gmnl", "lba_I", "lba_II", "lba_III", "lba_IV")


def build_model(name: str, **hyper) -> HierarchicalModel:
    """Construct a built-in model from its registry name and hyperparameters."""
    if name == "normal_normal":
        return NormalNormalModel(**hyper)
    if name == "mixl":
        return MixedLogitModel(**hyper)
    if name == "gmnl":
        return GMNLModel(**hyper)
    if name.startswith("lba_"):
        return LBAModel(variant=name[4:], **hyper)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


__all__ = [
    "Dataset", "SubjectData", "HierarchicalModel", "NormalNormalModel", "MixedLogitModel",
    "GMNLModel", "LBAModel", "build_model", "conjugate_log_marginal", "lba_density",
    "huang_wand_logpdf", "half_cauchy_logpdf", "MODEL_NAMES",
]
