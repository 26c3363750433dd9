"""Joint PMF estimation as a low-rank nonnegative tensor.

The joint distribution of N categorical variables is modeled as a mixture
of product distributions (equivalently, a nonnegative canonical polyadic
decomposition of the probability tensor) and fit with variational Bayes.
Sparsity-promoting Dirichlet priors on the mixture weights let the number
of components be read off after a single training run.  A deterministic
coordinate-ascent fit (``vb_fit``) and a minibatch stochastic fit
(``svb_fit``) are provided, along with exact evaluation metrics and a CLI.
"""

__version__ = "0.1.0"

from .model import (
    CpdModel,
    Dataset,
    cpd_element,
    kruskal_max_rank,
    load_model,
    observed_log_likelihood,
    sample_dataset,
    sample_model,
    save_model,
)
from .vb import FitConfig, FitResult, vb_fit
from .svi import SviConfig, svb_fit
from .evaluate import MetricReport, kld_full, mean_nll, predict_entry, rmse_mae

__all__ = [
    "__version__",
    "CpdModel",
    "Dataset",
    "FitConfig",
    "FitResult",
    "SviConfig",
    "MetricReport",
    "cpd_element",
    "observed_log_likelihood",
    "sample_model",
    "sample_dataset",
    "kruskal_max_rank",
    "save_model",
    "load_model",
    "vb_fit",
    "svb_fit",
    "kld_full",
    "mean_nll",
    "predict_entry",
    "rmse_mae",
]
