"""Variational Bayes for models whose log-likelihood is expensive or intractable.

The variational family is a one-factor Gaussian fitted by natural-gradient
stochastic optimization.  Likelihood gradients are replaced by unbiased
estimators built from data subsampling with Taylor control variates and,
for latent-variable models, importance sampling.
"""

from .models import (
    ConjugateGaussianModel,
    IntractableContribution,
    LogisticRegressionModel,
    Model,
    NormalNormalPanelModel,
    PanelLogisticModel,
)
from .natgrad import ConditioningError, fisher_matrix, natural_gradient
from .variational import PriorSpec, VariationalParams

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "ConjugateGaussianModel",
    "IntractableContribution",
    "LogisticRegressionModel",
    "Model",
    "NormalNormalPanelModel",
    "PanelLogisticModel",
    "PriorSpec",
    "VariationalParams",
    "fisher_matrix",
    "natural_gradient",
]
