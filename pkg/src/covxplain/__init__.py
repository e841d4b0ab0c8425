"""Second-order explanations of ensemble predictive uncertainty."""

from .ensemble import EnsembleModel, coefficients, multidim_variance, predict_all
from .first_order import (
    EnsembleVariance,
    Explanation,
    LrpConfig,
    MemberOutput,
    gradient_x_input,
    integrated_gradients,
    lrp,
    sensitivity,
    shapley_exact,
    shapley_value_sampling,
    variance_head_explanation,
)
from .nn import DenseLayer, DropoutPlan, Mlp, TrainConfig, forward, input_gradient, train
from .second_order import (
    Backend,
    SecondOrderExplanation,
    SummarizedExplanation,
    cov_explanation,
    explain_uncertainty,
    explain_uncertainty_multidim,
    product_attribution,
    summarize,
)

__version__ = "0.1.0"
