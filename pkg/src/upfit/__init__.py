"""Body model fitting from 2D keypoints and silhouettes, plus direct prediction."""

__version__ = "0.1.0"

from . import body_model, direct_predict, fitting, labelgen, metrics, render

__all__ = [
    "body_model",
    "render",
    "fitting",
    "labelgen",
    "direct_predict",
    "metrics",
    "__version__",
]
