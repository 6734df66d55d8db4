"""Physics-informed network training with Stein-estimator residuals,
tensor-train layers, and block-quantized integer arithmetic."""

__version__ = "0.1.0"
