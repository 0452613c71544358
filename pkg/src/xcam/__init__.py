"""Class-discriminative saliency maps for small CNNs, with faithfulness
metrics and explanation-guided distillation, on a self-contained autodiff
engine."""

__version__ = "0.1.0"
