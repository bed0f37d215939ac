"""Federated adversarial contrastive knowledge distillation for account
classification, on a small numpy autodiff core."""

__version__ = "0.1.0"
