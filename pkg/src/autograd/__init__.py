# Reverse-mode autodiff substrate for the detector and its losses

__version__ = "0.1.0"
__all__ = ["tensor", "ops", "params", "optim", "gradcheck"]
