# Detector, box geometry, augmentation and teacher pseudo-labels

__version__ = "0.1.0"
__all__ = ["geometry", "detector", "augment", "pseudo_label"]
