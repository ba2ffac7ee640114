"""Teacher-student distillation toolkit for binary lesion segmentation."""

__version__ = "0.1.0"
