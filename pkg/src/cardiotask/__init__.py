"""Multi-task cardiac cine-MRI pipeline: segmentation, diagnosis and clinical indices."""

__version__ = "0.1.0"
