"""Longitudinal chest-CT self-supervised pretraining and pathology quantification."""

__version__ = "0.1.0"
