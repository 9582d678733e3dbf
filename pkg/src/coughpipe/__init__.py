"""Cough classification pipeline: preprocessing, features, SMOTE, numpy networks, nested CV."""

__version__ = "0.1.0"
