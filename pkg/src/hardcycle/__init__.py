"""Desk-scale demosaicing lab: artifact metrics, hard-patch mining,
correlation-based sub-category selection and cyclic training."""

__version__ = "0.1.0"
