"""Reinforcement-learned, patient-specific modality selection and fusion."""

__version__ = "0.1.0"
