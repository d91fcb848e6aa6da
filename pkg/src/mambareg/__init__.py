"""Desk-scale multi-modality deformable registration with selective
state-space sequence blocks, built on a self-contained autodiff engine."""

__version__ = "0.1.0"

from . import engine, fields, losses, metrics, networks, ssm, synthdata  # noqa: F401
