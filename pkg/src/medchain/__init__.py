"""Longitudinal mediation analysis with Dirichlet-process-mixture dynamic models."""

from __future__ import annotations

__version__ = "0.1.0"
