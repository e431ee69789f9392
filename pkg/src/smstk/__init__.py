"""Toolkit for free-floating space manipulator systems.

Momentum-conserving multibody simulation, SVD-based coupling analysis,
coupling-informed trajectory planning and sliding-mode tracking control.
"""

from .model import BodyParams, SmsModel, SmsState, default_initial_state, default_model

__all__ = [
    "BodyParams",
    "SmsModel",
    "SmsState",
    "default_model",
    "default_initial_state",
]
