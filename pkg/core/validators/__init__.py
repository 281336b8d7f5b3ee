"""
Core Validators Module

Import all validators for easy access.
"""

from .validators import (
    # Array Validators
    validate_finite,
    validate_shape,
    validate_rigid_transform,
    validate_intrinsics,
    validate_label_array,

    # Scalar Validators
    validate_positive,
    validate_non_negative,
    validate_range,
    validate_fraction,
    validate_choice,
)

__all__ = [
    # Array Validators
    'validate_finite',
    'validate_shape',
    'validate_rigid_transform',
    'validate_intrinsics',
    'validate_label_array',

    # Scalar Validators
    'validate_positive',
    'validate_non_negative',
    'validate_range',
    'validate_fraction',
    'validate_choice',
]
