"""
Numeric validators

Reusable validators for calibration matrices, poses, arrays and scalar
parameters. Each validator raises ``django.core.exceptions.ValidationError``
with a stable ``code``.
"""

import numpy as np
from django.core.exceptions import ValidationError
from django.utils.translation import gettext_lazy as _


# ============================================================================
# ARRAY VALIDATORS
# ============================================================================

def validate_finite(value, name='array'):
    """Validate that every entry of an array is finite."""
    array = np.asarray(value)
    if array.size and not np.all(np.isfinite(array)):
        raise ValidationError(
            _('%(name)s contains non-finite values.'),
            params={'name': name},
            code='not_finite'
        )


def validate_shape(*shape, name='array'):
    """
    Validate array shape. ``None`` matches any size along that axis.

    Usage:
        validate_shape(None, 3, name='coords')(coords)
    """
    def validator(value):
        array = np.asarray(value)
        if array.ndim != len(shape) or any(
            expected is not None and actual != expected
            for expected, actual in zip(shape, array.shape)
        ):
            raise ValidationError(
                _('%(name)s must have shape %(expected)s, got %(actual)s.'),
                params={'name': name, 'expected': shape, 'actual': array.shape},
                code='bad_shape'
            )
    return validator


def validate_rigid_transform(tolerance=1e-6):
    """
    Validate a 4x4 rigid transform: orthonormal rotation block with
    determinant +1 and a [0, 0, 0, 1] bottom row.

    Usage:
        validate_rigid_transform(tolerance=1e-9)(pose)
    """
    def validator(value):
        matrix = np.asarray(value, dtype=np.float64)
        if matrix.shape != (4, 4) or not np.all(np.isfinite(matrix)):
            raise ValidationError(
                _('A rigid transform must be a finite 4x4 matrix.'),
                code='not_rigid'
            )

        rotation = matrix[:3, :3]
        error = np.max(np.abs(rotation @ rotation.T - np.eye(3)))
        if error > tolerance or np.linalg.det(rotation) <= 0:
            raise ValidationError(
                _('Rotation block is not orthonormal (error %(error).3g > %(tolerance).3g).'),
                params={'error': error, 'tolerance': tolerance},
                code='not_rigid'
            )

        if np.max(np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > tolerance:
            raise ValidationError(
                _('Bottom row of a rigid transform must be [0, 0, 0, 1].'),
                code='not_rigid'
            )
    return validator


def validate_intrinsics(value):
    """Validate a 3x3 camera matrix: invertible with K[2][2] == 1."""
    matrix = np.asarray(value, dtype=np.float64)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        raise ValidationError(
            _('Intrinsics must be a finite 3x3 matrix.'),
            code='bad_intrinsics'
        )

    if matrix[2, 2] != 1.0:
        raise ValidationError(
            _('Intrinsics must satisfy K[2][2] == 1.'),
            code='bad_intrinsics'
        )

    if abs(np.linalg.det(matrix)) < 1e-12:
        raise ValidationError(
            _('Intrinsics must be invertible.'),
            code='bad_intrinsics'
        )


def validate_label_array(max_label=None, name='labels'):
    """Validate a non-negative integer label array, optionally bounded."""
    def validator(value):
        array = np.asarray(value)
        if array.size == 0:
            return
        if not np.issubdtype(array.dtype, np.integer):
            raise ValidationError(
                _('%(name)s must be integers.'),
                params={'name': name},
                code='bad_labels'
            )
        if array.min() < 0:
            raise ValidationError(
                _('%(name)s must be non-negative.'),
                params={'name': name},
                code='bad_labels'
            )
        if max_label is not None and array.max() > max_label:
            raise ValidationError(
                _('%(name)s exceed %(max_label)s.'),
                params={'name': name, 'max_label': max_label},
                code='label_overflow'
            )
    return validator


# ============================================================================
# SCALAR VALIDATORS
# ============================================================================

def validate_positive(name='value'):
    """Validate that a number is strictly positive."""
    def validator(value):
        if not value > 0:
            raise ValidationError(
                _('%(name)s must be positive, got %(value)s.'),
                params={'name': name, 'value': value},
                code='not_positive'
            )
    return validator


def validate_non_negative(name='value'):
    """Validate that a number is zero or positive."""
    def validator(value):
        if not value >= 0:
            raise ValidationError(
                _('%(name)s must be non-negative, got %(value)s.'),
                params={'name': name, 'value': value},
                code='negative'
            )
    return validator


def validate_range(min_value=None, max_value=None, name='value', inclusive_max=True):
    """
    Validate a number within [min_value, max_value].

    Usage:
        validate_range(0, 1, name='dropout_rate', inclusive_max=False)(0.5)
    """
    def validator(value):
        too_low = min_value is not None and value < min_value
        if inclusive_max:
            too_high = max_value is not None and value > max_value
        else:
            too_high = max_value is not None and value >= max_value
        if too_low or too_high:
            raise ValidationError(
                _('%(name)s must be within [%(min)s, %(max)s%(close)s, got %(value)s.'),
                params={
                    'name': name,
                    'min': min_value,
                    'max': max_value,
                    'close': ']' if inclusive_max else ')',
                    'value': value,
                },
                code='out_of_range'
            )
    return validator


def validate_fraction(name='fraction'):
    """Validate a fraction in (0, 1]."""
    def validator(value):
        if not (0 < value <= 1):
            raise ValidationError(
                _('%(name)s must be within (0, 1], got %(value)s.'),
                params={'name': name, 'value': value},
                code='bad_fraction'
            )
    return validator


def validate_choice(choices, name='value'):
    """
    Validate membership in a fixed set of choices.

    Usage:
        validate_choice(['mean', 'max'], name='mode')(mode)
    """
    def validator(value):
        if value not in choices:
            raise ValidationError(
                _('%(name)s must be one of: %(choices)s (got %(value)s).'),
                params={'name': name, 'choices': ', '.join(map(str, choices)), 'value': value},
                code='invalid_choice'
            )
    return validator
