"""Input validation helpers shared across the public API."""

from __future__ import annotations

import numpy as np

from .errors import WorkbenchError


class ValidationError(WorkbenchError):
    pass


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng(0)
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    raise ValidationError(f"random_state must be an int, Generator or None, got {type(seed).__name__}")


def check_positive_int(name: str, value, minimum: int = 1) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(name: str, value) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a real number, got {value!r}")
    if not (0.0 < value < 1.0):
        raise ValidationError(f"{name} must lie in (0, 1), got {value!r}")
    return value


def check_choice(name: str, value, choices) -> str:
    if value not in choices:
        raise ValidationError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_weights(name: str, value) -> tuple:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,) or np.any(arr < 0) or not np.any(arr > 0):
        raise ValidationError(f"{name} must be three non-negative reals with at least one positive, got {value!r}")
    return tuple(float(v) for v in arr)
