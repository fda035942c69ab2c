"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .exceptions import InvalidInputError
from .model import Dataset, MixingMeasure, measure_from_lists


def validate_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    """Finite float arrays of shape (n, d) and (n,)."""
    try:
        return check_X_y(X, y, dtype=np.float64, y_numeric=True, ensure_min_samples=2)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc


def validate_x(X, dim: Optional[int] = None) -> np.ndarray:
    try:
        X = check_array(X, dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
    if dim is not None and X.shape[1] != dim:
        raise InvalidInputError(f"expected {dim} covariate columns, got {X.shape[1]}")
    return X


def as_dataset(X, y) -> Dataset:
    X, y = validate_xy(X, y)
    return Dataset(X, y)


def as_measure(value, dim: Optional[int] = None) -> MixingMeasure:
    """Coerce a :class:`MixingMeasure`, its dict form, or ``(weights, atoms)``."""
    if isinstance(value, MixingMeasure):
        measure = value
    elif isinstance(value, dict):
        measure = MixingMeasure.from_dict(value)
    elif isinstance(value, (tuple, list)) and len(value) == 2:
        measure = measure_from_lists(*value)
    else:
        raise InvalidInputError(f"cannot interpret {type(value).__name__} as a mixing measure")
    if dim is not None and measure.dim != dim:
        raise InvalidInputError(f"mixing measure has dimension {measure.dim}, data has {dim}")
    return measure


def seed_from(random_state) -> int:
    """Integer seed from ``None``, an int, or a ``numpy`` generator."""
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**63 - 1))
    if isinstance(random_state, np.random.RandomState):
        return int(random_state.randint(2**31 - 1))
    raise InvalidInputError(f"unsupported random_state {random_state!r}")
