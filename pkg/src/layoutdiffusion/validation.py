"""Input validation helpers for the estimator and CLI surfaces."""
from __future__ import annotations

from typing import Sequence

from .data import Dataset, Layout
from .exceptions import DataError


def check_seed(value, name: str = "seed") -> int:
    if value is None:
        raise DataError(f"{name} must be set explicitly (no wall-clock defaults)")
    return int(value)


def check_dataset(data) -> Dataset:
    """Accept a Dataset or a sequence of layouts; reject anything else."""
    if isinstance(data, Dataset):
        if len(data) == 0:
            raise DataError("dataset is empty")
        return data
    if isinstance(data, Sequence) and data and all(isinstance(l, Layout) for l in data):
        modes = {l.attribute_mode for l in data}
        if len(modes) != 1:
            raise DataError("layouts mix categorical and continuous attributes")
        if modes.pop() == "categorical":
            num_classes = int(max(max(l.labels) for l in data)) + 1
            names = tuple(f"class_{k}" for k in range(num_classes))
            return Dataset(layouts=tuple(data), label_names=names)
        dims = {int(l.features.shape[1]) for l in data}
        if len(dims) != 1:
            raise DataError("layouts have inconsistent feature dims")
        return Dataset(layouts=tuple(data), feature_dim=dims.pop())
    raise DataError("expected a Dataset or a non-empty sequence of Layout objects")


def check_label_conditions(conditions, num_classes: int) -> list:
    """Validate a list of label-id lists used as sampling conditions."""
    out = []
    for i, labels in enumerate(conditions):
        labels = [int(l) for l in labels]
        if not labels:
            raise DataError(f"condition {i} has no elements")
        for label in labels:
            if not 0 <= label < num_classes:
                raise DataError(f"condition {i}: label {label} outside vocabulary "
                                f"of {num_classes}")
        out.append(labels)
    if not out:
        raise DataError("no sampling conditions given")
    return out
