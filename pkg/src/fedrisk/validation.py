"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_X_y


def check_binary_features(X, name="X"):
    X = check_array(X, dtype=np.float64)
    if not np.all((X == 0) | (X == 1)):
        raise ValueError(f"{name} must contain only 0/1 entries")
    return X


def check_binary_labels(y, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must contain only 0/1 labels")
    return y.astype(np.float64)


def check_binary_xy(X, y):
    X, y = check_X_y(X, y, dtype=np.float64)
    return check_binary_features(X), check_binary_labels(y)


def check_groups(groups, n, name="sites"):
    groups = np.asarray(groups).astype(str)
    if groups.shape != (n,):
        raise ValueError(f"{name} must have one entry per row ({n}), got shape {groups.shape}")
    return groups
