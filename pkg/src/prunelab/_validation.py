"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .tasks import IGNORE


def check_tokens(X) -> np.ndarray:
    """Integer token sequences, shape [n_sequences, seq_len]."""
    arr = check_array(X, dtype=None, ensure_2d=True, allow_nd=False, ensure_min_features=2)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("token inputs must be integers")
        arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    return arr.astype(np.int64, copy=False)


def check_series(X) -> np.ndarray:
    """Real sequences; [n, seq_len] is promoted to [n, seq_len, 1]."""
    arr = check_array(X, dtype=np.float64, ensure_2d=False, allow_nd=True)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[1] < 2:
        raise ValueError(f"expected sequences of shape [n, seq_len] or [n, seq_len, features], got {arr.shape}")
    return arr


def check_label_targets(y, n: int, seq_len: int) -> tuple[np.ndarray, bool]:
    """Per-position labels ([n, seq_len], -1 = unscored) or one label per sequence.

    Returns ``(targets, per_sequence)``; a per-sequence label scores the final position.
    """
    arr = np.asarray(y)
    if arr.shape == (n,):
        targets = np.full((n, seq_len), IGNORE, dtype=np.int64)
        targets[:, -1] = _as_int(arr)
        return targets, True
    if arr.shape != (n, seq_len):
        raise ValueError(f"targets must have shape ({n},) or ({n}, {seq_len}), got {arr.shape}")
    targets = _as_int(arr)
    if not np.any(targets >= 0):
        raise ValueError("targets contain no scored positions")
    return targets, False


def check_real_targets(y, n: int, seq_len: int) -> np.ndarray:
    """Per-position targets, [n, seq_len] or [n, seq_len, outputs]."""
    arr = check_array(y, dtype=np.float64, ensure_2d=False, allow_nd=True)
    if arr.shape == (n, seq_len):
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[:2] != (n, seq_len):
        raise ValueError(f"targets must have shape ({n}, {seq_len}) or ({n}, {seq_len}, k), got {arr.shape}")
    return arr


def _as_int(arr: np.ndarray) -> np.ndarray:
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("class labels must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < IGNORE:
        raise ValueError(f"labels must be >= 0 (or {IGNORE} for unscored positions)")
    return arr
