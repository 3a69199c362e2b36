"""Input checks shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .lattice import Lattice


def check_matrix(X, name: str = "X") -> np.ndarray:
    """2-D finite float64 array with at least one row and column."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if A.shape[0] == 0 or A.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(A).all():
        raise ValueError(f"{name} contains NaN or inf")
    return A


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_lattices(X) -> list[Lattice]:
    """Accept one lattice or an iterable of them; validate each."""
    if isinstance(X, Lattice):
        X = [X]
    out = list(X)
    for lat in out:
        if not isinstance(lat, Lattice):
            raise TypeError(f"expected Lattice, got {type(lat).__name__}")
        lat.validate()
    return out


def check_sentences(X, vocab=None) -> list[list[int]]:
    """Word-id sentences; strings are encoded with ``vocab`` (OOVs to ``<unk>``)."""
    out = []
    for s in X:
        s = list(s)
        if s and isinstance(s[0], str):
            if vocab is None:
                raise ValueError("string input needs a vocabulary")
            s = vocab.encode(s)
        if vocab is not None and any(not 0 <= w < len(vocab) for w in s):
            raise ValueError("word id outside vocabulary")
        out.append(s)
    if not out:
        raise ValueError("no sentences given")
    return out
