"""Block jackknife helpers shared by the analysis modules."""

from __future__ import annotations

import math

import numpy as np


def block_length(tau_int: float, factor: float = 20.0) -> int:
    """Jackknife block length covering ``factor * tau_int`` measurements."""
    return max(1, int(math.ceil(factor * tau_int)))


def split_blocks(n: int, n_blocks: int) -> np.ndarray:
    """Block label for each of ``n`` measurements; trailing remainder gets -1."""
    if n_blocks < 2:
        raise ValueError("need at least 2 jackknife blocks")
    if n < n_blocks:
        raise ValueError(f"{n} measurements cannot fill {n_blocks} blocks")
    size = n // n_blocks
    labels = np.full(n, -1, dtype=np.int64)
    labels[: size * n_blocks] = np.repeat(np.arange(n_blocks), size)
    return labels


def block_sums(data: np.ndarray, n_blocks: int) -> np.ndarray:
    """Sum ``data`` (measurements along axis 0) within equal contiguous blocks."""
    data = np.asarray(data)
    size = data.shape[0] // n_blocks
    if size < 1:
        raise ValueError(f"{data.shape[0]} measurements cannot fill {n_blocks} blocks")
    trimmed = data[: size * n_blocks]
    return trimmed.reshape((n_blocks, size) + data.shape[1:]).sum(axis=1)


def leave_one_out(block_totals: np.ndarray) -> np.ndarray:
    """Totals with each block removed in turn (axis 0 indexes blocks)."""
    return block_totals.sum(axis=0, keepdims=True) - block_totals


def jackknife_error(replicas: np.ndarray) -> np.ndarray:
    """Standard error from leave-one-block-out replicas along axis 0."""
    replicas = np.asarray(replicas, dtype=float)
    g = replicas.shape[0]
    dev = replicas - replicas.mean(axis=0)
    return np.sqrt((g - 1) / g * np.sum(dev * dev, axis=0))


def jackknife(data, func, n_blocks: int = 50):
    """Block jackknife of an arbitrary statistic.

    Parameters
    ----------
    data : ndarray
        Measurements along axis 0.
    func : callable
        Maps a (sub)array of measurements to a scalar or array.
    n_blocks : int
        Number of contiguous blocks.

    Returns
    -------
    estimate, error, replicas
    """
    data = np.asarray(data)
    labels = split_blocks(data.shape[0], n_blocks)
    keep = labels >= 0
    estimate = np.asarray(func(data[keep]), dtype=float)
    replicas = np.stack([np.asarray(func(data[keep & (labels != b)]), dtype=float)
                         for b in range(n_blocks)])
    return estimate, jackknife_error(replicas), replicas


def default_blocks(n: int, tau_int: float = 0.5, max_blocks: int = 100, min_blocks: int = 10) -> int:
    """Block count for ``n`` measurements with blocks >= 20 tau_int long."""
    g = n // block_length(tau_int)
    return int(max(min(g, max_blocks, n), min(min_blocks, n)))
