"""Seeded synthetic covariance data with known spectral content."""

from __future__ import annotations

import csv
from importlib import resources

import numpy as np

from .observables import KEstimate

THREE_EXP = {"amplitudes": (1.0, 0.3, 0.1), "masses": (0.5, 0.8, 0.95)}
THREE_EXP_SEED = 20240917
THREE_EXP_FILE = "synthetic_three_exp.csv"


def exp_mixture(t, amplitudes, masses) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return sum(b * np.exp(-m * t) for b, m in zip(amplitudes, masses))


def noisy_estimate(t, clean, rel_noise: float, seed: int, kind: str = "line_sum") -> KEstimate:
    """``clean * (1 + rel_noise * N(0,1))`` with ``std_err = rel_noise * clean``."""
    rng = np.random.default_rng(seed)
    clean = np.asarray(clean, dtype=float)
    err = rel_noise * np.abs(clean)
    return KEstimate(t, clean + err * rng.standard_normal(clean.size), err, kind,
                     meta={"synthetic": True, "rel_noise": rel_noise, "seed": seed})


def three_exponential_dataset(t_max: float = 20.0, dt: float = 0.1, rel_noise: float = 1e-3,
                              seed: int = THREE_EXP_SEED) -> KEstimate:
    """Three-term mixture (masses 0.5, 0.8, 0.95) with 0.1% relative noise."""
    t = np.round(np.arange(0.0, t_max + dt / 2, dt), 12)
    k = noisy_estimate(t, exp_mixture(t, **THREE_EXP), rel_noise, seed)
    k.meta.update(THREE_EXP)
    return k


def write_estimate_csv(path, k: KEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "value", "std_err"])
        for row in k.to_rows():
            w.writerow([repr(x) for x in row])


def read_estimate_csv(path_or_file, kind: str = "line_sum") -> KEstimate:
    fh = open(path_or_file, newline="") if not hasattr(path_or_file, "read") else path_or_file
    with fh:
        rows = list(csv.DictReader(fh))
    t = np.array([float(r["t"]) for r in rows])
    return KEstimate(t, [float(r["value"]) for r in rows], [float(r["std_err"]) for r in rows], kind)


def bundled_three_exponential() -> KEstimate:
    """The packaged copy of :func:`three_exponential_dataset`."""
    with resources.files("isingline.data").joinpath(THREE_EXP_FILE).open("r", newline="") as fh:
        k = read_estimate_csv(fh)
    k.meta.update(THREE_EXP, synthetic=True, seed=THREE_EXP_SEED, rel_noise=1e-3)
    return k
