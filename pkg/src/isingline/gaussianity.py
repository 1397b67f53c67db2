"""Convergence of line observables to a Gaussian law.

Cumulants use unbiased k-statistics built from power sums, so long runs can
store four integer power sums per measurement instead of every window sum.
Characteristic functions and the Newman bound act on sample matrices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .observables import LineSampleSet
from .stats import block_sums, jackknife_error, leave_one_out

DEFAULT_GRID = (0.25, 0.5, 1.0, 2.0)


class GaussianityError(ValueError):
    pass


# --- characteristic functions -------------------------------------------------

@dataclass(frozen=True)
class CFEstimate:
    value: complex
    err_real: float
    err_imag: float


def _as_matrix(samples) -> np.ndarray:
    x = np.asarray(samples.samples if isinstance(samples, LineSampleSet) else samples, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _n_blocks(n, n_blocks):
    return int(min(n_blocks, n))


def empirical_cf(samples, z, n_blocks: int = 50, min_samples: int = 100) -> CFEstimate:
    """Sample mean of ``exp(i z . X)`` with block-jackknife errors."""
    x = _as_matrix(samples)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size != x.shape[1]:
        raise GaussianityError("z must have one entry per sample column")
    if x.shape[0] < min_samples:
        raise GaussianityError(f"need at least {min_samples} samples, got {x.shape[0]}")
    if not np.any(z):
        return CFEstimate(1 + 0j, 0.0, 0.0)
    phase = np.exp(1j * (x @ z))
    g = _n_blocks(x.shape[0], n_blocks)
    b = block_sums(phase, g)
    size = x.shape[0] // g
    est = b.sum() / (size * g)
    rep = leave_one_out(b) / (size * (g - 1))
    return CFEstimate(complex(est), float(jackknife_error(rep.real)), float(jackknife_error(rep.imag)))


def default_z_grid(dim: int, values=DEFAULT_GRID) -> np.ndarray:
    """Per-coordinate values for small ``dim``, else axes plus diagonals."""
    vals = np.asarray(values, dtype=float)
    if dim <= 3:
        grid = np.array(list(itertools.product(vals, repeat=dim)))
    else:
        grid = np.concatenate([np.eye(dim)[None] * vals[:, None, None]]).reshape(-1, dim)
        grid = np.concatenate([grid, vals[:, None] * np.ones(dim)])
    if dim >= 2:
        alt = np.where(np.arange(dim) % 2 == 0, 1.0, -1.0)
        grid = np.concatenate([grid, vals[:, None] * alt])
    return grid


@dataclass
class CFReport:
    r_grid: np.ndarray
    empirical_cf: np.ndarray
    err_real: np.ndarray
    err_imag: np.ndarray
    gaussian_cf: np.ndarray
    gap: np.ndarray
    gap_err: np.ndarray
    max_abs_gap: float
    max_gap_sigma: float

    def consistent(self, n_sigma: float = 3.0) -> bool:
        return bool(self.max_gap_sigma <= n_sigma)


def cf_report(samples, z_grid=None, n_blocks: int = 50) -> CFReport:
    """Empirical against Gaussian characteristic function on a grid.

    The Gaussian reference is ``exp(-z^T K z / 2)`` with ``K`` the sample
    covariance; the gap error is jackknifed jointly with ``K``.
    """
    x = _as_matrix(samples)
    n, dim = x.shape
    if n < 100:
        raise GaussianityError(f"need at least 100 samples, got {n}")
    z_grid = default_z_grid(dim) if z_grid is None else np.atleast_2d(np.asarray(z_grid, dtype=float))
    g = _n_blocks(n, n_blocks)
    size = n // g
    x = x[: g * size]
    phase = np.exp(1j * x @ z_grid.T)                       # (n, k)
    outer = x[:, :, None] * x[:, None, :]
    bp, bx, bo = block_sums(phase, g), block_sums(x, g), block_sums(outer, g)

    def stats(p, sx, so, count):
        mean = sx / count
        cov = so / count - mean[..., :, None] * mean[..., None, :]
        quad = np.einsum("kd,...de,ke->...k", z_grid, cov, z_grid)
        ecf = p / count
        gcf = np.exp(-0.5 * quad)
        return ecf, gcf, np.abs(ecf - gcf)

    ecf, gcf, gap = stats(bp.sum(0), bx.sum(0), bo.sum(0), g * size)
    recf, _, rgap = stats(leave_one_out(bp), leave_one_out(bx), leave_one_out(bo), (g - 1) * size)
    err_re, err_im = jackknife_error(recf.real), jackknife_error(recf.imag)
    gap_err = jackknife_error(rgap)
    with np.errstate(divide="ignore", invalid="ignore"):
        sig = np.where(gap_err > 0, gap / gap_err, np.where(gap > 0, np.inf, 0.0))
    return CFReport(z_grid, ecf, err_re, err_im, gcf, gap, gap_err, float(gap.max()), float(sig.max()))


# --- Newman's bound -----------------------------------------------------------

def default_r_grid(m: int, values=DEFAULT_GRID) -> np.ndarray:
    """Non-negative ``r`` vectors: full product grid for ``m <= 3``, else
    the all-equal diagonals plus a staircase cycling through the values."""
    vals = np.asarray(values, dtype=float)
    if m <= 3:
        return np.array(list(itertools.product(vals, repeat=m)))
    diag = vals[:, None] * np.ones(m)
    stair = vals[np.arange(m) % vals.size][None, :]
    return np.concatenate([diag, stair])


@dataclass
class NewmanBoundReport:
    r_values: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray
    slack_err: np.ndarray
    violated: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not bool(np.any(self.violated))


def _newman_terms(joint, single, mean, second, r):
    """lhs and rhs from expectations; leading axes index replicas."""
    lhs = np.abs(joint - np.prod(single, axis=-1))
    cov = second - mean[..., :, None] * mean[..., None, :]
    idx = np.arange(cov.shape[-1])
    cov[..., idx, idx] = 0.0
    ar = np.abs(r)
    rhs = 0.5 * np.einsum("kl,...ln,kn->...k", ar, cov, ar)
    return lhs, rhs


def newman_bound_check(U, r_values=None, n_blocks: int = 50, weights=None, n_sigma: float = 3.0,
                       groups=None) -> NewmanBoundReport:
    """``|<e^{i sum r U}> - prod <e^{i r U}>| <= 1/2 sum_{l != n} |r_l r_n| Cov(U_l, U_n)``.

    Parameters
    ----------
    U : ndarray (n_samples, m)
        Increasing functions of the spins, one row per sample.
    r_values : ndarray (k, m), optional
        Evaluation vectors; :func:`default_r_grid` by default.
    weights : ndarray, optional
        Exact probabilities of each row; the check is then exact.
    groups : ndarray, optional
        Measurement label of each row; jackknife blocks never split a group.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2:
        raise GaussianityError("U must be (n_samples, m)")
    n, m = U.shape
    r = default_r_grid(m) if r_values is None else np.atleast_2d(np.asarray(r_values, dtype=float))
    if r.shape[1] != m:
        raise GaussianityError("r vectors must have one entry per U column")
    joint = np.exp(1j * U @ r.T)                              # (n, k)
    single = np.exp(1j * U[:, None, :] * r[None, :, :])        # (n, k, m)
    outer = U[:, :, None] * U[:, None, :]
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        lhs, rhs = _newman_terms(w @ joint, np.einsum("i,ikm->km", w, single), w @ U,
                                 np.einsum("i,ilm->lm", w, outer), r)
        slack = rhs - lhs
        return NewmanBoundReport(r, lhs, rhs, slack, np.zeros_like(slack), slack < -1e-12, {"exact": True})
    if groups is None:
        g = _n_blocks(n, n_blocks)
        label = np.minimum(np.arange(n) * g // n, g - 1)
    else:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        g = _n_blocks(uniq.size, n_blocks)
        rank = np.searchsorted(uniq, groups)
        label = np.minimum(rank * g // uniq.size, g - 1)

    def bsum(a):
        out = np.zeros((g,) + a.shape[1:], dtype=a.dtype)
        np.add.at(out, label, a)
        return out

    bj, bs, bm, bo = bsum(joint), bsum(single), bsum(U), bsum(outer)
    cnt = np.bincount(label, minlength=g).astype(float)
    lhs, rhs = _newman_terms(bj.sum(0) / n, bs.sum(0) / n, bm.sum(0) / n, bo.sum(0) / n, r)
    c = (n - cnt)[:, None]
    rl, rr = _newman_terms(leave_one_out(bj) / c, leave_one_out(bs) / c[:, :, None],
                           leave_one_out(bm) / c, leave_one_out(bo) / c[:, :, None], r)
    slack = rhs - lhs
    slack_err = jackknife_error(rr - rl)
    return NewmanBoundReport(r, lhs, rhs, slack, slack_err, slack < -n_sigma * slack_err,
                             {"n_samples": n, "n_blocks": g})


# --- cumulants ----------------------------------------------------------------

@dataclass
class CumulantReport:
    n: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    mean_err: float
    variance_err: float
    skewness_err: float
    excess_kurtosis_err: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _kstats(s, n):
    """Mean, k2, skewness and excess kurtosis from power sums ``s[..., 1:5]``."""
    s1, s2, s3, s4 = (s[..., i] for i in range(1, 5))
    k1 = s1 / n
    k2 = (n * s2 - s1 ** 2) / (n * (n - 1))
    k3 = (2 * s1 ** 3 - 3 * n * s1 * s2 + n ** 2 * s3) / (n * (n - 1) * (n - 2))
    k4 = (-6 * s1 ** 4 + 12 * n * s1 ** 2 * s2 - 3 * n * (n - 1) * s2 ** 2 - 4 * n * (n + 1) * s1 * s3
          + n ** 2 * (n + 1) * s4) / (n * (n - 1) * (n - 2) * (n - 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.stack([k1, k2, k3 / k2 ** 1.5, k4 / k2 ** 2], axis=-1)


def _shift_sums(sums: np.ndarray, c) -> np.ndarray:
    """Power sums of ``x - c`` from those of ``x`` (exact for integers)."""
    n, s1, s2, s3, s4 = (sums[..., i] for i in range(5))
    return np.stack([n, s1 - c * n, s2 - 2 * c * s1 + c * c * n,
                     s3 - 3 * c * s2 + 3 * c * c * s1 - c ** 3 * n,
                     s4 - 4 * c * s3 + 6 * c * c * s2 - 4 * c ** 3 * s1 + c ** 4 * n], axis=-1)


def power_sums(samples) -> np.ndarray:
    """Per-sample power sums ``[1, x, x^2, x^3, x^4]``, shape ``(n, 5)``."""
    x = np.asarray(samples, dtype=float).ravel()
    return np.stack([np.ones_like(x), x, x ** 2, x ** 3, x ** 4], axis=1)


def cumulant_diagnostics(samples=None, sums=None, n_blocks: int = 50, min_count: int = 1000,
                         scale: float = 1.0, offset: float = 0.0) -> CumulantReport:
    """Mean, variance, skewness and excess kurtosis with jackknife errors.

    Give either raw ``samples`` (1D) or per-measurement power ``sums`` of
    shape ``(n_meas, 5)`` as ``[count, sum x, ..., sum x^4]``; the latter
    may pool many correlated values per measurement.  Reported mean and
    variance refer to ``scale * (x - offset)``.
    """
    if (samples is None) == (sums is None):
        raise GaussianityError("pass exactly one of samples or sums")
    if samples is not None:
        x = np.asarray(samples, dtype=float).ravel()
        c = float(np.mean(x)) if x.size else 0.0
        sums = power_sums(x - c)
    else:
        sums = np.asarray(sums)
        if sums.ndim != 2 or sums.shape[1] != 5:
            raise GaussianityError("sums must be (n_meas, 5)")
        if np.issubdtype(sums.dtype, np.integer):
            # exact integer re-centering keeps the fourth moment well conditioned
            tot = [int(v) for v in sums.astype(object).sum(axis=0)]
            c = round(tot[1] / tot[0]) if tot[0] else 0
            sums = _shift_sums(sums.astype(object), c).astype(float)
        else:
            c = float(sums[:, 1].sum() / sums[:, 0].sum())
            sums = _shift_sums(sums.astype(float), c)
    total_count = float(sums[:, 0].sum())
    if total_count < min_count:
        raise GaussianityError(f"need at least {min_count} values, got {int(total_count)}")
    g = _n_blocks(sums.shape[0], n_blocks)
    b = block_sums(sums, g)
    tot = b.sum(0)
    est = _kstats(tot, tot[0])
    if not est[1] > 0 or not np.isfinite(est).all():
        raise GaussianityError("degenerate input: zero variance")
    loo = leave_one_out(b)
    rep = _kstats(loo, loo[:, 0])
    err = jackknife_error(rep)
    mean = scale * (est[0] + c - offset)
    return CumulantReport(int(total_count), float(mean), float(scale ** 2 * est[1]), float(est[2]), float(est[3]),
                          float(abs(scale) * err[0]), float(scale ** 2 * err[1]), float(err[2]), float(err[3]))


# --- sweeps over L ------------------------------------------------------------

@dataclass
class ConvergenceRow:
    L: float
    cumulants: CumulantReport
    cf_max_gap: float | None
    cf_max_gap_sigma: float | None


@dataclass
class ConvergenceTable:
    rows: list
    kurtosis_monotone: bool
    kurtosis_steps_sigma: list

    def final_kurtosis_below(self, threshold: float = 0.1) -> bool:
        c = self.rows[-1].cumulants
        return bool(abs(c.excess_kurtosis) < threshold + c.excess_kurtosis_err)


def kurtosis_trend(rows, n_sigma: float = 2.0):
    """``|k(L_{i+1})| <= |k(L_i)| + n_sigma`` combined errors at every step."""
    steps = []
    for prev, cur in zip(rows[:-1], rows[1:]):
        a, b = prev.cumulants, cur.cumulants
        comb = float(np.hypot(a.excess_kurtosis_err, b.excess_kurtosis_err))
        rise = abs(b.excess_kurtosis) - abs(a.excess_kurtosis)
        steps.append(rise / comb if comb > 0 else (np.inf if rise > 0 else 0.0))
    return all(s <= n_sigma for s in steps), steps


def gaussian_convergence_sweep(line_sets: dict, sums_by_L: dict | None = None, n_blocks: int = 50,
                               with_cf: bool = True) -> ConvergenceTable:
    """Per-L cumulants and CF gaps with a monotone-trend summary.

    ``line_sets`` maps ``L`` to a :class:`LineSampleSet`.  When
    ``sums_by_L`` holds pooled power sums of the raw window sums for an
    ``L``, the cumulants come from them (all columns and centres); otherwise
    all sample columns are pooled.
    """
    keys = sorted(set(line_sets) | set(sums_by_L or {}))
    if not keys:
        raise GaussianityError("no L values supplied")
    rows = []
    for L in keys:
        ls = line_sets.get(L)
        if sums_by_L and L in sums_by_L:
            cum = cumulant_diagnostics(sums=sums_by_L[L], n_blocks=n_blocks)
        elif ls is not None:
            # row-major ravel keeps measurement order, so blocks stay contiguous
            cum = cumulant_diagnostics(ls.samples.ravel(), n_blocks=n_blocks)
        else:
            raise GaussianityError(f"no data for L={L}")
        gap = sig = None
        if with_cf and ls is not None:
            rep = cf_report(ls, n_blocks=n_blocks)
            gap, sig = rep.max_abs_gap, rep.max_gap_sigma
        rows.append(ConvergenceRow(float(L), cum, gap, sig))
    mono, steps = kurtosis_trend(rows)
    return ConvergenceTable(rows, mono, [float(s) for s in steps])

