"""Line observables, covariance estimators and their scaling prefactors.

Conventions: axis 0 of a spin field is time, axis 1 (and 2 in d=3) is
space.  A "column" at time ``s`` is the spatial slice ``spins[s]``; the line
window of half-width ``L`` holds the ``2 floor(L/a) + 1`` sites around a
spatial centre.  Continuum times and separations are lattice counts times
``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeError, ModelParams, SpinField, snap_to_lattice, window_sites
from .stats import block_sums, jackknife_error, leave_one_out

CENTERING_MODES = ("exact_mean", "estimated_mean")
KINDS = ("line_sum", "ratio")
WU_REFERENCE = 0.25
INCREMENT_REFERENCE = 0.75


class EstimatorError(ValueError):
    """Input violates an estimator precondition."""


def line_exponent(params: ModelParams) -> float:
    """Power of ``a`` in the d=2 line normalization, ``(d + 2 - eta)/2 - 1 = 7/8``."""
    if params.d != 2:
        raise EstimatorError("the a**(7/8)/sqrt(2L) line normalization is defined for d=2 only; "
                             "use standardized_line_sum in d=3")
    return float(params.field_exponent) - 1.0


@dataclass
class LineSampleSet:
    """Samples of ``X_L(s)``: one row per measurement, one column per ``s``."""

    s_values: np.ndarray
    L: float
    a: float
    samples: np.ndarray
    centering_mode: str = "estimated_mean"
    one_point: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s_values = np.atleast_1d(np.asarray(self.s_values, dtype=float))
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if self.samples.shape[1] != self.s_values.size:
            raise EstimatorError("samples must have one column per s value")
        if self.centering_mode not in CENTERING_MODES:
            raise EstimatorError(f"centering_mode must be one of {CENTERING_MODES}")
        if self.one_point is None:
            raise EstimatorError("the one-point value used for centering must be recorded")


@dataclass
class KEstimate:
    """Covariance estimate on a grid of non-negative separations."""

    t_grid: np.ndarray
    values: np.ndarray
    std_err: np.ndarray
    kind: str
    replicas: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.std_err = np.asarray(self.std_err, dtype=float)
        if self.kind not in KINDS:
            raise EstimatorError(f"kind must be one of {KINDS}")
        if self.t_grid.size == 0 or self.t_grid[0] != 0 or np.any(np.diff(self.t_grid) <= 0):
            raise EstimatorError("t_grid must start at 0 and increase strictly")
        if self.values.shape != self.t_grid.shape or self.std_err.shape != self.t_grid.shape:
            raise EstimatorError("values and std_err must match t_grid")
        if self.kind == "ratio" and self.values[0] != 1.0:
            raise EstimatorError("ratio estimates must satisfy K(0) = 1")

    def window(self, t_min: float = 0.0, t_max: float = np.inf) -> np.ndarray:
        return (self.t_grid >= t_min) & (self.t_grid <= t_max)

    def relative_error_cutoff(self, max_rel: float = 0.3) -> float:
        """Largest ``t`` before the relative error first exceeds ``max_rel``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(self.values > 0, self.std_err / self.values, np.inf)
        bad = np.nonzero(rel > max_rel)[0]
        last = (bad[0] - 1) if bad.size else self.t_grid.size - 1
        return float(self.t_grid[max(last, 0)])

    def to_rows(self) -> list[tuple]:
        return [(float(t), float(v), float(e)) for t, v, e in zip(self.t_grid, self.values, self.std_err)]


@dataclass
class TwoPointProfile:
    """Spin-spin correlation along one axis as a function of separation."""

    separations: np.ndarray
    values: np.ndarray
    std_err: np.ndarray
    truncated: bool = False
    replicas: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.separations = np.asarray(self.separations)
        self.values = np.asarray(self.values, dtype=float)
        self.std_err = np.asarray(self.std_err, dtype=float)

    def to_rows(self) -> list[tuple]:
        return [(float(r), float(v), float(e)) for r, v, e in zip(self.separations, self.values, self.std_err)]


# --- line sums -----------------------------------------------------------------

def _column_index(fld: SpinField, s: float, a: float) -> int:
    idx = snap_to_lattice(s, a)
    if not 0 <= idx < fld.extents[0]:
        raise EstimatorError(f"s={s} (column {idx}) lies outside the box")
    return idx


def _window_slices(fld: SpinField, n: int, center):
    """Per spatial axis, the site indices of the window ``center +- n``."""
    space = fld.extents[1:]
    if center is None:
        center = [0 if fld.bc == "periodic" else m // 2 for m in space]
    center = np.broadcast_to(np.asarray(center, dtype=int), (len(space),))
    out = []
    for c, m in zip(center, space):
        if 2 * n + 1 > m:
            raise EstimatorError(f"window of {2 * n + 1} sites exceeds the spatial extent {m}")
        idx = np.arange(c - n, c + n + 1)
        if fld.bc == "periodic":
            idx %= m
        elif idx[0] < 0 or idx[-1] >= m:
            raise EstimatorError("window crosses the boundary of a non-periodic box")
        out.append(idx)
    return out


def _window_values(fld: SpinField, s, L, a, one_point, center):
    t = _column_index(fld, s, a)
    n = window_sites(L, a)
    idx = _window_slices(fld, n, center)
    col = fld.spins[t].astype(float)
    sub = col[np.ix_(*idx)]
    op = np.asarray(one_point, dtype=float)
    if op.ndim:
        op = np.broadcast_to(op, fld.spins.shape)[t][np.ix_(*idx)]
    return sub - op


def line_sum_X(fld: SpinField, s: float, L: float, params: ModelParams, one_point=0.0, center=None) -> float:
    """``a**(7/8) * sum_k (s_(s_a, k) - one_point) / sqrt(2L)`` over the window ``[-L, L]``.

    ``one_point`` may be a scalar or an array shaped like the field.
    """
    if fld.ndim != 2:
        raise EstimatorError("line_sum_X needs a 2D field")
    vals = _window_values(fld, s, L, params.a, one_point, center)
    return float(params.a ** line_exponent(params) * vals.sum() / math.sqrt(2 * L))


def standardized_line_sum(fld: SpinField, s: float, L: float, params: ModelParams, one_point,
                          variance: float, center=None) -> float:
    """Centered window sum divided by the standard deviation of the window sum.

    In d=3 the window is the square ``[-L, L]**2``.  ``variance`` is the
    exact or estimated variance of the raw spin sum over the window.
    """
    if not variance > 0:
        raise EstimatorError("zero variance: the window sum is degenerate")
    vals = _window_values(fld, s, L, params.a, one_point, center)
    return float(vals.sum() / math.sqrt(variance))


def window_sum_variance(moments, s: float, L: float, params: ModelParams, center=None) -> float:
    """Exact variance of the raw window sum from an :class:`~isingline.exact.ExactMoments`."""
    fld = SpinField(moments.extents, moments.bc, np.ones(moments.extents, dtype=np.int8))
    t = _column_index(fld, s, params.a)
    n = window_sites(L, params.a)
    idx = _window_slices(fld, n, center)
    grids = np.meshgrid(*idx, indexing="ij")
    sites = np.ravel_multi_index((np.full(grids[0].shape, t), *grids), moments.extents).ravel()
    return float(moments.truncated[np.ix_(sites, sites)].sum())


def line_variance_exact(moments, s: float, L: float, params: ModelParams, center=None) -> float:
    """``Var X_L(s) = a**(7/4) / (2L) * sum_{k,j} <s_k; s_j>`` from exact moments."""
    return params.a ** (2 * line_exponent(params)) / (2 * L) * window_sum_variance(moments, s, L, params, center)


def window_sums(spins: np.ndarray, n_half: int, centers=None) -> np.ndarray:
    """Periodic spatial window sums for every column.

    ``spins`` has shape ``(..., T, Y)``; returns ``(..., T, len(centers))``
    sums over ``center - n_half .. center + n_half`` (all centres when
    ``centers`` is None).
    """
    spins = np.asarray(spins)
    y = spins.shape[-1]
    w = 2 * n_half + 1
    if w > y:
        raise EstimatorError(f"window of {w} sites exceeds the spatial extent {y}")
    ext = np.concatenate([spins[..., y - n_half:], spins, spins[..., :n_half]], axis=-1)
    cs = np.cumsum(ext, axis=-1, dtype=np.int32)
    cs = np.concatenate([np.zeros(cs.shape[:-1] + (1,), dtype=np.int32), cs], axis=-1)
    sums = cs[..., w:] - cs[..., :-w]          # index c -> window centred on c
    if centers is None:
        return sums
    return sums[..., np.asarray(centers, dtype=int)]


def default_centers(extent: int, n_half: int, max_centers: int = 16) -> np.ndarray:
    """Evenly spaced window centres, roughly one per window width."""
    k = min(max_centers, max(2, extent // (2 * n_half + 1)))
    return (np.arange(k) * extent) // k


def line_samples(configs: np.ndarray, s_values, L: float, params: ModelParams, one_point=None,
                 center: int = 0) -> LineSampleSet:
    """``X_L(s)`` for a stack of periodic 2D configurations ``(n, T, Y)``.

    With ``one_point=None`` the global magnetization of the stack is used
    (estimated-mean centering).
    """
    configs = np.asarray(configs)
    a = params.a
    n = window_sites(L, a)
    cols = np.array([snap_to_lattice(s, a) for s in np.atleast_1d(s_values)])
    if np.any(cols < 0) or np.any(cols >= configs.shape[1]):
        raise EstimatorError("an s value lies outside the box")
    mode = "exact_mean" if one_point is not None else "estimated_mean"
    m = float(configs.mean(dtype=np.float64)) if one_point is None else float(one_point)
    sums = window_sums(configs[:, cols, :], n, [center])[..., 0]
    return line_samples_from_sums(sums, s_values, L, params, m, mode)


def line_samples_from_sums(sums, s_values, L, params: ModelParams, one_point: float,
                           centering_mode: str = "estimated_mean") -> LineSampleSet:
    """Convert raw window sums ``(n, len(s_values))`` to ``X_L`` samples."""
    n = window_sites(L, params.a)
    x = params.a ** line_exponent(params) * (np.asarray(sums, float) - (2 * n + 1) * one_point) / math.sqrt(2 * L)
    return LineSampleSet(np.atleast_1d(s_values), L, params.a, x, centering_mode, one_point)


# --- covariance estimators ----------------------------------------------------

def khat_ratio(t_grid, sums, replicas=None, meta=None) -> KEstimate:
    """``K(t) = S(t) / S(0)`` from truncated spatial sums ``S(t)``.

    ``replicas`` (jackknife replicas of ``sums``, blocks along axis 0)
    provide error bars; without them the errors are zero (exact input).
    """
    sums = np.asarray(sums, dtype=float)
    if not sums[0] > 0:
        raise EstimatorError("non-positive equal-time sum: insufficient statistics")
    values = sums / sums[0]
    values[0] = 1.0
    if replicas is None:
        return KEstimate(t_grid, values, np.zeros_like(values), "ratio", meta=dict(meta or {}))
    replicas = np.asarray(replicas, dtype=float)
    if np.any(replicas[:, 0] <= 0):
        raise EstimatorError("non-positive equal-time sum in a jackknife replica")
    rep = replicas / replicas[:, :1]
    return KEstimate(t_grid, values, jackknife_error(rep), "ratio", rep, dict(meta or {}))


def khat_from_strip(strip, a: float = 1.0, max_t: int | None = None, y0: int = 0) -> KEstimate:
    """Exact ratio-kind ``K`` from transfer-matrix strip moments."""
    n = strip.length if max_t is None else max_t + 1
    sums = strip.truncated[:n, y0, :].sum(axis=1)
    return khat_ratio(a * np.arange(n), sums, meta={"source": "transfer_matrix"})


def _circular_correlation(x: np.ndarray, y: np.ndarray, max_t: int) -> np.ndarray:
    """``(1/T) sum_s x(s) y(s + t)`` for ``t = 0..max_t``, rows independently."""
    t = x.shape[-1]
    fx = np.fft.rfft(x, axis=-1)
    fy = np.fft.rfft(y, axis=-1)
    c = np.fft.irfft(np.conj(fx) * fy, n=t, axis=-1) / t
    return c[..., : max_t + 1]


def _cov_blocks(x, y, max_t, n_blocks, sign=1):
    """Block totals of products and means for ``Cov(x(s), y(s + sign t))``."""
    yy = y if sign > 0 else y[:, ::-1]
    xx = x if sign > 0 else x[:, ::-1]
    prod = _circular_correlation(xx.astype(float), yy.astype(float), max_t)
    mx = x.mean(axis=1)
    my = y.mean(axis=1)
    return block_sums(prod, n_blocks), block_sums(mx, n_blocks), block_sums(my, n_blocks)


def _ratio_from_blocks(prod, mx, my, n):
    cov = prod / n - (mx / n * my / n)[..., None]
    return cov / cov[..., :1]


def _jackknifed_ratio(x, y, max_t, n_blocks, sign=1):
    prod, mx, my = _cov_blocks(x, y, max_t, n_blocks, sign)
    size = x.shape[0] // n_blocks
    total = n_blocks * size
    est = _ratio_from_blocks(prod.sum(0), mx.sum(0), my.sum(0), total)
    rep = _ratio_from_blocks(leave_one_out(prod), leave_one_out(mx),
                             leave_one_out(my), total - size)
    return est, rep


def khat_from_columns(colsums, a: float = 1.0, max_t: int | None = None, n_blocks: int = 50) -> KEstimate:
    """Ratio-kind ``K`` from full spatial column sums of a periodic box.

    ``colsums`` has shape ``(n_measure, T)``.  By translation invariance
    ``Cov(C(s), C(s + t)) / Var(C(s))`` equals the ratio of truncated
    spatial sums anchored at one site.  The global mean is subtracted;
    errors come from a block jackknife over measurements.
    """
    c = np.asarray(colsums)
    if c.ndim != 2:
        raise EstimatorError("colsums must be (n_measure, T)")
    max_t = c.shape[1] // 2 if max_t is None else int(max_t)
    est, rep = _jackknifed_ratio(c, c, max_t, n_blocks)
    if not np.isfinite(est[0]):
        raise EstimatorError("column sums have zero variance")
    est[0] = 1.0
    rep[:, 0] = 1.0
    return KEstimate(a * np.arange(max_t + 1), est, jackknife_error(rep), "ratio", rep,
                     {"n_measure": c.shape[0], "n_blocks": n_blocks})


@dataclass
class SymmetryReport:
    t_grid: np.ndarray
    forward: KEstimate
    backward: KEstimate
    z_scores: np.ndarray
    passed: bool


def khat_symmetry(colsums, colsums_even, a: float = 1.0, max_t: int | None = None, n_blocks: int = 50,
                  n_sigma: float = 2.0, t_max_check: float | None = None) -> SymmetryReport:
    """Compare ``K(+t)`` and ``K(-t)`` built from disjoint anchor sets.

    The forward estimate anchors on even spatial rows and pairs them with
    full columns at ``s + t``; the backward one anchors on odd rows at
    ``s - t``.  Using disjoint anchors makes the comparison a real test
    rather than an algebraic identity of the periodic estimator.
    """
    c = np.asarray(colsums).astype(np.int32)
    ce = np.asarray(colsums_even).astype(np.int32)
    co = c - ce
    max_t = c.shape[1] // 2 if max_t is None else int(max_t)
    f_est, f_rep = _jackknifed_ratio(ce, c, max_t, n_blocks, +1)
    b_est, b_rep = _jackknifed_ratio(co, c, max_t, n_blocks, -1)
    t_grid = a * np.arange(max_t + 1)
    for e, r in ((f_est, f_rep), (b_est, b_rep)):
        e[0] = 1.0
        r[:, 0] = 1.0
    fwd = KEstimate(t_grid, f_est, jackknife_error(f_rep), "ratio", f_rep, {"anchor": "even rows, +t"})
    bwd = KEstimate(t_grid, b_est, jackknife_error(b_rep), "ratio", b_rep, {"anchor": "odd rows, -t"})
    comb = np.hypot(fwd.std_err, bwd.std_err)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(comb > 0, np.abs(f_est - b_est) / comb, 0.0)
    sel = t_grid <= (np.inf if t_max_check is None else t_max_check)
    return SymmetryReport(t_grid, fwd, bwd, z, bool(np.all(z[sel] <= n_sigma)))


@dataclass
class MonotonicityReport:
    t_grid: np.ndarray
    excess_sigma: np.ndarray
    worst: float
    passed: bool


def check_monotone(k: KEstimate, n_sigma: float = 2.0, t_max: float | None = None) -> MonotonicityReport:
    """``K(t+1) - K(t) <= n_sigma`` combined standard errors over ``t <= t_max``.

    By default ``t_max`` is where the relative error first exceeds 30%.
    """
    t_max = k.relative_error_cutoff() if t_max is None else t_max
    sel = k.t_grid <= t_max
    v, e = k.values[sel], k.std_err[sel]
    rise = np.diff(v)
    comb = np.hypot(e[1:], e[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(comb > 0, rise / comb, np.where(rise > 1e-13, np.inf, 0.0))
    worst = float(z.max()) if z.size else 0.0
    return MonotonicityReport(k.t_grid[sel][1:], z, worst, bool(worst <= n_sigma))


def k_line_estimator(configs, L: float, params: ModelParams, max_t: int | None = None, weights=None,
                     one_point=None, n_blocks: int = 20) -> KEstimate:
    """Line-sum covariance ``a**(3/4) sum_{|k| <= L} <s_(s,0); s_(s+t,k)>``.

    ``configs`` are periodic 2D fields ``(n, T, Y)``; the estimate averages
    over all anchors.  With ``weights`` (exact probabilities of each
    configuration) the expectation is exact and the errors are zero.
    """
    configs = np.asarray(configs)
    if configs.ndim != 3:
        raise EstimatorError("configs must be (n, T, Y)")
    nmeas, tlen, ylen = configs.shape
    n = window_sites(L, params.a)
    max_t = tlen // 2 if max_t is None else int(max_t)
    w = window_sums(configs, n).astype(float)        # (n, T, Y)
    s = configs.astype(float)
    fs = np.fft.rfft(s, axis=1)
    fw = np.fft.rfft(w, axis=1)
    prod = (np.fft.irfft(np.conj(fs) * fw, n=tlen, axis=1) / tlen).mean(axis=2)[:, : max_t + 1]
    mag = s.mean(axis=(1, 2))
    scale = params.a ** (2 * line_exponent(params) - 1.0)
    t_grid = params.a * np.arange(max_t + 1)
    width = 2 * n + 1

    def value(p, m):
        mm = m if one_point is None else one_point
        return scale * (p - width * mm * mm)

    if weights is not None:
        wts = np.asarray(weights, dtype=float)
        est = value(wts @ prod, wts @ mag)
        return KEstimate(t_grid, est, np.zeros_like(est), "line_sum", meta={"exact": True})
    if nmeas < 2 * n_blocks:
        raise EstimatorError("insufficient samples for the jackknife")
    pb, mb = block_sums(prod, n_blocks), block_sums(mag, n_blocks)
    size = nmeas // n_blocks
    est = value(pb.sum(0) / (size * n_blocks), mb.sum(0) / (size * n_blocks))
    rep = value(leave_one_out(pb) / (size * (n_blocks - 1)), (leave_one_out(mb) / (size * (n_blocks - 1)))[:, None])
    err = jackknife_error(rep)
    return KEstimate(t_grid, est, err, "line_sum", rep, {"n_measure": nmeas})


def k_line_exact(moments, L: float, params: ModelParams, t_values=None, anchor=(0, 0)) -> KEstimate:
    """Exact line-sum covariance from :class:`ExactMoments` on a periodic 2D box."""
    tlen, ylen = moments.extents
    n = window_sites(L, params.a)
    if 2 * n + 1 > ylen:
        raise EstimatorError("window exceeds the box")
    t_values = np.arange(tlen // 2 + 1) if t_values is None else np.asarray(t_values)
    x = moments.index(anchor)
    scale = params.a ** (2 * line_exponent(params) - 1.0)
    vals = []
    for t in t_values:
        ys = [moments.index((anchor[0] + t, anchor[1] + k)) for k in range(-n, n + 1)]
        vals.append(scale * moments.truncated[x, ys].sum())
    vals = np.asarray(vals)
    return KEstimate(params.a * t_values, vals, np.zeros_like(vals), "line_sum", meta={"exact": True})


def k_line_from_strip(strip, L: float, params: ModelParams, y0: int = 0) -> KEstimate:
    """Exact line-sum covariance from periodic-width strip moments."""
    n = window_sites(L, params.a)
    if 2 * n + 1 > strip.width:
        raise EstimatorError("window exceeds the strip width")
    ys = (y0 + np.arange(-n, n + 1)) % strip.width
    scale = params.a ** (2 * line_exponent(params) - 1.0)
    vals = scale * strip.truncated[:, y0, ys].sum(axis=1)
    half = strip.length // 2 + 1 if strip.bc_length == "periodic" else strip.length
    return KEstimate(params.a * np.arange(half), vals[:half], np.zeros(half), "line_sum", meta={"exact": True})


# --- power-law decay at h = 0 -------------------------------------------------

def two_point_profile(axis_sums, n_sites: int, n_blocks: int = 50) -> TwoPointProfile:
    """Average ``<s_0 s_r>`` from per-measurement axis correlator sums.

    ``axis_sums`` has shape ``(n, n_axes, R + 1)`` as produced by the
    axis-correlator hook; both axes are averaged.
    """
    x = np.asarray(axis_sums, dtype=float).mean(axis=1) / n_sites
    b = block_sums(x, n_blocks)
    size = x.shape[0] // n_blocks
    est = b.sum(0) / (size * n_blocks)
    rep = leave_one_out(b) / (size * (n_blocks - 1))
    return TwoPointProfile(np.arange(x.shape[1]), est, jackknife_error(rep), False, rep,
                           {"n_measure": x.shape[0], "n_blocks": n_blocks})


@dataclass
class WuFit:
    p: float
    p_err: float
    C: float
    C_err: float
    window: tuple
    chi2_dof: float
    rms_log_residual: float
    poor_fit: bool
    reference: float = WU_REFERENCE


def _loglog_fit(r, v, e):
    x = np.log(r)
    y = np.log(v)
    w = (v / e) ** 2 if np.all(e > 0) else np.ones_like(v)
    A = np.stack([np.ones_like(x), x], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    resid = y - A @ coef
    return coef, resid, w


def wu_decay_profile(profile: TwoPointProfile, window=(4, 32), extent: int | None = None,
                     chi2_max: float = 3.0, rms_max: float = 0.02) -> WuFit:
    """Fit ``<s_0 s_N> = C N**(-p)`` by weighted log-log least squares.

    Errors come from refitting every jackknife replica when available,
    otherwise from the weighted least-squares covariance.  A fit is flagged
    poor when ``chi2/dof > chi2_max`` or the rms log residual exceeds
    ``rms_max``.
    """
    lo, hi = window
    if extent is not None and hi > extent // 4:
        raise EstimatorError(f"window end {hi} exceeds extent/4 = {extent // 4}")
    r = np.asarray(profile.separations)
    sel = (r >= lo) & (r <= hi)
    if sel.sum() < 3:
        raise EstimatorError("fit window holds fewer than 3 separations")
    v, e = profile.values[sel], profile.std_err[sel]
    if np.any(v <= 0):
        raise EstimatorError("non-positive correlator in the fit window (statistics failure)")
    coef, resid, w = _loglog_fit(r[sel], v, e)
    dof = sel.sum() - 2
    chi2 = float(np.sum(w * resid ** 2) / dof) if np.all(e > 0) else float("nan")
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if profile.replicas is not None:
        reps = np.array([_loglog_fit(r[sel], rv[sel], e)[0] for rv in profile.replicas])
        err = jackknife_error(reps)
    elif np.all(e > 0):
        A = np.stack([np.ones(sel.sum()), np.log(r[sel])], axis=1)
        cov = np.linalg.inv(A.T @ (A * w[:, None]))
        err = np.sqrt(np.diag(cov))
    else:
        err = np.zeros(2)
    C = math.exp(coef[0])
    poor = bool((np.isfinite(chi2) and chi2 > chi2_max) or rms > rms_max)
    return WuFit(float(-coef[1]), float(err[1]), C, float(C * err[0]), (lo, hi), chi2, rms, poor)


# --- small-separation increments ----------------------------------------------

@dataclass
class IncrementFit:
    slope: float
    slope_err: float
    intercept: float
    eps: np.ndarray
    increments: np.ndarray
    reference: float = INCREMENT_REFERENCE


def increment_scaling(k: KEstimate, eps_grid, n_sigma: float = 2.0) -> IncrementFit:
    """Slope of ``log(K(0) - K(eps))`` against ``log eps``.

    ``eps_grid`` values must lie on ``k.t_grid``.  Errors come from the
    jackknife replicas when present, else from weighted least squares.
    """
    eps = np.asarray(eps_grid, dtype=float)
    if eps.size < 2:
        raise EstimatorError("eps_grid needs at least two points")
    if np.any(eps <= 0) or eps.max() / eps.min() < 10 - 1e-9:
        raise EstimatorError("eps_grid must be positive and span at least one decade")
    idx = np.array([np.argmin(np.abs(k.t_grid - e)) for e in eps])
    if np.any(np.abs(k.t_grid[idx] - eps) > 1e-9 * np.maximum(1, eps)):
        raise EstimatorError("every eps must lie on the estimate's t grid")
    d = k.values[0] - k.values[idx]
    de = np.hypot(k.std_err[idx], k.std_err[0])
    if np.any(d <= 0):
        raise EstimatorError("K(0) - K(eps) must be positive on the grid")
    order = np.argsort(eps)
    drop = -np.diff(d[order])
    if np.any(drop > n_sigma * np.hypot(de[order][1:], de[order][:-1]) + 1e-15):
        raise EstimatorError("K is non-monotone at small eps beyond its error bars")
    x, y = np.log(eps), np.log(d)
    A = np.stack([np.ones_like(x), x], axis=1)

    def fit(yv, wv):
        sw = np.sqrt(wv)
        return np.linalg.lstsq(A * sw[:, None], yv * sw, rcond=None)[0]

    w = (d / de) ** 2 if np.all(de > 0) else np.ones_like(d)
    coef = fit(y, w)
    if k.replicas is not None:
        reps = k.replicas[:, 0][:, None] - k.replicas[:, idx]
        if np.all(reps > 0):
            err = jackknife_error(np.array([fit(np.log(r), w) for r in reps]))[1]
        else:
            err = float("nan")
    elif np.all(de > 0):
        err = math.sqrt(np.linalg.inv(A.T @ (A * w[:, None]))[1, 1])
    else:
        err = 0.0
    return IncrementFit(float(coef[1]), float(err), float(coef[0]), eps, d)


# --- measurement hooks --------------------------------------------------------

def column_sum_hook(fld: SpinField) -> np.ndarray:
    """Full spatial sum of every column, ``(T,)``."""
    return fld.spins.reshape(fld.extents[0], -1).sum(axis=1, dtype=np.int32).astype(np.int16)


def even_column_sum_hook(fld: SpinField) -> np.ndarray:
    """Spatial sum over even rows only of every column, ``(T,)``."""
    return fld.spins[:, 0::2].reshape(fld.extents[0], -1).sum(axis=1, dtype=np.int32).astype(np.int16)


def window_moments_hook(L: float, a: float, extent: int, max_centers: int = 16):
    """Hook returning ``[count, sum S, sum S^2, sum S^3, sum S^4]`` of window sums.

    Sums run over every column and a set of evenly spaced centres.
    """
    n = window_sites(L, a)
    centers = default_centers(extent, n, max_centers)

    def hook(fld: SpinField) -> np.ndarray:
        s = window_sums(fld.spins, n, centers).astype(np.int64).ravel()
        s2 = s * s
        return np.array([s.size, s.sum(), s2.sum(), (s2 * s).sum(), (s2 * s2).sum()], dtype=np.int64)

    hook.centers = centers
    return hook


def window_sums_hook(L: float, a: float, columns, blocks: bool = False):
    """Hook returning window sums at fixed columns (centre 0).

    With ``blocks=True`` the window is split into consecutive groups of
    ``floor(sqrt(L/a))`` sites and the group sums ``(len(columns), m)`` are
    returned instead.
    """
    n = window_sites(L, a)
    columns = np.asarray(columns, dtype=int)
    width = max(1, int(math.isqrt(int(math.floor(L / a + 1e-12)))))
    edges = np.arange(0, 2 * n + 1, width)

    def hook(fld: SpinField) -> np.ndarray:
        idx = np.arange(-n, n + 1) % fld.extents[1]
        win = fld.spins[columns][:, idx].astype(np.int16)
        if not blocks:
            return win.sum(axis=1, dtype=np.int16)
        return np.add.reduceat(win, edges, axis=1).astype(np.int16)

    hook.block_edges = edges
    return hook


def axis_correlator_hook(max_sep: int):
    """Hook returning ``sum_x s_x s_(x + r e_mu)`` for both axes, ``(2, max_sep + 1)``."""
    from ._kernels import axis_correlator

    def hook(fld: SpinField) -> np.ndarray:
        out = np.zeros((2, max_sep + 1), dtype=np.int64)
        axis_correlator(fld.spins, max_sep, out)
        return out

    return hook
