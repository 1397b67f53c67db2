"""Mass-spectrum analysis of covariance estimates.

Effective-mass plateaus, constrained multi-exponential fits, a regularized
non-negative inverse Laplace transform and Ornstein-Zernike ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, nnls

from .observables import KEstimate, TwoPointProfile
from .stats import jackknife_error

CONSTRAINT_MODES = ("none", "ordered", "e8_window")
VARIANTS = ("rho", "rho_tilde")
E8_REFERENCE = {"m2/m1": 2 * math.cos(math.pi / 5), "m3/m1": 2 * math.cos(math.pi / 30)}
E8_SOURCE = "external literature (E8 scattering theory), not computed here"
LAMBDA_GRID = tuple(10.0 ** k for k in range(-6, 1))


class SpectrumError(ValueError):
    pass


# --- plateaus -----------------------------------------------------------------

@dataclass
class Plateau:
    value: float
    error: float
    start: int
    stop: int
    chi2_dof: float
    slope_sigma: float


def find_plateau(y, err, replicas=None, min_len: int = 3, slope_sigma_max: float = 2.0) -> Plateau:
    """Longest tail window ``[start, end)`` consistent with a constant.

    A window qualifies when its weighted constant fit has
    ``chi2/dof <= 1 + 3 sqrt(2/dof)`` and a fitted linear trend is below
    ``slope_sigma_max`` standard errors.  Windows always run to the last
    point, so the earliest qualifying start gives the longest window.
    """
    y = np.asarray(y, dtype=float)
    err = np.asarray(err, dtype=float)
    n = y.size
    if n < min_len:
        raise SpectrumError(f"need at least {min_len} points for a plateau, got {n}")
    if np.any(~np.isfinite(y)) or np.any(err <= 0):
        raise SpectrumError("plateau input must be finite with positive errors")
    for start in range(n - min_len + 1):
        ys, es = y[start:], err[start:]
        w = 1 / es ** 2
        mean = np.sum(w * ys) / np.sum(w)
        dof = ys.size - 1
        chi2 = float(np.sum(w * (ys - mean) ** 2) / dof)
        x = np.arange(ys.size, dtype=float)
        xm = np.sum(w * x) / np.sum(w)
        sxx = np.sum(w * (x - xm) ** 2)
        slope = np.sum(w * (x - xm) * (ys - mean)) / sxx
        slope_sig = abs(slope) * math.sqrt(sxx)
        if chi2 <= 1 + 3 * math.sqrt(2 / dof) and slope_sig <= slope_sigma_max:
            if replicas is not None:
                reps = np.asarray(replicas)[:, start:]
                error = float(jackknife_error(reps @ w / np.sum(w)))
            else:
                error = float(1 / math.sqrt(np.sum(w)))
            return Plateau(float(mean), error, start, n, chi2, float(slope_sig))
    raise SpectrumError("no plateau found")


@dataclass
class MassGap:
    m1: float
    error: float
    plateau_window: tuple
    effective_mass: np.ndarray
    effective_err: np.ndarray
    t_eff: np.ndarray


def _fit_window(k: KEstimate, t_min, t_max, max_rel):
    cut = k.relative_error_cutoff(max_rel)
    hi = cut if t_max is None else min(t_max, cut)
    return (k.t_grid >= t_min) & (k.t_grid <= hi)


def mass_gap(k: KEstimate, t_min: float | None = None, t_max: float | None = None, max_rel: float = 0.3,
             min_len: int = 3) -> MassGap:
    """Smallest mass from the plateau of ``-d log K / dt``.

    The window starts at ``t_min`` (default: two grid steps) and ends where
    the relative error first exceeds ``max_rel``.
    """
    dt = k.t_grid[1] - k.t_grid[0] if k.t_grid.size > 1 else 1.0
    t_min = 2 * dt if t_min is None else t_min
    sel = _fit_window(k, t_min, t_max, max_rel)
    v, e, t = k.values[sel], k.std_err[sel], k.t_grid[sel]
    if v.size < min_len + 1:
        raise SpectrumError("fit window too short for a plateau")
    if np.any(v <= 0):
        raise SpectrumError("K is non-positive in the fit window")
    steps = np.diff(t)
    meff = np.log(v[:-1] / v[1:]) / steps
    reps = None
    if k.replicas is not None:
        rv = k.replicas[:, sel]
        if np.any(rv <= 0):
            raise SpectrumError("K is non-positive in a jackknife replica")
        reps = np.log(rv[:, :-1] / rv[:, 1:]) / steps
        merr = jackknife_error(reps)
    else:
        merr = np.hypot(e[:-1] / v[:-1], e[1:] / v[1:]) / steps
    pl = find_plateau(meff, merr, reps, min_len)
    if not pl.value > 0:
        raise SpectrumError("plateau mass is not positive")
    window = (float(t[pl.start]), float(t[-1]))
    return MassGap(pl.value, pl.error, window, meff, merr, t[:-1])


# --- multi-exponential fits ---------------------------------------------------

@dataclass
class MassSpectrumFit:
    terms: list
    residual_norm: float
    chi2_dof: float
    covariance: np.ndarray
    constraint_mode: str
    constraint_active: bool
    mass_errors: np.ndarray
    amplitude_errors: np.ndarray
    bootstrap_masses: np.ndarray | None = None
    n_converged: int = 0
    window: tuple = (0.0, 0.0)

    @property
    def masses(self) -> np.ndarray:
        return np.array([m for _, m in self.terms])

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([b for b, _ in self.terms])

    def model(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return sum(b * np.exp(-m * t) for b, m in self.terms)

    def shape_ok(self, t) -> bool:
        """Model positive, decreasing and convex on ``t``."""
        f = self.model(t)
        return bool(np.all(f > 0) and np.all(np.diff(f) < 0) and np.all(np.diff(f, 2) >= -1e-15 * f[1:-1]))


def _unpack(theta, n, mode):
    """Internal parameters -> (amplitudes, masses)."""
    b = np.exp(theta[:n])
    p = theta[n:]
    if mode == "none":
        m = np.exp(p)
    elif mode == "ordered":
        m = np.cumsum(np.exp(p))
    else:
        m1 = math.exp(p[0])
        if n == 1:
            m = np.array([m1])
        elif n == 2:
            m = np.array([m1, m1 * p[1]])
        else:
            r3, q = p[1], p[2]
            m = np.array([m1, m1 * (1 + (r3 - 1) * q), m1 * r3])
    return b, m


def _pack(b, m, mode):
    b = np.asarray(b, float)
    m = np.sort(np.asarray(m, float))
    n = b.size
    if mode == "none":
        p = np.log(m)
    elif mode == "ordered":
        p = np.log(np.maximum(np.diff(np.concatenate([[0.0], m])), 1e-8))
    else:
        r = np.clip(m / m[0], 1 + 1e-6, 2 - 1e-6)
        if n == 1:
            p = np.log(m[:1])
        elif n == 2:
            p = np.array([math.log(m[0]), r[1]])
        else:
            q = np.clip((r[1] - 1) / (r[2] - 1), 1e-6, 1 - 1e-6)
            p = np.array([math.log(m[0]), r[2], q])
    return np.concatenate([np.log(np.maximum(b, 1e-300)), p])


def _bounds(n, mode):
    # log-amplitudes and log-masses are boxed to keep exp() finite
    lo = [-300.0] * n + [-30.0] * n
    hi = [300.0] * n + [10.0] * n
    if mode == "e8_window" and n >= 2:
        lo[n + 1], hi[n + 1] = 1.0, 2.0
        if n == 3:
            lo[n + 2], hi[n + 2] = 0.0, 1.0
    return np.array(lo), np.array(hi)


def _nnls_amplitudes(t, y, sig, m):
    a = np.exp(-np.outer(t, m)) / sig[:, None]
    b, _ = nnls(a, y / sig)
    return np.maximum(b, 1e-12 * max(1.0, np.abs(y).max()))


def _starts(t, y, sig, n, rng, n_random):
    """Masses from log-slopes on geometric windows, plus random perturbations."""
    pos = y > 0
    tt, yy = t[pos], y[pos]
    slopes = []
    span = tt[-1] - tt[0]
    for frac in (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0):
        hi = tt[0] + frac * span
        sel = tt <= hi
        if sel.sum() >= 2:
            slopes.append(-np.polyfit(tt[sel], np.log(yy[sel]), 1)[0])
    tail = tt >= tt[0] + 0.5 * span
    if tail.sum() >= 2:
        slopes.append(-np.polyfit(tt[tail], np.log(yy[tail]), 1)[0])
    slopes = np.array([s for s in slopes if s > 0])
    if slopes.size == 0:
        slopes = np.array([1.0 / max(span, 1e-12)])
    m_lo, m_hi = slopes.min(), max(slopes.max(), 1.05 * slopes.min())
    starts = []
    for spread in (1.5, 2.0, 3.0):
        starts.append(np.geomspace(m_lo, max(m_hi, m_lo * spread), n) if n > 1 else np.array([m_lo]))
    starts.append(m_lo * np.linspace(1.0, 1.9, n) if n > 1 else np.array([m_lo]))
    for _ in range(n_random):
        base = starts[rng.integers(len(starts))]
        starts.append(np.sort(base * np.exp(0.3 * rng.standard_normal(n))))
    return starts


def _solve(t, y, sig, n, mode, theta0, tol=1e-14):
    lo, hi = _bounds(n, mode)
    theta0 = np.clip(theta0, lo + 1e-9, hi - 1e-9)

    def resid(theta):
        b, m = _unpack(theta, n, mode)
        return (np.exp(-np.outer(t, m)) @ b - y) / sig

    return least_squares(resid, theta0, bounds=(lo, hi), method="trf", x_scale="jac",
                         xtol=tol, ftol=tol, gtol=tol, max_nfev=4000)


def fit_exp_mixture(k: KEstimate, n_terms: int, constraint_mode: str = "ordered", t_min: float | None = None,
                    t_max: float | None = None, max_rel: float = 0.3, n_random: int = 8, n_bootstrap: int = 200,
                    seed: int = 0) -> MassSpectrumFit:
    """Weighted least-squares fit of ``sum_i B_i exp(-m_i t)``.

    ``constraint_mode``: ``none`` (positive masses), ``ordered``
    (``m_1 < m_2 < ...``) or ``e8_window`` (additionally ``m_n < 2 m_1``).
    Several starts are tried and the lowest residual kept; mass errors come
    from a parametric bootstrap over the estimate's standard errors.
    """
    if n_terms not in (1, 2, 3):
        raise SpectrumError("n_terms must be 1, 2 or 3")
    if constraint_mode not in CONSTRAINT_MODES:
        raise SpectrumError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
    dt = k.t_grid[1] - k.t_grid[0] if k.t_grid.size > 1 else 1.0
    t_min = 2 * dt if t_min is None else t_min
    sel = _fit_window(k, t_min, t_max, max_rel)
    t, y, e = k.t_grid[sel], k.values[sel], k.std_err[sel]
    if t.size < 6 * n_terms:
        raise SpectrumError(f"{t.size} points are too few for {n_terms} terms (need {6 * n_terms})")
    sig = np.where(e > 0, e, 1.0) if np.any(e > 0) else np.ones_like(y)
    rng = np.random.default_rng(seed)
    best = None
    n_ok = 0
    for m0 in _starts(t, y, sig, n_terms, rng, n_random):
        b0 = _nnls_amplitudes(t, y, sig, m0)
        res = _solve(t, y, sig, n_terms, constraint_mode, _pack(b0, m0, constraint_mode))
        if not res.success:
            continue
        n_ok += 1
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise SpectrumError("optimizer failed to converge from every start")
    b, m = _unpack(best.x, n_terms, constraint_mode)
    order = np.argsort(m)
    b, m = b[order], m[order]
    if np.any(np.diff(m) <= 0):
        raise SpectrumError("fitted masses are degenerate")
    jac = np.concatenate([np.exp(-np.outer(t, m)), -(t[:, None] * b) * np.exp(-np.outer(t, m))], axis=1) / sig[:, None]
    chi2 = float(2 * best.cost)
    dof = max(t.size - 2 * n_terms, 1)
    try:
        cov = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((2 * n_terms, 2 * n_terms), np.nan)
    active = False
    if constraint_mode == "e8_window" and n_terms >= 2:
        r = best.x[n_terms + 1]
        active = bool(r < 1 + 1e-6 or r > 2 - 1e-6)
    boot = None
    m_err = np.sqrt(np.abs(np.diag(cov)[n_terms:]))
    b_err = np.sqrt(np.abs(np.diag(cov)[:n_terms]))
    if n_bootstrap and np.any(e > 0):
        model = np.exp(-np.outer(t, m)) @ b
        brng = np.random.default_rng([seed, 1])
        masses, amps = [], []
        for _ in range(n_bootstrap):
            yb = model + e * brng.standard_normal(t.size)
            rb = _solve(t, yb, sig, n_terms, constraint_mode, best.x, tol=1e-10)
            bb, mb = _unpack(rb.x, n_terms, constraint_mode)
            o = np.argsort(mb)
            masses.append(mb[o])
            amps.append(bb[o])
        boot = np.array(masses)
        m_err = boot.std(axis=0, ddof=1)
        b_err = np.array(amps).std(axis=0, ddof=1)
    return MassSpectrumFit([(float(bi), float(mi)) for bi, mi in zip(b, m)], math.sqrt(chi2), chi2 / dof, cov,
                           constraint_mode, active, m_err, b_err, boot, n_ok, (float(t[0]), float(t[-1])))


def e8_ratio_report(fit: MassSpectrumFit) -> dict:
    """Mass ratios against the E8 reference values ``2cos(pi/5)``, ``2cos(pi/30)``."""
    m = fit.masses
    if m.size < 2:
        raise SpectrumError("need at least two fitted masses")
    out = {"source": E8_SOURCE, "ratios": {}, "errors": {}, "reference": {}, "deviation": {}}
    for i, key in ((1, "m2/m1"), (2, "m3/m1")):
        if i >= m.size:
            continue
        ratio = m[i] / m[0]
        if fit.bootstrap_masses is not None:
            err = float(np.std(fit.bootstrap_masses[:, i] / fit.bootstrap_masses[:, 0], ddof=1))
        else:
            n = m.size
            c = fit.covariance[n:, n:]
            g = np.zeros(n)
            g[0], g[i] = -ratio / m[0], 1 / m[0]
            err = float(math.sqrt(max(g @ c @ g, 0.0)))
        out["ratios"][key] = float(ratio)
        out["errors"][key] = err
        out["reference"][key] = E8_REFERENCE[key]
        out["deviation"][key] = float(ratio - E8_REFERENCE[key])
    return out


# --- spectral measures --------------------------------------------------------

@dataclass
class SpectralMeasure:
    mass_grid: np.ndarray
    weights: np.ndarray
    variant: str = "rho"
    lam: float | None = None
    residual: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mass_grid = np.asarray(self.mass_grid, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.variant not in VARIANTS:
            raise SpectrumError(f"variant must be one of {VARIANTS}")
        if np.any(np.diff(self.mass_grid) <= 0):
            raise SpectrumError("mass grid must increase strictly")
        if self.weights.shape != self.mass_grid.shape:
            raise SpectrumError("one weight per grid mass")
        if np.any(self.weights < 0):
            raise SpectrumError("weights must be non-negative")

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def laplace(self, t) -> np.ndarray:
        """``sum_m w_m exp(-m t)`` (a ``rho`` measure reproduces K)."""
        return np.exp(-np.outer(np.asarray(t, float), self.mass_grid)) @ self.weights

    def peaks(self, rel_floor: float = 1e-3) -> list[tuple[float, float]]:
        """``(location, weight)`` for each run of contiguous non-negligible weights."""
        w = self.weights
        on = w > rel_floor * max(w.max(), 1e-300)
        out = []
        i = 0
        while i < w.size:
            if on[i]:
                j = i
                while j + 1 < w.size and on[j + 1]:
                    j += 1
                ww = w[i: j + 1]
                out.append((float(ww @ self.mass_grid[i: j + 1] / ww.sum()), float(ww.sum())))
                i = j + 1
            else:
                i += 1
        return out


def _menger_curvature(x, y):
    k = np.zeros(x.size)
    for i in range(1, x.size - 1):
        p = np.array([[x[i - 1], y[i - 1]], [x[i], y[i]], [x[i + 1], y[i + 1]]])
        a = np.linalg.norm(p[1] - p[0])
        b = np.linalg.norm(p[2] - p[1])
        c = np.linalg.norm(p[2] - p[0])
        area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        k[i] = 2 * area2 / (a * b * c) if a * b * c > 0 else 0.0
    return k


def _regularized_nnls(a, b, lam):
    n = a.shape[1]
    aug = np.vstack([a, math.sqrt(lam) * np.eye(n)]) if lam > 0 else a
    rhs = np.concatenate([b, np.zeros(n)]) if lam > 0 else b
    w, _ = nnls(aug, rhs, maxiter=50 * n)
    return w, float(np.linalg.norm(a @ w - b)), float(np.linalg.norm(w))


def invert_spectral_measure(k: KEstimate, mass_grid, lam: float | None = None, t_min: float = 0.0,
                            t_max: float | None = None, max_rel: float | None = None,
                            m1_estimate: float | None = None) -> SpectralMeasure:
    """Non-negative, ridge-regularized inverse Laplace transform of ``K``.

    Minimizes ``sum_t ((K(t) - sum_m w_m e^{-m t}) / s_t)^2 + lam |w|^2``
    over ``w >= 0``.  With ``lam=None`` the corner of the L-curve over
    ``1e-6 .. 1`` is used.
    """
    grid = np.asarray(mass_grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise SpectrumError("mass grid must be positive and strictly increasing")
    if lam is not None and lam < 0:
        raise SpectrumError("lam must be >= 0")
    if m1_estimate is not None and (grid[0] > 0.5 * m1_estimate or grid[-1] < 4 * m1_estimate):
        raise SpectrumError("mass grid must cover [0.5 m1, 4 m1]")
    sel = k.window(t_min, np.inf if t_max is None else t_max)
    if max_rel is not None:
        sel &= k.t_grid <= k.relative_error_cutoff(max_rel)
    t, y, e = k.t_grid[sel], k.values[sel], k.std_err[sel]
    sig = np.where(e > 0, e, 1.0) if np.any(e > 0) else np.ones_like(y)
    a = np.exp(-np.outer(t, grid)) / sig[:, None]
    b = y / sig
    if not np.any(y):
        return SpectralMeasure(grid, np.zeros_like(grid), "rho", lam or 0.0, 0.0)
    lcurve = None
    if lam is None:
        rows = [(lv,) + _regularized_nnls(a, b, lv) for lv in LAMBDA_GRID]
        lcurve = [{"lam": r[0], "residual": r[2], "norm": r[3]} for r in rows]
        x = np.log([max(r[2], 1e-300) for r in rows])
        yv = np.log([max(r[3], 1e-300) for r in rows])
        curv = _menger_curvature(x, yv)
        lam = LAMBDA_GRID[int(np.argmax(np.abs(curv)))] if np.any(curv) else LAMBDA_GRID[0]
    w, res, _ = _regularized_nnls(a, b, lam)
    if not np.any(w > 0) and res > math.sqrt(t.size):
        raise SpectrumError("all-zero solution with a large residual: check the grid or lam")
    return SpectralMeasure(grid, w, "rho", float(lam), res, {"lcurve": lcurve, "t_window": (float(t[0]), float(t[-1]))})


def convert_measure(measure: SpectralMeasure, target: str) -> SpectralMeasure:
    """Switch between ``rho`` and ``rho_tilde`` using ``d rho / d rho_tilde = pi / m``."""
    if target not in VARIANTS:
        raise SpectrumError(f"target must be one of {VARIANTS}")
    if np.any(measure.mass_grid <= 0):
        raise SpectrumError("conversion needs strictly positive masses")
    if target == measure.variant:
        return SpectralMeasure(measure.mass_grid.copy(), measure.weights.copy(), target, measure.lam,
                               measure.residual, dict(measure.meta))
    if target == "rho":
        w = measure.weights * math.pi / measure.mass_grid
    else:
        w = measure.weights * measure.mass_grid / math.pi
    return SpectralMeasure(measure.mass_grid.copy(), w, target, measure.lam, measure.residual, dict(measure.meta))


# --- Ornstein-Zernike ----------------------------------------------------------

@dataclass
class OZReport:
    t_grid: np.ndarray
    ratio: np.ndarray
    ratio_err: np.ndarray
    C1: float
    C1_err: float
    plateau_window: tuple
    atom_weight: float
    atom_err: float


def oz_plateau(profile: TwoPointProfile, m1: float, t_min: float = 1.0, max_rel: float = 0.3,
               min_len: int = 4, a: float = 1.0) -> OZReport:
    """Plateau of ``H(t, 0) t^{1/2} e^{m_1 t}`` and the implied atom ``C_1 sqrt(2 pi / m_1)``."""
    if not m1 > 0:
        raise SpectrumError("m1 must be positive")
    t = a * np.asarray(profile.separations, dtype=float)
    v, e = profile.values, profile.std_err
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(v > 0, e / v, np.inf)
    sel = (t >= t_min) & (rel <= max_rel)
    if sel.sum() < min_len:
        raise SpectrumError("too few usable separations for an OZ plateau")
    t, v, e = t[sel], v[sel], e[sel]
    if np.any(v <= 0):
        raise SpectrumError("profile must be positive on the window")
    f = np.sqrt(t) * np.exp(m1 * t)
    ratio, rerr = v * f, np.where(e > 0, e, 1e-12 * v) * f
    reps = profile.replicas[:, sel] * f if profile.replicas is not None else None
    try:
        pl = find_plateau(ratio, rerr, reps, min_len)
    except SpectrumError as exc:
        raise SpectrumError("no OZ plateau: Ornstein-Zernike behaviour not established at this scale") from exc
    scale = math.sqrt(2 * math.pi / m1)
    return OZReport(t, ratio, rerr, pl.value, pl.error, (float(t[pl.start]), float(t[-1])),
                    pl.value * scale, pl.error * scale)
