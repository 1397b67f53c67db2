"""Exact small-system moments and correlation-inequality checks.

Two independent routes are provided: full enumeration of the Gibbs
measure on boxes of at most 24 sites, and transfer matrices along strips of
width at most 8.  The verifiers test the GKS, SMM (reflection) and GHS
inequalities on their output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .lattice import ModelParams, SiteIndex, _check_extents, bonds, geometry

MAX_ENUM_SITES = 24
MAX_STRIP_WIDTH = 8
MAX_STRIP_LENGTH = 4096
TOL = 1e-12


class OracleError(ValueError):
    pass


@dataclass
class ExactMoments:
    params: ModelParams
    extents: tuple[int, ...]
    bc: str
    one_point: np.ndarray      # (n,)
    two_point: np.ndarray      # (n, n)
    truncated: np.ndarray      # (n, n)
    log_partition: float

    def index(self, coords) -> int:
        return SiteIndex.from_coords(coords, self.extents, self.bc).linear

    def corr(self, x, y, truncated: bool = False) -> float:
        m = self.truncated if truncated else self.two_point
        return float(m[self.index(x), self.index(y)])

    def to_table(self) -> list[dict]:
        """One record per unordered site pair, for JSON export."""
        n = len(self.one_point)
        coords = [tuple(int(c) for c in np.unravel_index(i, self.extents)) for i in range(n)]
        rows = []
        for i in range(n):
            for j in range(i, n):
                rows.append({"x": list(coords[i]), "y": list(coords[j]),
                             "two_point": float(self.two_point[i, j]),
                             "truncated": float(self.truncated[i, j])})
        return rows



def _site_fields(params: ModelParams, extents, bc) -> np.ndarray:
    _, n_out = geometry(extents, bc)
    h = np.full(len(n_out), params.h_lat)
    if bc == "plus":
        h += params.beta * n_out
    return h


def _spin_table(n: int) -> np.ndarray:
    """All 2**n configurations of n spins; row c has bit i of c set -> spin -1."""
    c = np.arange(1 << n, dtype=np.int64)[:, None]
    bits = (c >> np.arange(n, dtype=np.int64)) & 1
    return (1 - 2 * bits).astype(np.float64)


def _log_weights(params: ModelParams, extents, bc):
    """Log Boltzmann weights as an (2**nA, 2**nB) matrix over a site split A|B."""
    n = math.prod(extents)
    n_a = n // 2
    b = bonds(extents, bc)
    hsite = _site_fields(params, extents, bc)
    coup = np.zeros((n, n))
    np.add.at(coup, (b[:, 0], b[:, 1]), 1.0)
    coup = coup + coup.T
    s_a = _spin_table(n_a)
    s_b = _spin_table(n - n_a)
    j_aa = np.triu(coup[:n_a, :n_a])
    j_bb = np.triu(coup[n_a:, n_a:])
    # diagonal carries no self bonds by construction
    e_a = params.beta * np.einsum("ci,ij,cj->c", s_a, j_aa, s_a) + s_a @ hsite[:n_a]
    e_b = params.beta * np.einsum("ci,ij,cj->c", s_b, j_bb, s_b) + s_b @ hsite[n_a:]
    cross = params.beta * (s_a @ coup[:n_a, n_a:]) @ s_b.T
    return e_a[:, None] + e_b[None, :] + cross, s_a, s_b


def enumerate_moments(params: ModelParams, extents, bc: str = "periodic") -> ExactMoments:
    """Exact one- and two-point functions by summing over all configurations.

    The sites are split into two halves A and B so that the weight matrix
    ``W[a, b]`` and every moment are dense matrix products; this keeps the
    24-site cap (2**24 states) within seconds.
    """
    extents = _check_extents(extents)
    n = math.prod(extents)
    if n > MAX_ENUM_SITES:
        raise OracleError(f"{n} sites exceed the enumeration cap of {MAX_ENUM_SITES}")
    logw, s_a, s_b = _log_weights(params, extents, bc)
    top = logw.max()
    w = np.exp(logw - top)
    z = w.sum()
    p = w / z
    p_a, p_b = p.sum(axis=1), p.sum(axis=0)
    one = np.concatenate([s_a.T @ p_a, s_b.T @ p_b])
    n_a = s_a.shape[1]
    two = np.empty((n, n))
    two[:n_a, :n_a] = (s_a * p_a[:, None]).T @ s_a
    two[n_a:, n_a:] = (s_b * p_b[:, None]).T @ s_b
    two[:n_a, n_a:] = s_a.T @ p @ s_b
    two[n_a:, :n_a] = two[:n_a, n_a:].T
    np.fill_diagonal(two, 1.0)
    trunc = two - np.outer(one, one)
    return ExactMoments(params, extents, bc, one, two, trunc, float(top + math.log(z)))


def exact_distribution(params: ModelParams, extents, bc: str = "periodic", max_sites: int = 20):
    """All configurations ``(2**n, n)`` and their exact probabilities."""
    extents = _check_extents(extents)
    n = math.prod(extents)
    if n > max_sites:
        raise OracleError(f"{n} sites exceed the explicit-distribution cap of {max_sites}")
    logw, s_a, s_b = _log_weights(params, extents, bc)
    p = np.exp(logw - logw.max())
    p /= p.sum()
    n_a = s_a.shape[1]
    configs = np.empty((s_a.shape[0], s_b.shape[0], n), dtype=np.int8)
    configs[:, :, :n_a] = s_a[:, None, :]
    configs[:, :, n_a:] = s_b[None, :, :]
    return configs.reshape(-1, n), p.reshape(-1)


@dataclass
class StripMoments:
    """Axis-0 two-point functions of a strip from transfer matrices.

    ``two_point[t, y0, y] = <s_(anchor, y0) s_(t, y)>`` for every time ``t``;
    ``one_point[t, y] = <s_(t, y)>``.
    """

    params: ModelParams
    length: int
    width: int
    bc_width: str
    bc_length: str
    anchor: int
    one_point: np.ndarray
    two_point: np.ndarray
    truncated: np.ndarray = field(init=False)
    log_partition: float = 0.0

    def __post_init__(self):
        self.truncated = self.two_point - self.one_point[self.anchor][None, :, None] * self.one_point[:, None, :]


def _column_terms(params: ModelParams, width: int, bc_width: str):
    s = _spin_table(width)
    b = bonds((width,), "periodic" if bc_width == "periodic" else "free")
    intra = (s[:, b[:, 0]] * s[:, b[:, 1]]).sum(axis=1) if len(b) else np.zeros(len(s))
    return s, intra


def strip_transfer_moments(params: ModelParams, length: int, width: int, bc_width: str = "periodic",
                           bc_length: str = "periodic", anchor: int = 0) -> StripMoments:
    """Two-point functions along axis 0 of an ``length x width`` strip.

    The symmetric transfer matrix ``T = D K D`` acts on column states
    (dimension ``2**width``); powers are taken through its eigendecomposition
    with eigenvalues scaled by the largest one.
    """
    if width > MAX_STRIP_WIDTH:
        raise OracleError(f"width {width} exceeds the cap of {MAX_STRIP_WIDTH}")
    if not 1 <= length <= MAX_STRIP_LENGTH:
        raise OracleError(f"length must be in [1, {MAX_STRIP_LENGTH}], got {length}")
    if bc_width not in ("periodic", "free") or bc_length not in ("periodic", "free"):
        raise OracleError("strip boundary conditions must be 'periodic' or 'free'")
    s, intra = _column_terms(params, width, bc_width)
    beta, h = params.beta, params.h_lat
    mag = s.sum(axis=1)
    half_diag = 0.5 * (beta * intra + h * mag)
    n_time_bonds = 0 if (bc_length == "periodic" and length == 1) else 1
    inter = beta * n_time_bonds * (s @ s.T)
    logt = half_diag[:, None] + inter + half_diag[None, :]
    shift = logt.max()
    tmat = np.exp(logt - shift)
    lam, u = np.linalg.eigh(tmat)
    lam = np.clip(lam, 0.0, None)
    lam0 = lam.max()
    r = lam / lam0

    t = np.arange(length)
    if bc_length == "periodic":
        if length == 1:
            wdiag = np.exp(2 * half_diag - 2 * half_diag.max())
            z = wdiag.sum()
            one = (s.T @ wdiag / z)[None, :]
            two = ((s * wdiag[:, None]).T @ s / z)[None]
            logz = math.log(z) + 2 * half_diag.max()
            return StripMoments(params, 1, width, bc_width, bc_length, 0, one, two, logz)
        # Tr(S_y0 T^t S_y T^(N-t)) / Tr(T^N), spectral form
        pw = r[None, :] ** t[:, None]            # (N, k): r^t
        pw_rest = r[None, :] ** (length - t)[:, None]
        z = np.sum(r ** length)
        a_mats = np.einsum("ka,ky,kb->yab", u, s, u)   # U^T S_y U
        one_y = np.einsum("yaa,a->y", a_mats, r ** length) / z
        two = np.empty((length, width, width))
        for y0 in range(width):
            for y in range(width):
                q = a_mats[y0] * a_mats[y].T           # q[a,b] = A0[a,b] A[b,a]
                two[:, y0, y] = np.einsum("ta,ab,tb->t", pw_rest, q, pw) / z
        one = np.broadcast_to(one_y, (length, width)).copy()
        logz = math.log(z) + length * (math.log(lam0) + shift)
        anchor %= length
        # rows above are separations from the anchor; store absolute times
        return StripMoments(params, length, width, bc_width, bc_length, anchor,
                            one, np.roll(two, anchor, axis=0), logz)

    # open ends: Z = v^T T^(N-1) v with v = exp(half_diag)
    v = np.exp(half_diag - half_diag.max())
    uv = u.T @ v
    a_mats = np.einsum("ka,ky,kb->yab", u, s, u)
    z = np.sum(uv * uv * r ** (length - 1))
    if not 0 <= anchor < length:
        raise OracleError(f"anchor {anchor} outside strip of length {length}")
    # one-point at time t: v^T T^t S_y T^(N-1-t) v
    one = np.einsum("ta,a,yab,b,tb->ty", r[None, :] ** t[:, None], uv, a_mats, uv,
                    r[None, :] ** (length - 1 - t)[:, None]) / z
    two = np.empty((length, width, width))
    t0 = anchor
    for y0 in range(width):
        for y in range(width):
            for ti in range(length):
                lo, hi = (t0, ti) if t0 <= ti else (ti, t0)
                ylo, yhi = (y0, y) if t0 <= ti else (y, y0)
                left = uv * r ** lo
                right = uv * r ** (length - 1 - hi)
                mid = r ** (hi - lo)
                two[ti, y0, y] = left @ a_mats[ylo] @ (mid * (a_mats[yhi] @ right)) / z
    logz = (math.log(z) + 2 * half_diag.max() + (length - 1) * (math.log(lam0) + shift))
    return StripMoments(params, length, width, bc_width, bc_length, anchor, one, two, logz)


@dataclass(frozen=True)
class GKSReport:
    min_truncated: float
    min_two_point: float
    passed: bool


def verify_gks(moments, tol: float = TOL) -> GKSReport:
    """Second GKS inequality: every truncated two-point function is >= -tol."""
    trunc = np.asarray(moments.truncated)
    two = np.asarray(moments.two_point)
    mt = float(trunc.min())
    return GKSReport(mt, float(two.min()), bool(mt >= -tol))


@dataclass(frozen=True)
class SMMViolation:
    kind: str
    x: tuple
    y: tuple
    y_image: tuple
    excess: float


@dataclass
class SMMReport:
    violations: list
    n_checks: int
    passed: bool


def _reflections(extents, bc):
    """Yield ``(kind, image, side)`` arrays over all sites for each symmetry reflection.

    ``side`` is +1/-1 for the two half-spaces and 0 on a fixed plane.
    """
    ndim = len(extents)
    coords = np.indices(extents).reshape(ndim, -1)

    def lin(c):
        return np.ravel_multi_index(tuple(c), extents)

    for mu, n in enumerate(extents):
        ms = range(n) if bc == "periodic" else [n - 1]
        for m in ms:
            img = coords.copy()
            if bc == "periodic":
                img[mu] = (m - coords[mu]) % n
                dd = (2 * coords[mu] - m) % (2 * n)
                side = np.where((dd > 0) & (dd < n), 1, np.where(dd > n, -1, 0))
            else:
                img[mu] = m - coords[mu]
                dd = 2 * coords[mu] - m
                side = np.sign(dd)
            yield f"axis{mu}:m={m}", lin(img), side


def _periodic_distance(k, n):
    k = k % n
    return np.minimum(k, n - k)


def verify_smm(moments: ExactMoments, tol: float = TOL) -> SMMReport:
    """Reflection (SMM) inequalities on a reflection-symmetric box.

    Checks, for every symmetry reflection R and sites x, y strictly on the
    same side, ``<s_x s_y> >= <s_x s_{Ry}>`` and the truncated analogue.
    On periodic boxes it also checks the axis monotonicity
    ``<s_0 s_z> <= <s_0 s_w>`` for ``z_mu = w_mu`` off one axis and larger
    periodic distance along it.  Only axis reflections are used: diagonal
    ones on a torus pair sites whose images wrap closer, and the
    inequality genuinely fails there.
    """
    extents, bc = moments.extents, moments.bc
    if bc not in ("periodic", "free", "plus"):
        raise OracleError(f"no reflection symmetry classification for bc={bc!r}")
    two, trunc = moments.two_point, moments.truncated
    violations = []
    n_checks = 0
    for kind, image, side in _reflections(extents, bc):
        for sgn in (1, -1):
            idx = np.nonzero(side == sgn)[0]
            if idx.size == 0:
                continue
            xs, ys = np.meshgrid(idx, idx, indexing="ij")
            ry = image[ys]
            for name, m in (("two_point", two), ("truncated", trunc)):
                excess = m[xs, ry] - m[xs, ys]
                n_checks += excess.size
                for a, b in zip(*np.nonzero(excess > tol)):
                    violations.append(SMMViolation(f"{kind}:{name}", _c(xs[a, b], extents),
                                                   _c(ys[a, b], extents), _c(ry[a, b], extents),
                                                   float(excess[a, b])))
    if bc == "periodic":
        ndim = len(extents)
        coords = np.indices(extents).reshape(ndim, -1)
        for mu, n in enumerate(extents):
            others = [k for k in range(ndim) if k != mu]
            key = np.ravel_multi_index(tuple(coords[others]), tuple(extents[k] for k in others)) \
                if others else np.zeros(coords.shape[1], dtype=np.int64)
            dist = _periodic_distance(coords[mu], n)
            for name, m in (("two_point", two), ("truncated", trunc)):
                row = m[0]
                for g in np.unique(key):
                    sel = np.nonzero(key == g)[0]
                    order = sel[np.argsort(dist[sel], kind="stable")]
                    d = dist[order]
                    vals = row[order]
                    for p in range(len(order)):
                        farther = d > d[p]
                        excess = vals[farther] - vals[p]
                        n_checks += excess.size
                        for q in np.nonzero(excess > tol)[0]:
                            z = order[np.nonzero(farther)[0][q]]
                            violations.append(SMMViolation(f"monotone{mu}:{name}", _c(0, extents),
                                                           _c(z, extents), _c(order[p], extents),
                                                           float(excess[q])))
    return SMMReport(violations, n_checks, not violations)


def _c(lin, extents):
    return tuple(int(c) for c in np.unravel_index(int(lin), extents))


@dataclass
class GHSReport:
    max_second_difference: float
    concavity_pass: bool
    max_dominance_excess: float
    truncated_dominance_pass: bool

    @property
    def passed(self) -> bool:
        return self.concavity_pass and self.truncated_dominance_pass


def verify_ghs(params: ModelParams, extents, bc: str, h_grid, tol: float = TOL) -> GHSReport:
    """GHS consequences along a grid of (continuum) fields ``h``.

    (i) every ``M_x(h) = <s_x>`` has non-positive second divided differences;
    (ii) ``<s_x; s_y>`` at each ``h > 0`` is at most ``<s_x s_y>`` at ``h = 0``.
    """
    h_grid = np.asarray(h_grid, dtype=float)
    if h_grid.size < 3:
        raise OracleError("h_grid needs at least 3 points")
    if np.any(np.diff(h_grid) <= 0) or np.any(h_grid < 0):
        raise OracleError("h_grid must be strictly increasing and non-negative")
    moms = [enumerate_moments(params.with_field(float(h)), extents, bc) for h in h_grid]
    hl = np.array([m.params.h_lat for m in moms])
    mag = np.stack([m.one_point for m in moms])
    d1 = np.diff(mag, axis=0) / np.diff(hl)[:, None]
    d2 = np.diff(d1, axis=0) / (0.5 * (hl[2:] - hl[:-2]))[:, None]
    max_d2 = float(d2.max())
    zero = moms[0] if hl[0] == 0 else enumerate_moments(params.with_field(0.0), extents, bc)
    excess = max(float((m.truncated - zero.two_point).max()) for m, hv in zip(moms, hl) if hv > 0)
    return GHSReport(max_d2, bool(max_d2 <= tol), excess, bool(excess <= tol))


@dataclass(frozen=True)
class ExponentialBoundReport:
    m_grid: np.ndarray
    log_mgf: np.ndarray
    gaussian_bound: np.ndarray
    passed: bool


def verify_plus_exponential_bound(params: ModelParams, extents, m_grid, tol: float = TOL) -> ExponentialBoundReport:
    """``log <exp(M sum s)>^+ <= M <sum s>^+ + M^2 Var^+(sum s) / 2`` for ``M >= 0``.

    Evaluated exactly on a plus-boundary box; the bound follows from the
    non-positive third cumulant that GHS gives in non-negative fields.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    if np.any(m_grid < 0):
        raise OracleError("m_grid must be non-negative")
    base = enumerate_moments(params, extents, "plus")
    mean = base.one_point.sum()
    var = base.truncated.sum()
    h_lat = params.h_lat
    log_mgf = np.array([
        enumerate_moments(ModelParams.lattice_units(params.beta, h_lat + m, params.d, params.eta),
                          extents, "plus").log_partition - base.log_partition
        for m in m_grid])
    bound = m_grid * mean + 0.5 * m_grid ** 2 * var
    return ExponentialBoundReport(m_grid, log_mgf, bound, bool(np.all(log_mgf <= bound + tol)))


def negate_truncated(moments):
    """Copy of ``moments`` with the truncated matrix negated (negative control)."""
    out = replace(moments)
    out.truncated = -np.asarray(moments.truncated)
    return out
