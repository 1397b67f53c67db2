"""Lattice geometry, model parameters and field scalings.

Axis 0 is always the "time" axis; the remaining axes are space.  Spins are
stored as a dense ``int8`` array shaped like the box extents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

BOUNDARY_CONDITIONS = ("periodic", "free", "plus")
MAX_SITES = 1 << 26


class LatticeError(ValueError):
    """Invalid lattice geometry or model parameters."""


def critical_beta(d: int = 2) -> float:
    """Inverse critical temperature of the square-lattice Ising model.

    Only the two-dimensional value is built in: the root of
    ``sinh(2 beta) = 1``, i.e. ``asinh(1) / 2 = log(1 + sqrt 2) / 2``.
    """
    if d != 2:
        raise LatticeError(f"no built-in critical point for d={d}; supply beta explicitly")
    return 0.5 * math.asinh(1.0)


def field_exponent(d: int, eta: float) -> Fraction | float:
    """Exponent of ``a`` in the lattice field, ``(d + 2 - eta) / 2``.

    Returned as an exact :class:`~fractions.Fraction` when ``eta`` is a
    dyadic float (so d=2, eta=1/4 gives exactly 15/8).
    """
    try:
        return (d + 2 - Fraction(eta)) / 2
    except (TypeError, ValueError):
        return (d + 2 - eta) / 2


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of one Ising ensemble.

    ``h`` is the continuum external field; the field entering the Gibbs
    weight is :attr:`h_lat`, derived from ``(a, h, d, eta)`` on every access.
    """

    d: int = 2
    a: float = 1.0
    beta: float = field(default_factory=critical_beta)
    h: float = 0.0
    eta: float | None = None

    def __post_init__(self):
        if self.d not in (2, 3):
            raise LatticeError(f"dimension must be 2 or 3, got {self.d}")
        if not self.a > 0:
            raise LatticeError(f"a: lattice spacing must be > 0, got {self.a}")
        if not self.beta >= 0:
            raise LatticeError(f"beta: must be >= 0, got {self.beta}")
        if not self.h >= 0:
            raise LatticeError(f"h: external field must be >= 0, got {self.h}")
        if self.d == 2:
            if self.eta is None:
                object.__setattr__(self, "eta", 0.25)
            elif self.eta != 0.25:
                raise LatticeError(f"eta: fixed to 1/4 in d=2, got {self.eta}")
        elif self.eta is None:
            raise LatticeError("eta: required for d=3 (no default)")

    @property
    def field_exponent(self) -> Fraction | float:
        return field_exponent(self.d, self.eta)

    @property
    def h_lat(self) -> float:
        return float(self.a ** float(self.field_exponent) * self.h)

    def with_field(self, h: float) -> "ModelParams":
        return replace(self, h=h)

    @classmethod
    def lattice_units(cls, beta: float, h_lat: float, d: int = 2, eta: float | None = None):
        """Parameters with ``a = 1`` so that ``h_lat == h``."""
        return cls(d=d, a=1.0, beta=beta, h=h_lat, eta=eta)


def lattice_field(params: ModelParams) -> float:
    """Lattice external field ``a**((d + 2 - eta)/2) * h``."""
    return params.h_lat


@dataclass(frozen=True)
class SiteIndex:
    """A lattice site as coordinates and as a flat (C-order) index."""

    coords: tuple[int, ...]
    linear: int

    @classmethod
    def from_coords(cls, coords: Sequence[int], extents: Sequence[int], bc: str = "periodic"):
        coords = tuple(int(c) for c in coords)
        if len(coords) != len(extents):
            raise LatticeError("coordinate rank does not match extents")
        if bc == "periodic":
            coords = tuple(c % n for c, n in zip(coords, extents))
        elif any(not 0 <= c < n for c, n in zip(coords, extents)):
            raise LatticeError(f"site {coords} outside box {tuple(extents)}")
        return cls(coords, int(np.ravel_multi_index(coords, tuple(extents))))

    @classmethod
    def from_linear(cls, linear: int, extents: Sequence[int]):
        n = math.prod(extents)
        if not 0 <= linear < n:
            raise LatticeError(f"linear index {linear} outside [0, {n})")
        coords = tuple(int(c) for c in np.unravel_index(linear, tuple(extents)))
        return cls(coords, int(linear))


def _check_extents(extents, max_sites=MAX_SITES) -> tuple[int, ...]:
    extents = tuple(int(n) for n in extents)
    if not extents:
        raise LatticeError("extents must be non-empty")
    if any(n < 1 for n in extents):
        raise LatticeError(f"every extent must be >= 1, got {extents}")
    if math.prod(extents) > max_sites:
        raise LatticeError(f"site count {math.prod(extents)} exceeds cap {max_sites}")
    return extents


@lru_cache(maxsize=64)
def geometry(extents: tuple[int, ...], bc: str) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour table and outside-neighbour counts for a box.

    Returns ``(nbr, n_out)``.  ``nbr`` has shape ``(n_sites, 2 * ndim)`` with
    ``-1`` marking a missing neighbour.  Bonds follow the torus convention
    ``(x, x + e_mu)``: a periodic axis of extent 2 carries a double bond, one
    of extent 1 carries none.  ``n_out[x]`` counts neighbours lying outside a
    free/plus box (the clamped boundary layer under ``bc="plus"``).
    """
    if bc not in BOUNDARY_CONDITIONS:
        raise LatticeError(f"bc must be one of {BOUNDARY_CONDITIONS}, got {bc!r}")
    extents = _check_extents(extents)
    ndim = len(extents)
    n = math.prod(extents)
    coords = np.indices(extents).reshape(ndim, n)
    nbr = np.full((n, 2 * ndim), -1, dtype=np.int32)
    n_out = np.zeros(n, dtype=np.int32)
    for mu, size in enumerate(extents):
        for k, step in enumerate((1, -1)):
            c = coords.copy()
            c[mu] += step
            if bc == "periodic":
                if size == 1:
                    continue
                c[mu] %= size
                nbr[:, 2 * mu + k] = np.ravel_multi_index(tuple(c), extents)
            else:
                inside = (c[mu] >= 0) & (c[mu] < size)
                lin = np.full(n, -1, dtype=np.int64)
                lin[inside] = np.ravel_multi_index(tuple(c[:, inside]), extents)
                nbr[:, 2 * mu + k] = lin
                n_out += ~inside
    nbr.setflags(write=False)
    n_out.setflags(write=False)
    return nbr, n_out


def bonds(extents: tuple[int, ...], bc: str) -> np.ndarray:
    """Bond list ``(m, 2)``; each (x, x + e_mu) once, with torus multiplicity."""
    nbr, _ = geometry(tuple(extents), bc)
    forward = nbr[:, 0::2]
    i, k = np.nonzero(forward >= 0)
    return np.stack([i, forward[i, k]], axis=1).astype(np.int64)


@dataclass
class SpinField:
    """Spins ``+-1`` on a finite box with a declared boundary condition."""

    extents: tuple[int, ...]
    bc: str
    spins: np.ndarray

    def __post_init__(self):
        self.extents = _check_extents(self.extents)
        if self.bc not in BOUNDARY_CONDITIONS:
            raise LatticeError(f"bc must be one of {BOUNDARY_CONDITIONS}, got {self.bc!r}")
        self.spins = np.ascontiguousarray(self.spins, dtype=np.int8).reshape(self.extents)
        if not np.all(np.abs(self.spins) == 1):
            raise LatticeError("spins must be exactly -1 or +1")

    @property
    def ndim(self) -> int:
        return len(self.extents)

    @property
    def n_sites(self) -> int:
        return self.spins.size

    def copy(self) -> "SpinField":
        return SpinField(self.extents, self.bc, self.spins.copy())

    def magnetization(self) -> float:
        """Mean spin per site."""
        return float(self.spins.mean(dtype=np.float64))

    def neighbors(self, site: SiteIndex | int) -> list[int]:
        lin = site.linear if isinstance(site, SiteIndex) else int(site)
        nbr, _ = geometry(self.extents, self.bc)
        return [int(y) for y in nbr[lin] if y >= 0]


def build_lattice(extents, bc: str = "periodic", init: str = "all_up", seed: int | None = None,
                  max_sites: int = MAX_SITES) -> SpinField:
    """Create a spin field.

    ``init="all_up"`` sets every spin to +1; ``init="random"`` draws fair
    independent spins from ``seed`` (required).
    """
    extents = _check_extents(extents, max_sites)
    if init == "all_up":
        spins = np.ones(extents, dtype=np.int8)
    elif init == "random":
        if seed is None:
            raise LatticeError("init='random' requires a seed")
        rng = np.random.default_rng(seed)
        spins = (2 * rng.integers(0, 2, size=extents) - 1).astype(np.int8)
    else:
        raise LatticeError(f"init must be 'all_up' or 'random', got {init!r}")
    return SpinField(extents, bc, spins)


def snap_to_lattice(s: float, a: float) -> int:
    """Index of the point of ``a Z`` closest to ``s``; ties go toward -inf."""
    return int(math.ceil(s / a - 0.5))


def window_sites(L: float, a: float) -> int:
    """Half-width, in sites, of the window ``a Z cap [-L, L]``."""
    if not L > 0:
        raise LatticeError(f"L must be > 0, got {L}")
    return int(math.floor(L / a + 1e-12))
