"""Markov chain Monte Carlo samplers for the Ising Gibbs measure.

The Gibbs weight is ``exp(beta * sum_bonds s_x s_y + sum_x h_x s_x)`` with
``h_x = h_lat`` (plus ``beta`` per clamped neighbour under plus boundary
conditions).  Three updates are provided: a Metropolis sweep, a heat-bath
sweep and a single-cluster Wolff step with a ghost spin carrying the field.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .lattice import LatticeError, ModelParams, SpinField, build_lattice, geometry

log = logging.getLogger(__name__)

SAMPLERS = ("metropolis", "heat_bath", "wolff", "compound")
CHECKPOINT_VERSION = 1


def chain_rng(master_seed: int, chain_id: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for ``(master_seed, chain_id)``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(chain_id),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class ChainState:
    field: SpinField
    rng: np.random.Generator
    sweeps_done: int = 0
    _scratch: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def new(cls, extents, bc="periodic", seed=0, chain_id=0, init="all_up"):
        rng = chain_rng(seed, chain_id)
        if init == "random":
            spins = (2 * rng.integers(0, 2, size=tuple(extents)) - 1).astype(np.int8)
            fld = SpinField(tuple(extents), bc, spins)
        else:
            fld = build_lattice(extents, bc, init)
        return cls(fld, rng)

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def scratch(self):
        n = self.field.n_sites
        if self._scratch is None or self._scratch[0].size != n:
            self._scratch = (np.empty(n, np.int32), np.empty(n, np.int32), np.zeros(n, np.bool_))
        return self._scratch


def _site_fields(params: ModelParams, fld: SpinField) -> np.ndarray:
    if fld.ndim != params.d:
        raise LatticeError(f"field has {fld.ndim} axes but params.d={params.d}")
    _, n_out = geometry(fld.extents, fld.bc)
    hsite = np.full(fld.n_sites, params.h_lat, dtype=np.float64)
    if fld.bc == "plus":
        hsite += params.beta * n_out
    return hsite


def metropolis_sweep(chain: ChainState, params: ModelParams) -> ChainState:
    """One sequential sweep of single-site Metropolis updates (in place)."""
    nbr, _ = geometry(chain.field.extents, chain.field.bc)
    _kernels.metropolis_sweep(chain.field.spins.reshape(-1), nbr, float(params.beta),
                              _site_fields(params, chain.field), chain.rng)
    chain.sweeps_done += 1
    return chain


def heat_bath_sweep(chain: ChainState, params: ModelParams) -> ChainState:
    """One sequential sweep of heat-bath (Glauber) updates (in place)."""
    nbr, _ = geometry(chain.field.extents, chain.field.bc)
    _kernels.heat_bath_sweep(chain.field.spins.reshape(-1), nbr, float(params.beta),
                             _site_fields(params, chain.field), chain.rng)
    chain.sweeps_done += 1
    return chain


def wolff_ghost_step(chain: ChainState, params: ModelParams, n_steps: int = 1) -> ChainState:
    """``n_steps`` single-cluster updates with a ghost spin (in place).

    At ``h_lat = 0`` (and no plus boundary) this is the plain Wolff update.
    The signed cluster size of the last step is kept on the chain as
    ``last_cluster`` for diagnostics.
    """
    if params.h_lat < 0:
        raise ValueError("wolff_ghost_step requires h_lat >= 0")
    nbr, _ = geometry(chain.field.extents, chain.field.bc)
    hsite = _site_fields(params, chain.field)
    p_add = -math.expm1(-2.0 * params.beta)
    stack, members, mark = chain.scratch()
    flat = chain.field.spins.reshape(-1)
    size = 0
    for _ in range(n_steps):
        size = _kernels.wolff_ghost_step(flat, nbr, p_add, hsite, chain.rng, stack, members, mark)
    chain.last_cluster = int(size)
    chain.sweeps_done += 1
    return chain


def compound_update(chain: ChainState, params: ModelParams, cluster_steps: int = 1) -> ChainState:
    """Cluster step(s) followed by one Metropolis sweep; counts as one update."""
    wolff_ghost_step(chain, params, cluster_steps)
    metropolis_sweep(chain, params)
    chain.sweeps_done -= 1
    return chain


def update(chain: ChainState, params: ModelParams, sampler: str, cluster_steps: int = 1) -> ChainState:
    if sampler == "metropolis":
        return metropolis_sweep(chain, params)
    if sampler == "heat_bath":
        return heat_bath_sweep(chain, params)
    if sampler == "wolff":
        return wolff_ghost_step(chain, params, cluster_steps)
    if sampler == "compound":
        return compound_update(chain, params, cluster_steps)
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


@dataclass(frozen=True)
class Schedule:
    therm_sweeps: int
    n_measure: int
    stride: int = 1
    sampler: str = "compound"
    cluster_steps: int = 1

    def __post_init__(self):
        if self.therm_sweeps < 0 or self.n_measure < 1 or self.stride < 1 or self.cluster_steps < 1:
            raise ValueError(f"schedule entries must be positive: {self}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")


@dataclass
class SampleSeries:
    values: np.ndarray
    sweep_stride: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    @property
    def sampled_span(self) -> int:
        return len(self.values) * self.sweep_stride


class HookError(RuntimeError):
    """An observable hook raised; the message records the chain position."""


class CheckpointError(RuntimeError):
    pass


def _encode_field(fld: SpinField) -> dict:
    bits = np.packbits((fld.spins.reshape(-1) > 0).astype(np.uint8))
    return {"extents": list(fld.extents), "bc": fld.bc,
            "spins": base64.b64encode(bits.tobytes()).decode("ascii")}


def _decode_field(doc: dict) -> SpinField:
    extents = tuple(doc["extents"])
    n = math.prod(extents)
    bits = np.frombuffer(base64.b64decode(doc["spins"]), dtype=np.uint8)
    up = np.unpackbits(bits)[:n].astype(np.int8)
    return SpinField(extents, doc["bc"], (2 * up - 1).reshape(extents))


def save_checkpoint(path, chain: ChainState, params: ModelParams, schedule: Schedule,
                    position: int, series: Mapping[str, list]) -> None:
    """Write a versioned JSON snapshot of the chain and the series so far."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "params": {"d": params.d, "a": params.a, "beta": params.beta, "h": params.h, "eta": params.eta},
        "schedule": schedule.__dict__,
        "field": _encode_field(chain.field),
        "rng_state": chain.rng_state,
        "sweeps_done": chain.sweeps_done,
        "position": position,
        "series": {k: np.asarray(v).tolist() for k, v in series.items()},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_text(json.dumps(doc, sort_keys=True))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(chain, params, schedule, position, series)`` from a checkpoint."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = doc["rng_state"]
    chain = ChainState(_decode_field(doc["field"]), rng, doc["sweeps_done"])
    params = ModelParams(**doc["params"])
    schedule = Schedule(**doc["schedule"])
    return chain, params, schedule, doc["position"], doc["series"]


def run_chain(params: ModelParams, schedule: Schedule, hooks: Mapping[str, Callable[[SpinField], object]],
              chain: ChainState | None = None, *, extents=None, bc="periodic", seed=0, chain_id=0,
              checkpoint_path=None, checkpoint_every: int = 0, resume_from=None,
              progress_every: float = 30.0) -> dict[str, SampleSeries]:
    """Thermalize, then record every hook each ``stride`` updates.

    Either pass a ``chain`` or ``extents`` (with ``bc``/``seed``/``chain_id``)
    to start from an all-up field.  With ``checkpoint_path`` and
    ``checkpoint_every > 0`` a snapshot is written every that many
    measurements; ``resume_from`` continues such a snapshot and reproduces the
    uninterrupted run bit for bit.
    """
    position = 0
    recorded: dict[str, list] = {name: [] for name in hooks}
    if resume_from is not None:
        chain, params, schedule, position, saved = load_checkpoint(resume_from)
        for name in hooks:
            recorded[name] = [np.asarray(v) if isinstance(v, list) else v for v in saved.get(name, [])]
    elif chain is None:
        if extents is None:
            raise ValueError("run_chain needs a chain or extents")
        chain = ChainState.new(extents, bc, seed, chain_id)

    total = schedule.therm_sweeps + schedule.n_measure * schedule.stride
    last_report = time.monotonic()
    while position < total:
        update(chain, params, schedule.sampler, schedule.cluster_steps)
        position += 1
        measured = position - schedule.therm_sweeps
        if measured > 0 and measured % schedule.stride == 0:
            for name, hook in hooks.items():
                try:
                    recorded[name].append(hook(chain.field))
                except Exception as exc:
                    raise HookError(f"hook {name!r} failed at update {position} "
                                    f"(measurement {measured // schedule.stride})") from exc
            n_done = measured // schedule.stride
            if checkpoint_path and checkpoint_every and n_done % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, chain, params, schedule, position, recorded)
        if progress_every and time.monotonic() - last_report > progress_every:
            log.info("chain %d: %d / %d updates", chain_id, position, total)
            last_report = time.monotonic()

    meta = {"params": params, "schedule": schedule}
    return {name: SampleSeries(np.asarray(vals), schedule.stride, dict(meta, observable=name))
            for name, vals in recorded.items()}


@dataclass(frozen=True)
class AutocorrEstimate:
    tau_int: float
    ess: float
    window: int
    tau_err: float = 0.0


def autocorrelation_function(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation rho(t), t = 0..n-1, via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    dx = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(dx, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return acov / acov[0]


def integrated_autocorrelation(series, c: float = 6.0, min_length: int = 100) -> AutocorrEstimate:
    """Integrated autocorrelation time with automatic windowing.

    ``tau(W) = 1/2 + sum_{t=1}^{W} rho(t)``; the window is the first ``W``
    with ``W >= c * tau(W)``.  An IID series has ``tau_int = 1/2``.
    """
    x = np.asarray(series.values if isinstance(series, SampleSeries) else series, dtype=float)
    if x.ndim != 1:
        raise ValueError("integrated_autocorrelation expects a scalar series")
    n = x.size
    if n < min_length:
        raise ValueError(f"series too short: {n} < {min_length}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if np.var(x) == 0.0:
        raise ValueError("series has zero variance")
    rho = autocorrelation_function(x)
    taus = 0.5 + np.cumsum(rho[1:])
    windows = np.arange(1, n)
    ok = np.nonzero(windows >= c * taus)[0]
    w = int(windows[ok[0]]) if ok.size else n - 1
    tau = float(max(taus[w - 1], 0.5))
    tau_err = tau * math.sqrt(2.0 * (2 * w + 1) / n)
    return AutocorrEstimate(tau, n / (2.0 * tau), w, tau_err)


def pilot_schedule(params: ModelParams, extents, bc="periodic", seed=0, sampler="compound",
                   n_measure: int = 1000, pilot_length: int = 1000, cluster_steps: int = 1,
                   observable: Callable[[SpinField], float] | None = None) -> tuple[Schedule, AutocorrEstimate]:
    """Derive stride (>= 2 tau) and thermalization (20 tau) from a pilot run."""
    observable = observable or (lambda f: f.magnetization())
    chain = ChainState.new(extents, bc, seed, chain_id=10_000)
    pilot = run_chain(params, Schedule(pilot_length // 10, pilot_length, 1, sampler, cluster_steps),
                      {"m": observable}, chain, progress_every=0)["m"]
    try:
        est = integrated_autocorrelation(pilot)
    except ValueError:
        est = AutocorrEstimate(0.5, float(pilot_length), 1)
    stride = max(1, math.ceil(2 * est.tau_int))
    therm = max(10, math.ceil(20 * est.tau_int))
    return Schedule(therm, n_measure, stride, sampler, cluster_steps), est
