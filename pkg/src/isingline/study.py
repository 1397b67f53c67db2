"""One Monte Carlo line study: simulate once, record compact line data, analyze.

Per measurement the study stores column sums (for the covariance ratio),
integer power sums of window sums at every column (for cumulants), window
sums at a few fixed columns (for characteristic functions) and block sums of
the window at spaced columns (for the Newman bound).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussianity import ConvergenceTable, cf_report, gaussian_convergence_sweep, newman_bound_check
from .lattice import ModelParams, window_sites
from .observables import (KEstimate, LineSampleSet, check_monotone, column_sum_hook, even_column_sum_hook,
                          khat_from_columns, khat_symmetry, line_exponent, line_samples_from_sums,
                          window_moments_hook, window_sums_hook)
from .samplers import Schedule, run_chain


@dataclass
class LineStudySpec:
    extents: tuple = (256, 512)
    L_list: tuple = (16, 32, 64, 128)
    s_values: tuple = (0, 4, 8, 16)
    newman_stride: int = 16
    n_blocks: int = 50


@dataclass
class LineStudyData:
    params: ModelParams
    spec: LineStudySpec
    schedule: Schedule
    colsums: np.ndarray
    colsums_even: np.ndarray
    moments: dict
    line_sums: dict
    newman_blocks: dict
    newman_columns: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def magnetization(self) -> float:
        return float(self.colsums.mean(dtype=np.float64) / math.prod(self.spec.extents[1:]))


def study_hooks(params: ModelParams, spec: LineStudySpec):
    t_ext, y_ext = spec.extents
    cols = np.arange(0, t_ext, spec.newman_stride)
    hooks = {"colsum": column_sum_hook, "colsum_even": even_column_sum_hook}
    for L in spec.L_list:
        hooks[f"mom_{L}"] = window_moments_hook(L, params.a, y_ext)
        hooks[f"line_{L}"] = window_sums_hook(L, params.a, spec.s_values)
        hooks[f"newman_{L}"] = window_sums_hook(L, params.a, cols, blocks=True)
    return hooks, cols


def run_line_study(params: ModelParams, schedule: Schedule, spec: LineStudySpec, seed: int = 0,
                   chain_id: int = 0, **kwargs) -> LineStudyData:
    """Run one chain on a periodic box and collect the line-study series."""
    if len(spec.extents) != 2:
        raise ValueError("line studies run on 2D boxes")
    hooks, cols = study_hooks(params, spec)
    out = run_chain(params, schedule, hooks, extents=spec.extents, bc="periodic", seed=seed,
                    chain_id=chain_id, **kwargs)
    return LineStudyData(
        params, spec, schedule,
        out["colsum"].values, out["colsum_even"].values,
        {L: out[f"mom_{L}"].values for L in spec.L_list},
        {L: out[f"line_{L}"].values for L in spec.L_list},
        {L: out[f"newman_{L}"].values for L in spec.L_list},
        cols, {"seed": seed, "chain_id": chain_id})


@dataclass
class LineStudyResult:
    khat: KEstimate
    symmetry: object
    monotone: object
    convergence: ConvergenceTable
    newman: dict
    line_sets: dict
    magnetization: float


def line_sets_from_data(data: LineStudyData) -> dict:
    m = data.magnetization
    return {L: line_samples_from_sums(data.line_sums[L], data.spec.s_values, L, data.params, m)
            for L in data.spec.L_list}


def newman_samples(data: LineStudyData, L):
    """Rows ``U_j`` (one per measurement and Newman column) with ``sum_j U_j = X_L``."""
    p = data.params
    blocks = np.asarray(data.newman_blocks[L], dtype=float)        # (n, cols, m)
    n = window_sites(L, p.a)
    width = max(1, math.isqrt(int(math.floor(L / p.a + 1e-12))))
    sizes = np.diff(np.append(np.arange(0, 2 * n + 1, width), 2 * n + 1))
    u = p.a ** line_exponent(p) * (blocks - sizes * data.magnetization) / math.sqrt(2 * L)
    groups = np.repeat(np.arange(blocks.shape[0]), blocks.shape[1])
    return u.reshape(-1, u.shape[-1]), groups


def analyze_line_study(data: LineStudyData, max_t: int | None = None, with_cf: bool = True) -> LineStudyResult:
    nb = data.spec.n_blocks
    khat = khat_from_columns(data.colsums, data.params.a, max_t, nb)
    sym = khat_symmetry(data.colsums, data.colsums_even, data.params.a, max_t, nb,
                        t_max_check=khat.relative_error_cutoff())
    mono = check_monotone(khat)
    line_sets = line_sets_from_data(data)
    conv = gaussian_convergence_sweep(line_sets, data.moments, nb, with_cf)
    newman = {}
    for L in data.spec.L_list:
        u, groups = newman_samples(data, L)
        newman[L] = newman_bound_check(u, n_blocks=nb, groups=groups)
    return LineStudyResult(khat, sym, mono, conv, newman, line_sets, data.magnetization)
