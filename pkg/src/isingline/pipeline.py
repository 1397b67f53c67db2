"""Pipeline stages: simulate, enumerate, verify, analyze, fit, report.

Each stage writes plain files into ``<out>/<stage>/`` plus a
``manifest.json`` holding the config snapshot, master seed, code version,
timestamps and a SHA-256 digest of every output.  Downstream stages refuse
to run when an upstream manifest is missing or a digest no longer matches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import resolve_beta
from .exact import enumerate_moments, strip_transfer_moments, verify_ghs, verify_gks, verify_smm
from .gaussianity import GaussianityError, cf_report, cumulant_diagnostics, newman_bound_check
from .lattice import ModelParams
from .observables import (EstimatorError, axis_correlator_hook, check_monotone, khat_from_columns, khat_from_strip,
                          khat_symmetry, increment_scaling, line_samples_from_sums,
                          two_point_profile, wu_decay_profile)
from .samplers import Schedule, integrated_autocorrelation, run_chain
from .spectrum import (E8_SOURCE, SpectrumError, convert_measure, e8_ratio_report, fit_exp_mixture,
                       invert_spectral_measure, mass_gap)
from .study import LineStudyData, LineStudySpec, newman_samples, study_hooks
from .synthetic import bundled_three_exponential, read_estimate_csv

log = logging.getLogger(__name__)

STAGES = ("simulate", "enumerate", "verify", "analyze", "fit", "report")
UPSTREAM = {"analyze": ("simulate",), "fit": ("analyze",), "report": ()}
MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    pass


class MissingStageError(PipelineError):
    pass


class DigestMismatchError(PipelineError):
    pass


# --- file helpers -------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path, header, rows) -> None:
    def fmt(x):
        if isinstance(x, (float, np.floating)):
            return repr(float(x))
        if isinstance(x, (np.integer,)):
            return str(int(x))
        return x

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def stage_dir(out, stage) -> Path:
    d = Path(out) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(out, stage, cfg, started, inputs=None) -> dict:
    d = Path(out) / stage
    outputs = {p.relative_to(d).as_posix(): sha256(p) for p in sorted(d.rglob("*"))
               if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp")}
    man = {"stage": stage, "config": cfg, "seed": cfg["seed"], "code_version": __version__,
           "timestamps": {"started": started, "finished": _now()}, "outputs": outputs,
           "inputs": inputs or {}}
    write_json(d / MANIFEST, man)
    return man


def check_stage(out, stage) -> dict:
    """Load a stage manifest and verify every listed digest."""
    path = Path(out) / stage / MANIFEST
    if not path.exists():
        raise MissingStageError(f"stage '{stage}' has no manifest under {Path(out)}; run it first")
    man = json.loads(path.read_text())
    for rel, digest in man["outputs"].items():
        f = path.parent / rel
        if not f.exists():
            raise DigestMismatchError(f"{stage}/{rel} listed in the manifest is missing")
        if sha256(f) != digest:
            raise DigestMismatchError(f"{stage}/{rel} changed since the stage ran (stale input)")
    return man


def _inputs(out, stages):
    # digest of each upstream stage's outputs; timestamps stay out so reruns compare equal
    res = {}
    for s in stages:
        outputs = json.loads((Path(out) / s / MANIFEST).read_text())["outputs"]
        res[s] = hashlib.sha256(json.dumps(outputs, sort_keys=True).encode()).hexdigest()
    return res


def model_params(cfg) -> ModelParams:
    m = cfg["model"]
    return ModelParams(d=m["d"], a=m["a"], beta=resolve_beta(m["beta"], m["d"]), h=m["h"], eta=m["eta"])


# --- simulate ------------------------------------------------------------------

def _chain_job(args):
    cfg, chain_id, ckpt, resume = args
    params = model_params(cfg)
    sim = cfg["simulate"]
    extents = tuple(cfg["lattice"]["extents"])
    bc = cfg["lattice"]["bc"]
    hooks = {"magnetization": lambda f: f.magnetization()}
    if sim["L_list"]:
        if len(extents) != 2 or bc != "periodic":
            raise PipelineError("simulate.L_list: line studies need a periodic 2D lattice")
        spec = LineStudySpec(extents, tuple(sim["L_list"]), tuple(sim["s_values"]), sim["newman_stride"])
        line_hooks, _ = study_hooks(params, spec)
        hooks.update(line_hooks)
    if sim["profile_max_sep"]:
        if len(extents) != 2 or bc != "periodic":
            raise PipelineError("simulate.profile_max_sep: the axis profile needs a periodic 2D lattice")
        hooks["axis_corr"] = axis_correlator_hook(sim["profile_max_sep"])
    schedule = Schedule(sim["therm_sweeps"], sim["n_measure"], sim["stride"], sim["sampler"], sim["cluster_steps"])
    series = run_chain(params, schedule, hooks, extents=extents, bc=bc, seed=cfg["seed"], chain_id=chain_id,
                       checkpoint_path=ckpt, checkpoint_every=sim["checkpoint_every"], resume_from=resume)
    return chain_id, {k: v.values for k, v in series.items()}


def run_simulate(cfg, out, threads: int = 1, resume=None) -> dict:
    started = _now()
    d = stage_dir(out, "simulate")
    sim = cfg["simulate"]
    n_chains = sim["n_chains"]
    if resume is not None and n_chains != 1:
        raise PipelineError("--resume supports single-chain runs only")
    jobs = []
    for c in range(n_chains):
        ckpt = str(d / f"chain{c}.checkpoint.json") if sim["checkpoint_every"] else None
        jobs.append((cfg, c, ckpt, resume))
    if threads > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, n_chains)) as ex:
            results = dict(ex.map(_chain_job, jobs))
    else:
        results = dict(map(_chain_job, jobs))
    params = model_params(cfg)
    summary = {"chains": {}}
    for c in range(n_chains):
        series = results[c]
        for name, values in series.items():
            np.save(d / f"chain{c}_{name}.npy", np.asarray(values))
        mag = np.asarray(series["magnetization"], dtype=float)
        entry = {"n_measure": int(mag.size), "magnetization": float(mag.mean())}
        try:
            tau = integrated_autocorrelation(mag)
            entry.update(tau_int=tau.tau_int, ess=tau.ess, magnetization_err=float(mag.std() / math.sqrt(tau.ess)))
        except ValueError as exc:
            entry["tau_int_error"] = str(exc)
        summary["chains"][str(c)] = entry
    if sim["L_list"]:
        merged = _merge(results, n_chains)
        m = float(merged["colsum"].mean(dtype=np.float64) / cfg["lattice"]["extents"][1])
        for L in sim["L_list"]:
            ls = line_samples_from_sums(merged[f"line_{L}"], sim["s_values"], L, params, m)
            write_csv(d / f"line_samples_L{_tag(L)}.csv", ["measurement"] + [f"s={s}" for s in sim["s_values"]],
                      [[i] + list(row) for i, row in enumerate(ls.samples)])
        summary["one_point_estimate"] = m
        summary["centering_mode"] = "estimated_mean"
    write_json(d / "summary.json", summary)
    return write_manifest(out, "simulate", cfg, started)


def _tag(L) -> str:
    return f"{L:g}".replace(".", "p")


def _merge(results, n_chains) -> dict:
    names = results[0].keys()
    return {k: np.concatenate([np.asarray(results[c][k]) for c in range(n_chains)]) for k in names}


def load_simulation(out, n_chains: int) -> dict:
    d = Path(out) / "simulate"
    names = sorted({p.name.split("_", 1)[1][:-4] for p in d.glob("chain0_*.npy")})
    return {n: np.concatenate([np.load(d / f"chain{c}_{n}.npy") for c in range(n_chains)]) for n in names}


# --- enumerate / verify --------------------------------------------------------

def run_enumerate(cfg, out) -> dict:
    started = _now()
    d = stage_dir(out, "enumerate")
    params = model_params(cfg)
    e = cfg["enumerate"]
    mom = enumerate_moments(params, tuple(e["extents"]), e["bc"])
    write_json(d / "exact_moments.json", {
        "extents": mom.extents, "bc": mom.bc, "beta": params.beta, "h_lat": params.h_lat,
        "log_partition": mom.log_partition, "one_point": mom.one_point, "pairs": mom.to_table()})
    if e["strip_width"]:
        strip = strip_transfer_moments(params, e["strip_length"], e["strip_width"])
        k = khat_from_strip(strip, params.a)
        write_csv(d / "strip_khat.csv", ["t", "value", "std_err"], k.to_rows())
    return write_manifest(out, "enumerate", cfg, started)


def verify_grid(cfg) -> list[dict]:
    v = cfg["verify"]
    d = cfg["model"]["d"]
    rows = []
    for ext in v["extents_list"]:
        ext = tuple(ext)
        for bc in v["bc_list"]:
            for beta in v["beta_list"]:
                b = resolve_beta(beta, d if len(ext) == d else 2)
                for h in v["h_lat_list"]:
                    p = ModelParams.lattice_units(b, h, len(ext), cfg["model"]["eta"] if len(ext) == 3 else None)
                    mom = enumerate_moments(p, ext, bc)
                    gks = verify_gks(mom, v["tol"])
                    smm = verify_smm(mom, v["tol"])
                    ghs = verify_ghs(ModelParams.lattice_units(b, 0.0, len(ext), p.eta), ext, bc,
                                     sorted(set(v["ghs_grid"]) | {h}), v["tol"])
                    rows.append({"extents": list(ext), "bc": bc, "beta": b, "h_lat": h,
                                 "gks": gks.passed, "gks_min_truncated": gks.min_truncated,
                                 "smm": smm.passed, "smm_checks": smm.n_checks,
                                 "smm_violations": len(smm.violations),
                                 "ghs": ghs.passed, "ghs_max_second_difference": ghs.max_second_difference,
                                 "ghs_max_dominance_excess": ghs.max_dominance_excess})
    return rows


def run_verify(cfg, out) -> dict:
    started = _now()
    d = stage_dir(out, "verify")
    rows = verify_grid(cfg)
    all_pass = all(r["gks"] and r["smm"] and r["ghs"] for r in rows)
    write_json(d / "verify.json", {"all_pass": all_pass, "tol": cfg["verify"]["tol"], "cases": rows})
    write_csv(d / "verify.csv", ["extents", "bc", "beta", "h_lat", "gks", "smm", "ghs"],
              [["x".join(map(str, r["extents"])), r["bc"], r["beta"], r["h_lat"], r["gks"], r["smm"], r["ghs"]]
               for r in rows])
    return write_manifest(out, "verify", cfg, started)


# --- analyze -------------------------------------------------------------------

def run_analyze(cfg, out) -> dict:
    up = check_stage(out, "simulate")
    started = _now()
    d = stage_dir(out, "analyze")
    params = model_params(cfg)
    an = cfg["analyze"]
    sim = up["config"]["simulate"]
    ext = up["config"]["lattice"]["extents"]
    data = load_simulation(out, sim["n_chains"])
    nb = an["n_blocks"]
    summary = {"params": {"beta": params.beta, "h": params.h, "h_lat": params.h_lat, "a": params.a}}
    if "colsum" in data:
        max_t = min(an["max_t"], ext[0] // 2)
        k = khat_from_columns(data["colsum"], params.a, max_t, nb)
        write_csv(d / "khat.csv", ["t", "value", "std_err"], k.to_rows())
        write_json(d / "khat.json", {"kind": k.kind, "n_measure": k.meta["n_measure"], "n_blocks": nb,
                                     "estimator": "Cov(C(s), C(s+t)) / Var(C(s)) over full spatial column sums",
                                     "params": summary["params"], "centering": "global mean"})
        sym = khat_symmetry(data["colsum"], data["colsum_even"], params.a, max_t, nb,
                            t_max_check=k.relative_error_cutoff())
        write_csv(d / "khat_symmetry.csv", ["t", "forward", "forward_err", "backward", "backward_err", "z"],
                  [[t, f, fe, b, be, z] for t, f, fe, b, be, z in
                   zip(sym.t_grid, sym.forward.values, sym.forward.std_err, sym.backward.values,
                       sym.backward.std_err, sym.z_scores)])
        mono = check_monotone(k)
        summary["khat"] = {"symmetry_pass": sym.passed, "monotone_pass": mono.passed,
                           "monotone_worst_sigma": mono.worst, "relative_error_cutoff": k.relative_error_cutoff()}
        try:
            eps = [e for e in an["eps_grid"] if e <= k.t_grid[-1]]
            inc = increment_scaling(k, eps)
            summary["increment_scaling"] = {"slope": inc.slope, "slope_err": inc.slope_err,
                                            "reference": inc.reference, "eps": inc.eps}
        except EstimatorError as exc:
            summary["increment_scaling"] = {"error": str(exc)}
    cum_rows, cf_rows, nm_rows = [], [], []
    m = float(data["colsum"].mean(dtype=np.float64) / ext[1]) if "colsum" in data else None
    skipped = {}
    for L in sim["L_list"]:
        try:
            c = cumulant_diagnostics(sums=data[f"mom_{L}"], n_blocks=nb)
            ls = line_samples_from_sums(data[f"line_{L}"], sim["s_values"], L, params, m)
            xc = cumulant_diagnostics(ls.samples[:, 0], n_blocks=nb, min_count=100)
        except GaussianityError as exc:
            skipped[str(L)] = str(exc)
            continue
        for stat in ("skewness", "excess_kurtosis"):
            cum_rows.append([L, stat, getattr(c, stat), getattr(c, stat + "_err")])
        cum_rows.append([L, "variance", xc.variance, xc.variance_err])
        if an["cf"]:
            rep = cf_report(ls, n_blocks=nb)
            for z, ecf, g, ge in zip(rep.r_grid, rep.empirical_cf, rep.gap, rep.gap_err):
                cf_rows.append([L, " ".join(repr(float(v)) for v in z), ecf.real, ecf.imag, g, ge])
        view = LineStudyData(params, LineStudySpec(tuple(ext), tuple(sim["L_list"])), None, data["colsum"],
                             data["colsum_even"], {}, {}, {L: data[f"newman_{L}"]}, None)
        u, groups = newman_samples(view, L)
        nr = newman_bound_check(u, n_blocks=nb, groups=groups)
        for i, (lhs, rhs, s, se, v) in enumerate(zip(nr.lhs, nr.rhs, nr.slack, nr.slack_err, nr.violated)):
            nm_rows.append([L, i, lhs, rhs, s, se, bool(v)])
    if skipped:
        summary["skipped_L"] = skipped
    if cum_rows:
        write_csv(d / "cumulants.csv", ["L", "statistic", "value", "std_err"], cum_rows)
        write_csv(d / "newman.csv", ["L", "r_index", "lhs", "rhs", "slack", "slack_err", "violated"], nm_rows)
        summary["newman_pass"] = not any(r[-1] for r in nm_rows)
    if cf_rows:
        write_csv(d / "cf.csv", ["L", "z", "cf_real", "cf_imag", "gap", "gap_err"], cf_rows)
    if "axis_corr" in data:
        prof = two_point_profile(data["axis_corr"], int(np.prod(ext)), nb)
        write_csv(d / "profile.csv", ["r", "value", "std_err"], prof.to_rows())
        try:
            wu = wu_decay_profile(prof, tuple(an["wu_window"]), extent=min(ext))
            summary["wu_fit"] = dict(wu.__dict__)
        except EstimatorError as exc:
            summary["wu_fit"] = {"error": str(exc)}
    write_json(d / "analysis.json", summary)
    return write_manifest(out, "analyze", cfg, started, _inputs(out, ["simulate"]))


# --- fit -----------------------------------------------------------------------

def run_fit(cfg, out) -> dict:
    f = cfg["fit"]
    inputs = {}
    if f["source"] == "analyze":
        check_stage(out, "analyze")
        path = Path(out) / "analyze" / "khat.csv"
        if not path.exists():
            raise MissingStageError("analyze produced no khat.csv (simulate.L_list was empty)")
        k = read_estimate_csv(path, kind="ratio")
        inputs = _inputs(out, ["analyze"])
    else:
        k = bundled_three_exponential()
    started = _now()
    d = stage_dir(out, "fit")
    result = {"source": f["source"]}
    m1 = None
    try:
        g = mass_gap(k, t_min=f["t_min"], t_max=f["t_max"])
        m1 = g.m1
        result["mass_gap"] = {"m1": g.m1, "error": g.error, "plateau_window": g.plateau_window}
    except SpectrumError as exc:
        result["mass_gap"] = {"error": str(exc)}
    try:
        fit = fit_exp_mixture(k, f["n_terms"], f["constraint_mode"], f["t_min"], f["t_max"],
                              n_bootstrap=f["n_bootstrap"], seed=cfg["seed"])
        result["exp_mixture"] = {"terms": fit.terms, "mass_errors": fit.mass_errors,
                                 "amplitude_errors": fit.amplitude_errors, "chi2_dof": fit.chi2_dof,
                                 "residual_norm": fit.residual_norm, "constraint_mode": fit.constraint_mode,
                                 "constraint_active": fit.constraint_active, "window": fit.window,
                                 "shape_ok": fit.shape_ok(k.t_grid)}
        if f["n_terms"] >= 2:
            result["e8_ratios"] = e8_ratio_report(fit)
        m1 = m1 if m1 is not None else fit.masses[0]
    except SpectrumError as exc:
        result["exp_mixture"] = {"error": str(exc)}
    mg = f["mass_grid"]
    if mg is not None:
        grid = np.arange(mg["start"], mg["stop"] + mg["step"] / 2, mg["step"])
    elif m1 is not None:
        grid = np.linspace(0.5 * m1, 4 * m1, 71)
    else:
        grid = None
    if grid is not None:
        try:
            meas = invert_spectral_measure(k, grid, f["lam"], t_min=f["t_min"] or 0.0, t_max=f["t_max"],
                                           max_rel=0.3)
            write_csv(d / "spectral_measure.csv", ["mass", "weight"], zip(meas.mass_grid, meas.weights))
            tilde = convert_measure(meas, "rho_tilde")
            write_csv(d / "spectral_measure_tilde.csv", ["mass", "weight"], zip(tilde.mass_grid, tilde.weights))
            result["spectral_measure"] = {"lam": meas.lam, "residual": meas.residual, "peaks": meas.peaks(),
                                          "total_weight": meas.total}
        except SpectrumError as exc:
            result["spectral_measure"] = {"error": str(exc)}
    result["e8_reference_source"] = E8_SOURCE
    write_json(d / "fit.json", result)
    return write_manifest(out, "fit", cfg, started, inputs)


# --- report --------------------------------------------------------------------

_REFS = {
    "magnetization": "one-point function used for centering the line sums",
    "khat": "covariance ratio K(t) of the standardized line observable",
    "excess_kurtosis": "Gaussian limit of the line observable X_L as L grows",
    "newman": "Newman's characteristic-function bound for FKG variables",
    "increment": "small-time behaviour K(0) - K(eps) ~ eps^(3/4)",
    "wu": "critical decay <s_0 s_N> ~ N^(-1/4) at h = 0",
    "m1": "mass gap: infimum of the spectral measure support",
    "mixture": "multi-exponential form of K with m1 < m2 < m3 < 2 m1",
    "e8": "E8 mass ratios (external literature)",
    "verify": "GKS, GHS and reflection (SMM) correlation inequalities",
}


def run_report(cfg, out) -> dict:
    present = [s for s in ("simulate", "enumerate", "verify", "analyze", "fit") if (Path(out) / s / MANIFEST).exists()]
    if not present:
        raise MissingStageError("report needs at least one completed stage")
    for s in present:
        check_stage(out, s)
    started = _now()
    d = stage_dir(out, "report")
    rows = []

    def add(name, value, err, ref):
        rows.append([name, value, "exact" if err is None else err, _REFS[ref]])

    if "simulate" in present:
        s = json.loads((Path(out) / "simulate" / "summary.json").read_text())
        for c, e in s["chains"].items():
            add(f"magnetization (chain {c})", e["magnetization"], e.get("magnetization_err", float("nan")),
                "magnetization")
    if "verify" in present:
        v = json.loads((Path(out) / "verify" / "verify.json").read_text())
        add("inequality suite all pass", v["all_pass"], None, "verify")
    if "analyze" in present:
        a = json.loads((Path(out) / "analyze" / "analysis.json").read_text())
        kpath = Path(out) / "analyze" / "khat.csv"
        if kpath.exists():
            k = read_estimate_csv(kpath, "ratio")
            for t, v, e in k.to_rows()[:6]:
                add(f"K({t:g})", v, None if t == 0 else e, "khat")
            inc = a.get("increment_scaling", {})
            if "slope" in inc:
                add("increment slope", inc["slope"], inc["slope_err"], "increment")
        cpath = Path(out) / "analyze" / "cumulants.csv"
        if cpath.exists():
            with open(cpath, newline="") as fh:
                for r in csv.DictReader(fh):
                    if r["statistic"] == "excess_kurtosis":
                        add(f"excess kurtosis L={r['L']}", float(r["value"]), float(r["std_err"]), "excess_kurtosis")
            add("Newman bound holds", a.get("newman_pass"), None, "newman")
        if "wu_fit" in a and "p" in a["wu_fit"]:
            add("decay exponent p", a["wu_fit"]["p"], a["wu_fit"]["p_err"], "wu")
    if "fit" in present:
        fj = json.loads((Path(out) / "fit" / "fit.json").read_text())
        if "m1" in fj.get("mass_gap", {}):
            add("mass gap m1", fj["mass_gap"]["m1"], fj["mass_gap"]["error"], "m1")
        mix = fj.get("exp_mixture", {})
        for i, ((b, m), me) in enumerate(zip(mix.get("terms", []), mix.get("mass_errors", []))):
            add(f"fitted mass m{i + 1}", m, me, "mixture")
        for key, val in fj.get("e8_ratios", {}).get("ratios", {}).items():
            add(f"ratio {key}", val, fj["e8_ratios"]["errors"][key], "e8")
            add(f"reference {key}", fj["e8_ratios"]["reference"][key], None, "e8")
    write_csv(d / "report.csv", ["quantity", "value", "error", "reference"], rows)
    lines = [f"# {cfg['report']['title']}", "",
             f"Code version {__version__}, master seed {cfg['seed']}. Stages present: {', '.join(present)}.", "",
             "| quantity | value | error | reference |", "|---|---|---|---|"]
    for name, value, err, ref in rows:
        val = f"{value:.6g}" if isinstance(value, float) else str(value)
        er = f"{err:.2g}" if isinstance(err, float) else str(err)
        lines.append(f"| {name} | {val} | {er} | {ref} |")
    lines += ["", "E8 reference ratios are " + E8_SOURCE + "."]
    (d / "report.md").write_text("\n".join(lines) + "\n")
    return write_manifest(out, "report", cfg, started, _inputs(out, present))
