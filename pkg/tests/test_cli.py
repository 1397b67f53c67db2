import json

import numpy as np
import pytest
import yaml

from isingline import pipeline
from isingline.cli import main
from isingline.config import ConfigError, load, validate
from isingline.synthetic import (THREE_EXP, bundled_three_exponential, read_estimate_csv, three_exponential_dataset,
                                 write_estimate_csv)

MINIMAL = {"schema_version": 1, "seed": 7, "model": {"beta": 0.44, "h": 0.2}, "lattice": {"extents": [3, 3]},
           "simulate": {"therm_sweeps": 10, "n_measure": 150}}


def write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_defaults_filled_in():
    cfg = validate({"schema_version": 1, "seed": 0})
    assert cfg["model"]["beta"] == "critical" and cfg["simulate"]["sampler"] == "compound"


@pytest.mark.parametrize("patch, field", [
    ({"model": {"a": 0}}, "model.a"),
    ({"model": {"a": -1.0}}, "model.a"),
    ({"simulate": {"n_measure": 0}}, "simulate.n_measure"),
    ({"lattice": {"bc": "twisted"}}, "lattice.bc"),
    ({"model": {"tempreature": 1.0}}, "model.tempreature: unknown key"),
    ({"typo_section": {}}, "typo_section: unknown key"),
    ({"schema_version": 2}, "schema_version"),
])
def test_schema_errors_name_the_field(patch, field):
    doc = {"schema_version": 1, "seed": 0}
    doc.update(patch)
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        validate(doc)


def test_cross_checks():
    with pytest.raises(ConfigError, match="lattice.extents"):
        validate({"schema_version": 1, "seed": 0, "lattice": {"extents": [4, 4, 4]}})
    with pytest.raises(ConfigError, match="model.eta"):
        validate({"schema_version": 1, "seed": 0, "model": {"d": 3, "beta": 0.2}, "lattice": {"extents": [2, 2, 2]}})
    with pytest.raises(ConfigError, match="model.beta"):
        validate({"schema_version": 1, "seed": 0, "model": {"d": 3, "eta": 0.036}, "lattice": {"extents": [2, 2, 2]}})


def test_load_reports_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        load(p)
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.yaml")


def test_minimal_simulate_emits_manifest(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", MINIMAL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "simulate" / "manifest.json").read_text())
    assert len(man["outputs"]) >= 2
    assert man["seed"] == 7 and man["code_version"] and man["config"]["model"]["beta"] == 0.44
    assert set(man["timestamps"]) == {"started", "finished"}


def test_simulate_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", MINIMAL)
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    a = json.loads((tmp_path / "a" / "simulate" / "manifest.json").read_text())["outputs"]
    b = json.loads((tmp_path / "b" / "simulate" / "manifest.json").read_text())["outputs"]
    assert a == b


def test_schema_error_exit_code(tmp_path, capsys):
    doc = dict(MINIMAL, model={"a": 0})
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "model.a" in capsys.readouterr().err


def test_analyze_before_simulate_is_missing_stage(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", MINIMAL)
    assert main(["analyze", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "no manifest" in capsys.readouterr().err
    with pytest.raises(pipeline.MissingStageError):
        pipeline.run_analyze(validate(MINIMAL), tmp_path / "o")


def test_stale_input_is_digest_mismatch(tmp_path):
    cfg = validate(MINIMAL)
    out = tmp_path / "o"
    pipeline.run_simulate(cfg, out)
    np.save(out / "simulate" / "chain0_magnetization.npy", np.zeros(3))
    with pytest.raises(pipeline.DigestMismatchError, match="stale"):
        pipeline.run_analyze(cfg, out)


def test_resume_only_for_simulate(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", MINIMAL)
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o"), "--resume", "x.json"]) == 1


def test_resume_reproduces_simulation(tmp_path):
    doc = dict(MINIMAL, simulate={"therm_sweeps": 10, "n_measure": 150, "checkpoint_every": 50})
    cfg = validate(doc)
    pipeline.run_simulate(cfg, tmp_path / "a")
    ck = tmp_path / "a" / "simulate" / "chain0.checkpoint.json"
    assert ck.exists()
    pipeline.run_simulate(cfg, tmp_path / "b", resume=str(ck))
    a = np.load(tmp_path / "a" / "simulate" / "chain0_magnetization.npy")
    b = np.load(tmp_path / "b" / "simulate" / "chain0_magnetization.npy")
    assert np.array_equal(a, b)


def test_verify_standard_grid_all_pass(tmp_path):
    cfg = validate({"schema_version": 1, "seed": 0})
    pipeline.run_verify(cfg, tmp_path)
    rep = json.loads((tmp_path / "verify" / "verify.json").read_text())
    assert rep["all_pass"] and len(rep["cases"]) == 2 * 2 * 3 * 3


def test_enumerate_writes_pair_table(tmp_path):
    cfg = validate(dict(MINIMAL, enumerate={"extents": [2, 3], "strip_width": 2, "strip_length": 6}))
    pipeline.run_enumerate(cfg, tmp_path)
    doc = json.loads((tmp_path / "enumerate" / "exact_moments.json").read_text())
    assert len(doc["pairs"]) == 21
    assert (tmp_path / "enumerate" / "strip_khat.csv").exists()


def test_line_study_pipeline_end_to_end(tmp_path):
    doc = {"schema_version": 1, "seed": 3, "model": {"h": 0.05}, "lattice": {"extents": [16, 32]},
           "simulate": {"therm_sweeps": 20, "n_measure": 600, "L_list": [2, 4], "s_values": [0, 2],
                        "newman_stride": 8, "profile_max_sep": 4},
           "analyze": {"n_blocks": 10, "max_t": 6, "eps_grid": [0.5, 5], "wu_window": [1, 4], "cf": True},
           "fit": {"n_bootstrap": 5}}
    cfg = write_cfg(tmp_path / "c.yaml", doc)
    out = str(tmp_path / "o")
    for stage in ("simulate", "analyze", "fit", "report"):
        assert main([stage, "--config", cfg, "--out", out]) == 0
    rep = (tmp_path / "o" / "report" / "report.md").read_text()
    assert "mass gap" in rep or "K(1)" in rep
    rows = (tmp_path / "o" / "report" / "report.csv").read_text().splitlines()
    assert rows[0] == "quantity,value,error,reference"
    assert all(r.split(",")[2] for r in rows[1:])
    for f in ("khat.csv", "cumulants.csv", "newman.csv", "cf.csv", "profile.csv"):
        assert (tmp_path / "o" / "analyze" / f).exists()


def test_fit_on_bundled_synthetic(tmp_path):
    cfg = validate({"schema_version": 1, "seed": 0,
                    "fit": {"source": "synthetic", "n_terms": 1, "n_bootstrap": 0, "t_min": 10.0}})
    pipeline.run_fit(cfg, tmp_path)
    fit = json.loads((tmp_path / "fit" / "fit.json").read_text())
    assert fit["source"] == "synthetic"
    # deep in the tail only the lightest mass survives
    assert fit["exp_mixture"]["terms"][0][1] == pytest.approx(0.5, rel=0.05)


def test_bundled_dataset_matches_generator(tmp_path):
    k = bundled_three_exponential()
    ref = three_exponential_dataset()
    assert np.array_equal(k.t_grid, ref.t_grid) and np.array_equal(k.values, ref.values)
    assert k.t_grid.size == 201 and k.meta["masses"] == THREE_EXP["masses"]
    write_estimate_csv(tmp_path / "k.csv", ref)
    back = read_estimate_csv(tmp_path / "k.csv")
    assert np.array_equal(back.std_err, ref.std_err)


def test_csv_and_json_formatting(tmp_path):
    pipeline.write_csv(tmp_path / "x.csv", ["a", "b"], [[0.1, np.int64(3)], ["q,r", 1e-17]])
    assert (tmp_path / "x.csv").read_bytes() == b'a,b\r\n0.1,3\r\n"q,r",1e-17\r\n'
    pipeline.write_json(tmp_path / "x.json", {"b": np.float64(0.5), "a": np.arange(2)})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": [0, 1], "b": 0.5}
    assert (tmp_path / "x.json").read_text().index('"a"') < (tmp_path / "x.json").read_text().index('"b"')
