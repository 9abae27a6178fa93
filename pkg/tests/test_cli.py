import copy
import csv
import io
import json
from importlib import resources

import numpy as np
import pytest
import yaml

from qsum.cli import (RunConfig, Store, bundled_config_path, load_config, main, resolve_config,
                      run_pipeline)
from qsum.errors import ParseError, SchemaError, StageError


@pytest.fixture
def raw_bundled():
    return yaml.safe_load(bundled_config_path().read_text())


def minimal(raw):
    return {"problem": raw["problem"], "covering": {"varsigma": raw["covering"]["varsigma"]}}


def test_minimal_config_gets_defaults(raw_bundled):
    cfg = resolve_config(minimal(raw_bundled))
    assert cfg.covering["delta_tilde"] == 0.1
    assert cfg.solver["tol"] == 1e-8
    assert cfg.grids["L"] == 80
    assert cfg.out_dir == "qsum_out"


def test_schema_errors_are_collected(raw_bundled):
    raw = minimal(raw_bundled)
    raw["problem"] = dict(raw["problem"], q=0.5, colour="red")
    raw["solver"] = {"tol": -1.0}
    with pytest.raises(SchemaError) as info:
        resolve_config(raw)
    v = info.value.violations
    assert any("problem.q" in s for s in v)
    assert any("problem.colour: unknown key" == s for s in v)
    assert any("solver.tol" in s for s in v)


def test_missing_varsigma(raw_bundled):
    raw = minimal(raw_bundled)
    raw["covering"] = {}
    with pytest.raises(SchemaError, match="covering.varsigma: missing required key"):
        resolve_config(raw)


def test_parse_error_carries_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("problem:\n  q: 16\n  k1: [1, 2\ncovering: {varsigma: 3}\n")
    with pytest.raises(ParseError) as info:
        load_config(p)
    assert info.value.line is not None and info.value.line >= 3


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "dup.yaml"
    p.write_text("covering:\n  varsigma: 3\n  varsigma: 4\n")
    with pytest.raises(ParseError) as info:
        load_config(p)
    assert info.value.line == 3


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(ParseError):
        load_config(tmp_path / "nowhere.yaml")
    (tmp_path / "empty.yaml").write_text("")
    with pytest.raises(ParseError):
        load_config(tmp_path / "empty.yaml")


def test_digest_ignores_out_dir(bundled_config):
    other = copy.deepcopy(bundled_config)
    other.out_dir = "elsewhere"
    assert other.digest() == bundled_config.digest()
    other.solver["tol"] = 1e-9
    assert other.digest() != bundled_config.digest()


def test_stage_without_prerequisite(bundled_config, tmp_path):
    with pytest.raises(StageError, match="requires accel artifact"):
        run_pipeline(bundled_config, ["borel2"], out_dir=tmp_path)
    assert (tmp_path / "manifest.json").exists()


def test_exit_codes(tmp_path, capsys):
    assert main(["borel2", "--out", str(tmp_path / "a")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: {q: 0.5}\n")
    assert main(["validate", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert main(["validate", "--tol", "-1", "--out", str(tmp_path / "c")]) == 2
    err = capsys.readouterr().err
    assert "configuration error" in err


def test_validate_stage_through_main(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["validate", "--out", str(out)]) == 0
    assert "validate  pass" in capsys.readouterr().out
    rep = json.loads((out / "validate.json").read_text())["summary"]
    for k in rep["kernels"]:
        assert k["laplace_norm_mismatch"] < 1e-10


def test_store_round_trip(tmp_path):
    s = Store(tmp_path)
    s.write_json("a.json", {"x": np.float64(1.5), "z": 1 + 2j, "v": np.arange(3)})
    assert s.read_json("a.json") == {"x": 1.5, "z": [1.0, 2.0], "v": [0, 1, 2]}
    arr = np.array([1 + 1j, 2.0])
    s.write_array("b.npy", arr)
    assert np.array_equal(s.read_array("b.npy"), arr)
    names = [e["path"] for e in s.listing()]
    assert names == ["a.json", "b.npy"]


# ---------------------------------------------------------------- full runs

def test_pipeline_passes(pipeline_run):
    _, manifest = pipeline_run
    assert manifest.exit_code == 0
    assert all(s["status"] == "pass" for s in manifest.stages.values())


def test_reruns_are_byte_identical(pipeline_run, pipeline_rerun):
    _, a = pipeline_run
    _, b = pipeline_rerun
    assert a.artifacts == b.artifacts
    assert a.without_clock() == b.without_clock()


def test_resume_reproduces_later_stages(pipeline_run, resumed_copy, bundled_config):
    out, first = pipeline_run
    for name in ("sum.json", "sum_u.csv", "verify.json", "envelope.csv", "flatness.csv"):
        (resumed_copy / name).unlink()
    again = run_pipeline(bundled_config, ["sum", "verify"], out_dir=resumed_copy)
    assert again.artifacts == first.artifacts
    assert set(again.stages) == set(first.stages)


def _golden(name: str) -> str:
    return resources.files("qsum").joinpath("data", "golden", name).read_text()


def _csv_numbers(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[float(x) for x in r] for r in rows[1:]])


def _close(a, b, path=""):
    if isinstance(a, dict):
        assert set(a) == set(b), path
        for k in a:
            _close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            _close(x, y, f"{path}[{i}]")
    elif isinstance(a, float):
        assert b == pytest.approx(a, rel=1e-6, abs=1e-12), path
    else:
        assert a == b, path


@pytest.mark.parametrize("name", ["family.json", "validate.json"])
def test_golden_json(pipeline_run, name):
    out, _ = pipeline_run
    _close(json.loads(_golden(name)), json.loads((out / name).read_text()), name)


def test_golden_verify(pipeline_run):
    out, _ = pipeline_run
    got = json.loads((out / "verify.json").read_text())
    got["summary"]["checks"]["residual"].pop("samples")
    want = json.loads(_golden("verify.json"))
    # tiny residuals and slacks sit at rounding level; compare the verdicts and the sizes
    for d in (got, want):
        res = d["summary"]["checks"]["residual"]
        res["max_relative_residual"] = res["max_relative_residual"] < 1e-8
        d["summary"]["checks"]["envelope"]["slack"] = abs(d["summary"]["checks"]["envelope"]["slack"]) < 1e-12
    _close(want, got, "verify")


@pytest.mark.parametrize("name", ["envelope.csv", "flatness.csv", "sum_u.csv"])
def test_golden_tables(pipeline_run, name):
    out, _ = pipeline_run
    want = _csv_numbers(_golden(name))
    got = _csv_numbers((out / name).read_text())
    assert got.shape == want.shape
    # noise-floor columns are rounding-level quantities
    assert np.allclose(got, want, rtol=1e-6, atol=1e-12)


def test_run_config_round_trips(bundled_config):
    again = resolve_config(json.loads(json.dumps(bundled_config.as_dict())))
    assert isinstance(again, RunConfig)
    assert again.digest() == bundled_config.digest()
