import shutil

import pytest

from qsum.cli import Context, Store, bundled_config_path, load_config, run_pipeline


@pytest.fixture(scope="session")
def bundled_config():
    return load_config(bundled_config_path())


@pytest.fixture(scope="session")
def bundled_spec(bundled_config, tmp_path_factory):
    ctx = Context(bundled_config, Store(tmp_path_factory.mktemp("spec")))
    return ctx.spec


@pytest.fixture(scope="session")
def pipeline_run(bundled_config, tmp_path_factory):
    """Full bundled pipeline; the acceptance and CLI tests share this run."""
    out = tmp_path_factory.mktemp("run_a")
    manifest = run_pipeline(bundled_config, out_dir=out)
    return out, manifest


@pytest.fixture(scope="session")
def pipeline_rerun(bundled_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_b")
    manifest = run_pipeline(bundled_config, out_dir=out)
    return out, manifest


@pytest.fixture
def resumed_copy(pipeline_run, tmp_path):
    src, _ = pipeline_run
    dst = tmp_path / "resumed"
    shutil.copytree(src, dst)
    return dst


@pytest.fixture(scope="session")
def make_spec(bundled_config):
    """Factory for variants of the bundled problem on a small m-grid."""
    import copy

    from qsum.grids import make_mgrid
    from qsum.problem import build_spec

    def build(n_m=41, M_max=10.0, **overrides):
        d = copy.deepcopy(bundled_config.problem_dict())
        d.update(overrides)
        return build_spec(d, make_mgrid(float(d["beta"]), float(d["mu"]), M_max, n_m))

    return build


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
