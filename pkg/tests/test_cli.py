import math
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from gcdm import __version__
from gcdm import experiment as exp
from gcdm.cli import EXIT_CONSTRAINT, EXIT_INVARIANT, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main
from gcdm.config import load_config
from gcdm.world import marginal_density

EXAMPLE = str(resources.files("gcdm").joinpath("fixtures", "example.ini"))

INDEPENDENT = """\
[experiment]
version = 1
world = builtin:independent
content = left
style = high
n = 1000
seed = 11

[guidance]
alpha = 0
lambda = 0
beta_s = 0.5

[condition_schedule]
kind = none

[sampler]
kind = ddim
num_steps = 50
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_table(path):
    rows = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return rows[0].split(","), [r.split(",") for r in rows[1:]]


def test_validate_shipped_config(capsys):
    assert main(["validate", "--config", EXAMPLE]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") >= 10 and "FAIL" not in out
    assert "config_hash:" in out


def test_validate_beta_sum(tmp_path, capsys):
    path = write(tmp_path, INDEPENDENT.replace("beta_s = 0.5", "beta_s = 0.7\nbeta_c = 0.5"))
    assert main(["validate", "--config", path]) == EXIT_CONSTRAINT
    assert "beta_c + beta_s must equal 1" in capsys.readouterr().err


def test_validate_decreasing_steps(tmp_path, capsys):
    path = write(tmp_path, INDEPENDENT.replace("num_steps = 50", "steps = 0, 20, 10"))
    assert main(["validate", "--config", path]) == EXIT_CONSTRAINT


def test_parse_error_exit_code(tmp_path, capsys):
    path = write(tmp_path, INDEPENDENT.replace("alpha = 0", "alpha = zero"))
    assert main(["validate", "--config", path]) == EXIT_PARSE
    assert f"{path}:10 [guidance] alpha" in capsys.readouterr().err


def test_invariant_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(exp, "check_world", lambda w, s: [("world: forced failure", False, "")])
    assert main(["validate-world", "builtin:dependent"]) == EXIT_INVARIANT
    assert "FAIL  world: forced failure" in capsys.readouterr().out


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["simulate"])
    assert info.value.code == EXIT_USAGE


def test_exit_codes_are_distinct():
    assert len({EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_CONSTRAINT, EXIT_INVARIANT}) == 5


def test_validate_world_reports_indicator(capsys):
    assert main(["validate-world", "builtin:independent"]) == EXIT_OK
    assert "dependence indicator = independent" in capsys.readouterr().out
    assert main(["validate-world", "builtin:dependent"]) == EXIT_OK
    assert "dependence indicator = dependent" in capsys.readouterr().out


def test_simulate_moments_and_headers(tmp_path, capsys):
    path = write(tmp_path, INDEPENDENT)
    out = tmp_path / "out"
    assert main(["simulate", "--config", path, "--out", str(out), "--trajectories"]) == EXIT_OK
    cfg = load_config(path)
    h = cfg.config_hash()
    files = sorted(out.iterdir())
    assert {f.name.split(".", 1)[1] for f in files} == {"samples.csv", "metrics.csv", "trajectories.csv"}
    for f in files:
        head = f.read_text().splitlines()[:3]
        assert head == [f"# gcdm {__version__}", f"# config_hash: {h}", "# seed: 11"]
    cols, rows = read_table(out / f"{h[:12]}.metrics.csv")
    assert cols == ["config_hash", "metric", "value", "n", "seed"]
    metrics = {r[1]: float(r[2]) for r in rows}
    assert {"realism", "diversity", "kl", "w2", "mean_0", "cov_01"} <= set(metrics)
    m = marginal_density(cfg.world)
    sd = np.sqrt(np.diag(m.covariance()))
    for k in range(2):
        assert abs(metrics[f"mean_{k}"] - m.mean()[k]) < 4 * sd[k] / math.sqrt(cfg.n)
    cols, rows = read_table(out / f"{h[:12]}.trajectories.csv")
    assert cols[:4] == ["traj", "t", "x0", "x1"] and len(rows) == 1000 * 51


def test_simulate_is_byte_identical(tmp_path):
    path = write(tmp_path, INDEPENDENT)
    for d in ("a", "b"):
        assert main(["simulate", "--config", path, "--out", str(tmp_path / d)]) == EXIT_OK
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_sdedit_t0_zero_returns_reference(tmp_path):
    text = INDEPENDENT.replace("n = 1000", "n = 2").replace(
        "num_steps = 50", "num_steps = 50\nstart = sdedit\nt0 = 0\nx0 = 0.5, -0.25; 1.125, 3.0"
    )
    path = write(tmp_path, text)
    assert main(["simulate", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    h = load_config(path).config_hash()
    _, rows = read_table(tmp_path / f"{h[:12]}.samples.csv")
    assert [[float(v) for v in r[1:]] for r in rows] == [[0.5, -0.25], [1.125, 3.0]]


def test_seed_override_changes_hash(tmp_path, capsys):
    path = write(tmp_path, INDEPENDENT.replace("n = 1000", "n = 10"))
    main(["simulate", "--config", path, "--out", str(tmp_path / "o"), "--seed", "99"])
    names = {p.name for p in (tmp_path / "o").iterdir()}
    cfg = load_config(path)
    assert not any(n.startswith(cfg.config_hash()[:12]) for n in names)


SWEEP = """\
[experiment]
version = 1
world = builtin:dependent
content = c0
style = s1
n = 2000
seed = 0

[guidance]
alpha = 1.5
beta_s = 1.0

[condition_schedule]
kind = none
"""


def sweep_rows(path):
    cols, rows = read_table(path)
    return cols, rows, [ln for ln in path.read_text().splitlines() if ln.startswith("# arg")]


def test_sweep_lambda_realism_ordering(tmp_path, capsys):
    path = write(tmp_path, SWEEP)
    assert main(["sweep", "--config", path, "--grid", "lambda=0,0.5,1", "--out", str(tmp_path)]) == EXIT_OK
    out = tmp_path / f"{load_config(path).config_hash()[:12]}.sweep.csv"
    cols, rows, summary = sweep_rows(out)
    assert cols == ["config_hash", "alpha", "lambda", "beta_s", "a", "b", "metric", "value", "n", "seed"]
    realism = {float(r[2]): float(r[7]) for r in rows if r[6] == "realism"}
    assert realism[0.0] <= realism[0.5] <= realism[1.0]
    assert any(s.startswith("# argmax realism: alpha=1.5,lambda=1.0") for s in summary)
    assert len(summary) == 4


def test_single_point_sweep_equals_simulate(tmp_path, capsys):
    path = write(tmp_path, SWEEP.replace("n = 2000", "n = 300"))
    main(["sweep", "--config", path, "--grid", "lambda=0.9", "--out", str(tmp_path / "s")])
    main(["simulate", "--config", path, "--out", str(tmp_path / "m")])
    cfg = load_config(path)
    _, rows, _ = sweep_rows(tmp_path / "s" / f"{cfg.config_hash()[:12]}.sweep.csv")
    _, mrows = read_table(tmp_path / "m" / f"{cfg.config_hash()[:12]}.metrics.csv")
    assert [(r[6], r[7]) for r in rows] == [(r[1], r[2]) for r in mrows]


def test_sweep_grid_from_config(tmp_path, capsys):
    path = write(tmp_path, SWEEP.replace("n = 2000", "n = 50") + "[sweep]\nalpha = 0, 1\n")
    assert main(["sweep", "--config", path, "--out", str(tmp_path)]) == EXIT_OK


def test_empty_or_bad_grid(tmp_path, capsys):
    path = write(tmp_path, SWEEP)
    assert main(["sweep", "--config", path, "--out", str(tmp_path)]) == EXIT_CONSTRAINT
    assert main(["sweep", "--config", path, "--grid", "gamma=1", "--out", str(tmp_path)]) == EXIT_CONSTRAINT
    assert main(["sweep", "--config", path, "--grid", "a=0.1", "--out", str(tmp_path)]) == EXIT_CONSTRAINT


def test_sweep_beta_s_displacement_is_linear():
    # fixed eps fields: CDM composite is affine in beta_s
    cfg = load_config(EXAMPLE).with_overrides(**{"lambda": 0.0})
    x = np.random.default_rng(0).normal(size=(20, 2))
    out = {b: exp.guided_field(cfg.with_overrides(beta_s=b))(x, 300) for b in (0.0, 0.25, 1.0)}
    np.testing.assert_allclose(out[0.25], 0.75 * out[0.0] + 0.25 * out[1.0], atol=1e-12)


def schedule_rows(args, tmp_path):
    out = tmp_path / "sched.csv"
    assert main(["schedule-plot", *args, "--out", str(out)]) == EXIT_OK
    cols, rows = read_table(out)
    assert cols == ["t", "w_c", "w_s", "snr"]
    return {int(r[0]): (float(r[1]), float(r[2])) for r in rows}


def test_schedule_plot_sigmoid(tmp_path, capsys):
    rows = schedule_rows([], tmp_path)
    assert len(rows) == 1000 and rows[550] == (0.5, 0.5)


def test_schedule_plot_exclusive(tmp_path, capsys):
    rows = schedule_rows(["--kind", "exclusive"], tmp_path)
    assert all(rows[t] == (0.0, 1.0) for t in range(551))
    assert all(rows[t] == (1.0, 0.0) for t in range(551, 1000))


def test_schedule_plot_linear(tmp_path, capsys):
    rows = schedule_rows(["--kind", "linear"], tmp_path)
    assert rows[0][1] == 1.0 and rows[999][1] == 0.0


def test_schedule_plot_from_config(tmp_path, capsys):
    rows = schedule_rows(["--config", EXAMPLE], tmp_path)
    assert rows[550] == (0.5, 0.5)


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "gcdm", "validate-world", "builtin:nothing"], capture_output=True, text=True
    )
    assert proc.returncode == EXIT_PARSE
    proc = subprocess.run([sys.executable, "-m", "gcdm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
