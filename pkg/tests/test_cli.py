import json
import random

import pytest

from dynrcm import cli
from dynrcm.cli import ConfigError, main, parse_config

BASE = {
    "simulate": """
experiment = "simulate"
[environment]
kind = "markov-switching"
marginal = { kind = "uniform", low = 0.5, high = 2.0 }
switch_rate = 1.0
[sizes]
L = 6
T = 4.0
walkers = 50
horizon = 9.0
n = [2, 3]
[seeds]
environment = 3
walk = 4
""",
    "corrector": """
experiment = "corrector"
[environment]
kind = "time-periodic-deterministic"
slab_durations = [1.0, 0.5]
slab_patterns = [[1.0, 2.0], [3.0, 1.0, 0.5]]
[sizes]
L = 6
""",
    "verify-qip": """
experiment = "verify-qip"
[environment]
kind = "constant"
[sizes]
L = 4
walkers = 20000
horizon = 100.0
n = [10]
[seeds]
walk = 5
[martingale]
lags = [1.0, 5.0]
""",
    "sublinearity": """
experiment = "sublinearity"
[environment]
kind = "markov-switching"
marginal = { kind = "uniform", low = 0.5, high = 4.0 }
switch_rate = 0.5
[sizes]
L_per_n = 2
T_per_n2 = 1.0
n = [4, 8, 12]
""",
    "check-conditions": """
experiment = "check-conditions"
[conditions]
p_range = [1.1, 6.0]
q_range = [1.0, 6.0]
grid_points = 6
""",
    "sobolev-test": """
experiment = "sobolev-test"
[seeds]
environment = 2
[sobolev]
instances = 20
""",
}


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_main(tmp_path, text, *extra, out="out"):
    return main(["--config", write(tmp_path, text), "--out", str(tmp_path / out), *extra])


def test_verify_qip_constant_field(tmp_path):
    assert run_main(tmp_path, BASE["verify-qip"]) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["sigma2_formula"] == pytest.approx(2.0)
    assert abs(rep["sigma2_mc"] - 2.0) < 0.06
    for name in ("sigma2.csv", "ks.csv", "martingale.csv", "field.json"):
        assert (tmp_path / "out" / name).exists()


@pytest.mark.parametrize("exp,artifact", [("simulate", "endpoints.csv"), ("corrector", "harmonic.csv"),
                                          ("sublinearity", "sublinearity.csv"),
                                          ("check-conditions", "conditions.csv"),
                                          ("sobolev-test", "sobolev.csv")])
def test_each_experiment_runs(tmp_path, exp, artifact):
    assert run_main(tmp_path, BASE[exp]) == 0
    assert (tmp_path / "out" / artifact).stat().st_size > 0
    assert json.loads((tmp_path / "out" / "report.json").read_text())["metadata"]["experiment"] == exp


def test_condition_grid_csv_shape(tmp_path):
    run_main(tmp_path, BASE["check-conditions"])
    lines = (tmp_path / "out" / "conditions.csv").read_text().splitlines()
    assert lines[0] == "p,q,satisfied" and len(lines) == 1 + 36
    rows = [tuple(map(float, l.split(","))) for l in lines[1:]]
    assert (1.1, 1.0, 0.0) in rows and (6.0, 1.0, 1.0) in rows


@pytest.mark.parametrize("exp", ["simulate", "corrector", "verify-qip", "sublinearity", "sobolev-test"])
def test_rerun_is_byte_identical(tmp_path, exp):
    text = BASE[exp].replace("walkers = 20000", "walkers = 2000")
    run_main(tmp_path, text, out="a")
    run_main(tmp_path, text, "--threads", "2", out="b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        if name.endswith(".csv") or name == "field.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_missing_L_is_status_2_with_line(tmp_path, capsys):
    text = BASE["verify-qip"].replace("L = 4\n", "")
    assert run_main(tmp_path, text) == 2
    err = capsys.readouterr().err
    assert "sizes.L" in err and "missing" in err and "line " in err
    assert not (tmp_path / "out").exists()


def test_bad_value_reports_its_line(tmp_path, capsys):
    text = BASE["verify-qip"].replace("horizon = 100.0", "horizon = -1.0")
    assert run_main(tmp_path, text) == 2
    line = next(i for i, l in enumerate(text.splitlines(), 1) if l.startswith("horizon"))
    assert f"line {line}: field 'sizes.horizon'" in capsys.readouterr().err


def test_toml_syntax_error(tmp_path, capsys):
    assert run_main(tmp_path, "experiment = \n[sizes") == 2
    assert "TOML syntax error" in capsys.readouterr().err


def test_missing_file_is_config_error(tmp_path):
    assert main(["--config", str(tmp_path / "nope.toml")]) == 2


def test_failed_check_is_status_1_and_named(tmp_path, capsys):
    text = BASE["verify-qip"] + "[tolerances]\nsigma2_rel = 1e-9\n"
    assert run_main(tmp_path, text) == 1
    assert "sigma2" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert main(["--config", write(tmp_path, BASE["check-conditions"])]) == 0
    assert (tmp_path / "root" / "check-conditions" / "conditions.csv").exists()


def test_output_key_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    text = f'output = "{tmp_path / "here"}"\n' + BASE["check-conditions"]
    assert main(["--config", write(tmp_path, text)]) == 0
    assert (tmp_path / "here" / "report.json").exists()


def test_seed_override(tmp_path):
    run_main(tmp_path, BASE["simulate"], "--seed-override", str(2**64 - 1), out="a")
    seeds = json.loads((tmp_path / "a" / "report.json").read_text())["metadata"]["seeds"]
    assert seeds == {"environment": 2**64 - 1, "walk": 0}
    run_main(tmp_path, BASE["simulate"], out="b")
    assert (tmp_path / "a" / "endpoints.csv").read_bytes() != (tmp_path / "b" / "endpoints.csv").read_bytes()
    assert run_main(tmp_path, BASE["simulate"], "--seed-override", str(2**64), out="c") == 2


def test_strict_sobolev_adds_unsquared_columns(tmp_path):
    run_main(tmp_path, BASE["sobolev-test"], "--strict-sobolev")
    header = (tmp_path / "out" / "sobolev.csv").read_text().splitlines()[0]
    assert header == "instance,q_prime,lhs,rhs,holds,rhs_unsquared,holds_unsquared"
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["metadata"]["strict_sobolev"] and "unsquared_violations" in rep["metadata"]


def test_parse_defaults():
    cfg = parse_config(BASE["verify-qip"])
    assert cfg.env_seed == 0 and cfg.walk_seed == 5
    assert cfg.tolerances["sigma2_rel"] == 0.03 and cfg.lags == [1.0, 5.0]
    with pytest.raises(ConfigError):
        parse_config(BASE["verify-qip"] + "[tolerances]\nbogus = 1.0\n")
    with pytest.raises(ConfigError):
        parse_config(BASE["verify-qip"].replace("walkers = 20000", "walkers = 500"))


# -- fuzzing ---------------------------------------------------------------------------------

VALUES = ["0", "-1", "1", "2", "3", "0.5", "2.5", "1e-3", '"x"', "true", "[]", "[0]", "[1.0, -2.0]",
          "[2, 3]", "inf", "nan", "{}", '{ kind = "point", value = 2.0 }',
          '{ kind = "uniform", low = 3.0, high = 1.0 }', '"markov-switching"', '"static-iid"']


def mutate(text: str, rng: random.Random) -> str:
    lines = text.strip().splitlines()
    for _ in range(rng.randint(1, 3)):
        i = rng.randrange(len(lines))
        op = rng.random()
        if op < 0.45 and "=" in lines[i]:
            lines[i] = lines[i].split("=", 1)[0] + "= " + rng.choice(VALUES)
        elif op < 0.65:
            del lines[i]
            if not lines:
                lines = ["x = 1"]
        elif op < 0.75:
            lines.insert(i, rng.choice(["[sizes]", "L = 2", "walkers = 1000", "[[environment]]", "= 3",
                                        "experiment = \"corrector\"", "horizon = 1.0"]))
        elif op < 0.85:
            j = rng.randrange(len(lines))
            lines[i], lines[j] = lines[j], lines[i]
        else:
            lines[i] = lines[i][: rng.randrange(len(lines[i]) + 1)]
    return "\n".join(lines) + "\n"


def test_fuzzed_configs_never_crash(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "fuzz"))
    rng = random.Random(2024)
    kinds = list(BASE)
    statuses = {0: 0, 1: 0, 2: 0}
    for k in range(1000):
        text = mutate(BASE[kinds[k % len(kinds)]], rng).replace("walkers = 20000", "walkers = 1000")
        path = write(tmp_path, text, "fuzz.toml")
        status = main(["--config", path, "--out", str(tmp_path / "fuzz" / str(k))])
        assert status in (0, 1, 2), text
        statuses[status] += 1
    assert statuses[2] > 100 and statuses[0] + statuses[1] > 100
