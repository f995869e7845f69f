from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from doerl.cli import main, parse_seeds
from doerl.config import load_config
from doerl.mdp import mdp_to_dict, random_mdp
from doerl.svg import comparison_svg, downsample_log

ROOT = Path(__file__).resolve().parents[1]


def _config(tmp_path: Path, name: str = "cfg.json", **overrides) -> Path:
    doc = {
        "version": "1.0",
        "mode": "tabular",
        "environment": {"generator": {"num_states": 3, "num_actions": 2, "horizon": 2}},
        "model_class": {"size": 4, "perturbation": 0.2},
        "schedule": {"known_T": 64},
        "knobs": {"c_eta": 1e6},
        "solver": {"max_iters": 30, "restarts": 1},
        "seeds": [0],
    }
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1,4,7") == [1, 4, 7]
    assert parse_seeds("0-1,5") == [0, 1, 5]


def test_run_minimal_config(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(_config(tmp_path)), "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["run_seed0.csv", "run_seed0.json", "timings.json"]
    text = (out / "run_seed0.csv").read_bytes()
    assert text.startswith(b"t,m,h,regret,cum_regret\n") and b"\r" not in text
    side = json.loads((out / "run_seed0.json").read_text())
    assert side["schema"] == "doerl.runlog" and side["version"] == "1.0"
    assert side["counters"]["estimation_calls"] == side["counters"]["planning_calls"]


def test_config_errors_exit_2_without_files(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(_config(tmp_path, delta=-0.1)), "--out", str(out)]) == 2
    assert not out.exists()
    assert main(["run", str(_config(tmp_path, knobs={"c_eta": 0})), "--out", str(out)]) == 2
    assert main(["run", str(_config(tmp_path, bogus=1)), "--out", str(out)]) == 2
    assert main(["run", str(_config(tmp_path, version="2.0")), "--out", str(out)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert main(["run", str(_config(tmp_path)), "--workers", "0"]) == 2
    assert main(["nonsense"]) == 2
    assert not out.exists()


def test_seed_grid_is_reproducible(tmp_path):
    cfg = _config(tmp_path, schedule={"known_T": 16})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--seeds", "0-19", "--out", str(a), "--workers", "2"]) == 0
    assert main(["run", str(cfg), "--seeds", "0-19", "--out", str(b)]) == 0
    runs = sorted(p.name for p in a.glob("run_seed*"))
    assert len(runs) == 40
    for name in runs:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_compare_counts_and_mixed_horizons(tmp_path):
    doerl_dir, base_dir = tmp_path / "doerl", tmp_path / "base"
    assert main(["run", str(_config(tmp_path, "d.json", seeds=[0, 1])), "--out", str(doerl_dir)]) == 0
    assert main(["run", str(_config(tmp_path, "b.json", mode="baseline", seeds=[0, 1])), "--out", str(base_dir)]) == 0
    out = tmp_path / "cmp"
    assert main(["compare", str(doerl_dir), str(base_dir), "--out", str(out)]) == 0
    rows = {r["agent"]: r for r in csv.DictReader((out / "comparison.csv").open())}
    assert rows["baseline"]["estimation_calls"] == rows["baseline"]["planning_calls"] == "64"
    sidecar = json.loads((doerl_dir / "run_seed0.json").read_text())
    n_calls = len(sidecar["schedule"]["taus"]) - 1
    assert rows["doerl-tabular"]["estimation_calls"] == str(2 * n_calls)
    svg = (out / "comparison.svg").read_text()
    assert svg.startswith("<svg") and "doerl-tabular" in svg and "baseline" in svg
    single = tmp_path / "single"
    assert main(["compare", str(doerl_dir), "--out", str(single)]) == 0
    assert len((single / "comparison.csv").read_text().splitlines()) == 2
    other = tmp_path / "h3"
    cfg3 = _config(tmp_path, "h3.json", environment={"generator": {"num_states": 3, "num_actions": 2, "horizon": 3}})
    assert main(["run", str(cfg3), "--out", str(other)]) == 0
    assert main(["compare", str(doerl_dir), str(other), "--out", str(tmp_path / "bad")]) == 2
    assert main(["compare", str(tmp_path / "empty_dir_missing"), "--out", str(tmp_path / "bad2")]) == 2


def test_validate_default_configs():
    for name in ("tabular.json", "linear.json", "baseline.json"):
        assert main(["validate", str(ROOT / "configs" / name)]) == 0


def test_validate_names_simplex_failure(tmp_path, capsys):
    doc = mdp_to_dict(random_mdp(2, 2, 2, np.random.default_rng(0)))
    doc["transitions"][0][0][0] = [0.9, 0.3]
    (tmp_path / "env.json").write_text(json.dumps(doc))
    cfg = _config(tmp_path, environment={"file": "env.json"})
    assert main(["validate", str(cfg)]) == 1
    assert "simplex" in capsys.readouterr().err
    assert main(["validate", str(_config(tmp_path, knobs={"c_eta": 0}))]) == 2


def test_environment_file_round_trip(tmp_path):
    (tmp_path / "env.json").write_text(json.dumps(mdp_to_dict(random_mdp(3, 2, 2, np.random.default_rng(1)))))
    cfg = _config(tmp_path, environment={"file": "env.json"})
    assert load_config(cfg).environment.file == "env.json"
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_svg_helpers():
    xs, ys = downsample_log(np.arange(1, 10001), np.sqrt(np.arange(1, 10001)), 50)
    assert len(xs) <= 60 and xs[0] == 1 and xs[-1] == 10000
    svg = comparison_svg({"a": (np.arange(1, 5), np.arange(4.0))}, {"a": (4, 4)}, "t")
    assert svg.count("<svg") == 1


@pytest.mark.parametrize("name", ["tabular.json", "linear.json", "baseline.json"])
def test_shipped_configs_parse(name):
    assert load_config(ROOT / "configs" / name).schedule.known_T == 12288
