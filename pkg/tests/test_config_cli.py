import json

import pytest

from phenoauth import cli
from phenoauth.config import ScenarioConfig, from_dict, load
from phenoauth.errors import BadConfig

SMALL = """
devices = 2
sessions = 6
mu_trials = 5
ind_trials = 40
reference_challenges = 4
"""


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL)
    return path


def test_defaults():
    cfg = from_dict({})
    assert cfg == ScenarioConfig()
    assert cfg.t_stable == pytest.approx(0.99)
    assert cfg.protocol_params().stable_votes == 7


def test_puf_table_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 5\n[puf]\ntemperatures = [25, 45]\nnominal = [25, 1.5]\n")
    cfg = load(p, seed=9, out=None)
    assert cfg.seed == 9 and cfg.puf.temperatures == (25.0, 45.0)
    assert cfg.puf.nominal.temperature == 25.0


@pytest.mark.parametrize("data", [
    {"sedd": 1},
    {"puf": {"colour": 1}},
    {"devices": 0},
    {"transport": "carrier-pigeon"},
    {"seed": -1},
    {"l": 7},
])
def test_bad_config(data):
    with pytest.raises(BadConfig):
        from_dict(data)


def test_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = = 1")
    with pytest.raises(BadConfig):
        load(p)


def test_seed_streams_are_independent():
    cfg = from_dict({"seed": 3})
    assert cfg.seed_for(1, 0) != cfg.seed_for(1, 1)
    assert cfg.seed_for(1, 0) == from_dict({"seed": 3}).seed_for(1, 0)
    assert cfg.seed_for(1, 0) != from_dict({"seed": 4}).seed_for(1, 0)


def test_enroll_then_auth(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["enroll", "--config", str(small_config), "--out", str(out)]) == 0
    for name in ("enroll.json", "reliability.png", "confidence.png", "nvm/dev0.json", "nvm/dev0.dpan"):
        assert (out / name).exists(), name
    capsys.readouterr()
    assert cli.main(["auth", "--config", str(small_config), "--out", str(out), "--swap", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["successes"] == 6 and report["cost_counts_ok"]
    rows = (out / "sessions.csv").read_text().splitlines()
    assert len(rows) == 7 and rows[0].startswith("session,prover,verifier")
    # NVM was persisted: a second run continues from the advanced state
    assert cli.main(["auth", "--config", str(small_config), "--out", str(out), "--stream", "2"]) == 0


def test_socket_transport(small_config, tmp_path):
    out = tmp_path / "sock"
    rc = cli.main(["auth", "--config", str(small_config), "--out", str(out), "--transport", "socket"])
    assert rc == 0
    assert json.loads((out / "auth.json").read_text())["transport"] == "socket"


def test_attack_and_bench(small_config, tmp_path):
    out = tmp_path / "atk"
    assert cli.main(["attack", "--config", str(small_config), "--out", str(out), "--suite", "replay"]) == 0
    games = json.loads((out / "attack.json").read_text())["games"]
    assert [g["strategy"] for g in games] == ["replay"] and games[0]["wins"] == 0
    assert cli.main(["bench", "--config", str(small_config), "--out", str(out)]) == 0
    assert (out / "bench.csv").read_text().startswith("primitive,count,mean_s,total_s")
    assert (out / "timing.png").stat().st_size > 0


def test_reruns_are_deterministic(small_config, tmp_path):
    docs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert cli.main(["enroll", "--config", str(small_config), "--out", str(out), "--seed", "77"]) == 0
        docs.append((out / "nvm" / "dev1.json").read_text())
    assert docs[0] == docs[1]


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["enroll", "--out", str(tmp_path), "--seed", "-3"]) == 2
    p = tmp_path / "one.toml"
    p.write_text("devices = 1\n")
    assert cli.main(["enroll", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert cli.main(["enroll", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "error" in capsys.readouterr().err
