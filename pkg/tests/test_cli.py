import json

import pytest
import yaml

from cometa_lab import checkpoint, cli
from cometa_lab.config import ConfigError, DEFAULTS, load_config, set_value
from cometa_lab.recmodel import FeatureSchema, init_params

TINY = {
    "data": {"synthetic": {"n_users": 300, "n_old": 30, "n_new": 12,
                           "old_count": [61, 90], "new_count": [21, 45]}},
    "split": {"n_old": 60, "n_new": 20, "k_fold": 5},
    "model": {"dim": 4, "hidden": [8, 8, 8], "pretrain_epochs": 1},
    "cometa": {"k": 4, "m": 4, "epochs": 1, "hidden": [8, 8]},
    "run": {"seeds": [0], "kinds": ["random", "cometa"]},
}


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return ["--config", str(p), "--out", str(tmp_path / "run")]


def test_defaults_match_stated_hyperparameters():
    assert DEFAULTS["model"]["dim"] == 16 and DEFAULTS["model"]["hidden"] == [64, 64, 64]
    assert DEFAULTS["model"]["lr"] == 0.001 and DEFAULTS["cometa"]["beta"] == 0.1
    assert DEFAULTS["split"]["n_old"] == 200 and DEFAULTS["split"]["n_new"] == 80


def test_precedence_per_field(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"run": {"out": "from_file", "seeds": [4]}, "model": {"dim": 8}}))
    args = cli.build_parser().parse_args(["evaluate", "--config", str(p)])
    cfg = cli.resolve_config(args)
    assert cfg["run"]["out"] == "from_file" and cfg["run"]["seeds"] == [4] and cfg["model"]["dim"] == 8
    assert cfg["model"]["lr"] == 0.001          # untouched default
    args = cli.build_parser().parse_args(
        ["evaluate", "--config", str(p), "--out", "flag", "--seed", "2", "--seed", "3",
         "--kinds", "random", "--phase", "cold", "--parallel-seeds", "2", "--set", "model.dim=12"])
    cfg = cli.resolve_config(args)
    assert cfg["run"]["out"] == "flag" and cfg["run"]["seeds"] == [2, 3]
    assert cfg["run"]["kinds"] == ["random"] and cfg["run"]["phase"] == "cold"
    assert cfg["run"]["parallel_seeds"] == 2 and cfg["model"]["dim"] == 12


def test_unknown_keys_rejected(tmp_path):
    cfg = load_config()
    with pytest.raises(ConfigError):
        set_value(cfg, "model.width", "3")
    p = tmp_path / "c.yaml"
    p.write_text("modle: {dim: 3}\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_exit_codes(conf, tmp_path, capsys):
    assert cli.main(["prepare", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert "absent.yaml" in capsys.readouterr().err
    assert cli.main(["prepare", "--set", "data.source=movielens",
                     "--set", "data.movielens.ratings=/nope/ratings.dat",
                     "--set", "data.movielens.users=/nope/users.dat",
                     "--set", "data.movielens.movies=/nope/movies.dat"]) == 2
    assert "/nope/ratings.dat" in capsys.readouterr().err
    assert cli.main(["evaluate", *conf, "--kinds", "metaemb"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_prepare_writes_manifest_and_refuses_overwrite(conf, tmp_path):
    assert cli.main(["prepare", *conf]) == 0
    m = json.loads((tmp_path / "run" / "split_manifest.json").read_text())
    assert all(v["warm_b"]["count"] == 5 for v in m["new_items"].values())
    assert cli.main(["prepare", *conf]) == 1
    assert cli.main(["prepare", *conf, "--force"]) == 0


def test_pretrain_zero_epochs_and_determinism(conf, tmp_path, capsys):
    assert cli.main(["pretrain", *conf, "--set", "model.pretrain_epochs=0"]) == 0
    ck = tmp_path / "run" / "checkpoints" / "model_seed0.ckpt"
    model = checkpoint.model_from(checkpoint.load(ck))
    assert model.digest() == init_params(model.schema, seed=0).digest()
    capsys.readouterr()
    assert cli.main(["pretrain", *conf, "--force", "--set", "model.pretrain_epochs=2"]) == 0
    first = ck.read_bytes()
    assert capsys.readouterr().err.count("pretrain epoch") == 2
    assert cli.main(["pretrain", *conf, "--force", "--set", "model.pretrain_epochs=2"]) == 0
    assert ck.read_bytes() == first


def test_train_cometa_outputs_and_freeze(conf, tmp_path):
    assert cli.main(["train-cometa", *conf]) == 2            # no backbone yet
    assert cli.main(["pretrain", *conf]) == 0
    ck = tmp_path / "run" / "checkpoints" / "model_seed0.ckpt"
    before = ck.read_bytes()
    assert cli.main(["train-cometa", *conf]) == 0
    assert ck.read_bytes() == before
    run = tmp_path / "run"
    secs = checkpoint.load(run / "checkpoints" / "cometa_seed0.ckpt")
    assert set(secs) == {"seg.full"}
    assert (run / "neighbors_seed0.tsv").read_text().strip()
    assert (run / "episode_loss_seed0.csv").read_text().startswith("variant,epoch")
    assert (run / "episode_loss_seed0.png").exists()


def test_train_cometa_refuses_schema_mismatch(conf, tmp_path):
    assert cli.main(["pretrain", *conf]) == 0
    assert cli.main(["train-cometa", *conf, "--force", "--set", "model.dim=6"]) == 2


def test_evaluate_report_and_determinism(conf, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["evaluate", *conf]) == 0
    md = (run / "report.md").read_text()
    assert "| random |" in md and "| cometa |" in md and "warm-c AUC" in md
    first = {n: (run / n).read_bytes() for n in ("report.md", "report.json", "report_phases.png")}
    assert cli.main(["evaluate", *conf]) == 1                # refuses to overwrite
    assert cli.main(["evaluate", *conf, "--force"]) == 0
    assert {n: (run / n).read_bytes() for n in first} == first
    (run / "report.md").unlink()
    assert cli.main(["report", *conf]) == 0
    assert (run / "report.md").read_bytes() == first["report.md"]


def test_evaluate_cold_phase_only(conf, tmp_path):
    assert cli.main(["evaluate", *conf, "--phase", "cold", "--kinds", "global_average"]) == 0
    data = json.loads((tmp_path / "run" / "report.json").read_text())
    assert data["phases"] == ["cold"]


def test_parallel_seeds_match_serial(conf, tmp_path):
    base = ["--seed", "0", "--seed", "1", "--kinds", "random,cometa_no_seg"]
    assert cli.main(["evaluate", *conf, *base]) == 0
    serial = (tmp_path / "run" / "report.json").read_bytes()
    assert cli.main(["evaluate", *conf, *base, "--force", "--parallel-seeds", "2"]) == 0
    assert (tmp_path / "run" / "report.json").read_bytes() == serial
