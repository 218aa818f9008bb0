import json

import numpy as np
import pytest

from bcosnet import cli
from bcosnet import config as C
from bcosnet.training import NumericError

QUICK = ["train.max_steps=3"]


def test_parse_text_and_overrides():
    raw = C.parse_text("# comment\nseed = 3  # trailing\n\nbranches = local, global\n")
    assert raw == {"seed": "3", "branches": "local, global"}
    cfg = C.resolve(raw, C.parse_overrides(["gem.enabled=false", "ovr_splits=2,4,6"]))
    assert cfg["seed"] == 3 and cfg["branches"] == ("local", "global")
    assert cfg["gem.enabled"] is False and cfg["ovr_splits"] == (2, 4, 6)
    with pytest.raises(C.ConfigError):
        C.parse_text("just words\n")
    with pytest.raises(C.ConfigError):
        C.parse_overrides(["novalue"])


def test_schema_errors_list_offending_keys():
    with pytest.raises(C.ConfigError, match="bogus.key.*other"):
        C.resolve({"bogus.key": "1", "other": "2"})
    with pytest.raises(C.ConfigError, match="seed"):
        C.resolve({"seed": "abc"})
    with pytest.raises(C.ConfigError, match="trunk.variant"):
        C.resolve({"trunk.variant": "vgg"})
    with pytest.raises(C.ConfigError, match="branches"):
        C.resolve({"branches": "local,head"})
    with pytest.raises(C.ConfigError):
        C.resolve({"optim.milestones": "60"})
    with pytest.raises(C.ConfigError):
        C.resolve({"bottleneck.channels": "1024"})  # must reduce the 512 trunk width
    with pytest.raises(C.ConfigError):
        C.load_config(preset="huge")
    with pytest.raises(C.ConfigError):
        C.load_config("/nonexistent/file.cfg")


def test_table_variants_from_overrides():
    cfg = C.load_config(overrides=["branches=local,global"])
    assert C.build_model_config(cfg, 10).feature_dim == 2560
    cfg = C.load_config(overrides=["gem.enabled=false"])
    assert not C.build_model_config(cfg, 10).gem_enabled
    cfg = C.load_config(overrides=["ovr_splits=2,4,6"])
    assert C.build_model_config(cfg, 10).dims()["ovr"] == 3072
    assert C.build_model_config(C.load_config(), 10).feature_dim == 4352


def test_env_data_root():
    assert C.load_config(env={C.DATA_ROOT_ENV: "/data/market"})["data.root"] == "/data/market"
    explicit = C.load_config(overrides=["data.root=/x"], env={C.DATA_ROOT_ENV: "/data/market"})
    assert explicit["data.root"] == "/x"


def _alternative(key):
    kind, default = C.DEFAULTS[key]
    value = C._parse(kind, default)
    if kind == "int":
        return value + 1
    if kind == "float":
        return value + 0.125
    if kind == "bool":
        return not value
    if kind == "str":
        return value + "_x"
    return tuple(value) + (value[0] if value else 1,)


def test_every_key_round_trips_and_changes_hash():
    base = C.load_config()
    text = C.dump_text(base)
    assert C.resolve(C.parse_text(text)) == base
    hashes = {C.config_hash(base)}
    for key in C.DEFAULTS:
        changed = dict(base, **{key: _alternative(key)})
        reparsed = {k: C._parse(C.DEFAULTS[k][0], v) for k, v in C.parse_text(C.dump_text(changed)).items()}
        assert reparsed == changed, key
        hashes.add(C.config_hash(changed))
    assert len(hashes) == len(C.DEFAULTS) + 1


def test_help_flags_round_trip_through_snapshot(tmp_path):
    overrides = ["seed=4", "eval.distance=cosine", "loss.triplet_mode=hinge_margin", *QUICK]
    run = cli.cmd_train(overrides=overrides, run_dir=tmp_path / "run", preset="synthetic", env={})
    snap = C.resolve(C.parse_text((run / "config.snapshot").read_text()))
    assert snap == C.load_config(overrides=overrides, preset="synthetic", env={})
    parser = cli.build_parser()
    args = parser.parse_args(["evaluate", "--checkpoint", "x.pt", "--distance", "cosine", "--set", "seed=1"])
    assert args.distance == "cosine" and args.overrides == ["seed=1"]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    cli.cmd_train(overrides=["train.max_steps=10"], run_dir=run, preset="synthetic", env={})
    return run


def test_train_run_layout(trained_run):
    assert (trained_run / "config.snapshot").is_file()
    assert (trained_run / "checkpoints" / "last.pt").is_file()
    lines = (trained_run / "log.jsonl").read_text().splitlines()
    assert sum("total" in json.loads(line) for line in lines) == 10
    metrics = json.loads((trained_run / "metrics.json").read_text())
    assert set(metrics) == {"mAP", "cmc", "num_query", "num_gallery", "num_valid_query", "config_hash"}
    assert metrics["num_query"] == 8 and metrics["num_gallery"] == 24


def test_evaluate_twice_identical_and_cosine(trained_run, tmp_path):
    ckpt = trained_run / "checkpoints" / "last.pt"
    a = cli.cmd_evaluate(ckpt, out=tmp_path / "a.json", env={})
    b = cli.cmd_evaluate(ckpt, out=tmp_path / "b.json", env={})
    assert a == b
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert cli.main(["evaluate", "--checkpoint", str(ckpt), "--distance", "cosine",
                     "--out", str(tmp_path / "c.json")]) == 0
    c = json.loads((tmp_path / "c.json").read_text())
    assert c["config_hash"] and a["config_hash"] and c["config_hash"] != a["config_hash"]


def test_evaluate_dim_mismatch(trained_run):
    with pytest.raises(Exception, match="feature dim"):
        cli.cmd_evaluate(trained_run / "checkpoints" / "last.pt", overrides=["branches=local,global"], env={})
    assert cli.main(["evaluate", "--checkpoint", str(trained_run / "checkpoints" / "last.pt"),
                     "--set", "branches=local"]) == cli.EXIT_CONFIG


def test_extract(trained_run, tmp_path):
    out = tmp_path / "f.npz"
    assert cli.main(["extract", "--checkpoint", str(trained_run / "checkpoints" / "last.pt"), "--split", "gallery",
                     "--out", str(out)]) == 0
    data = np.load(out)
    assert data["features"].shape == (24, 4 * 32 + 32 + 16 + 6 * 16)
    assert data["person_ids"].shape == (24,)


def test_resume_and_load_checkpoint(trained_run, tmp_path):
    run = cli.cmd_train(overrides=["train.max_steps=12"], run_dir=tmp_path / "r", preset="synthetic",
                        resume=trained_run / "checkpoints" / "last.pt", env={})
    steps = [json.loads(x)["step"] for x in (run / "log.jsonl").read_text().splitlines() if "total" in x]
    assert steps == [11, 12]
    cli.cmd_train(overrides=["train.max_steps=1"], run_dir=tmp_path / "w", preset="synthetic",
                  load_checkpoint_path=trained_run / "checkpoints" / "last.pt", env={})


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["train", "--preset", "synthetic", "--set", "nope=1", "--run-dir", str(tmp_path / "a")]) == 2
    assert cli.main(["train", "--set", "data.root=/nonexistent", "--run-dir", str(tmp_path / "b")]) == 3
    monkeypatch.delenv(C.DATA_ROOT_ENV, raising=False)
    assert cli.main(["train", "--run-dir", str(tmp_path / "c")]) == 3

    def boom(self, batch):
        raise NumericError("non-finite id loss in branch 'local' at step 1")

    monkeypatch.setattr(cli.Trainer, "train_step", boom)
    assert cli.main(["train", "--preset", "synthetic", "--run-dir", str(tmp_path / "d")]) == 4


def test_ablation_table2_rows(tmp_path):
    rows = cli.cmd_ablate(grid="table2", overrides=["train.max_steps=2"], out_dir=tmp_path, preset="synthetic",
                          env={})
    assert [r["variant"] for r in rows] == ["local-global", "local-global-OvR", "local-global-gcp",
                                            "local-global-gcp-OvR"]
    assert all(r["status"] == "ok" for r in rows)
    table = (tmp_path / "table.md").read_text().splitlines()
    assert len(table) == 2 + 4
    assert (tmp_path / "table.csv").read_text().count("\n") == 5


def test_ablation_custom_axes_and_failures(tmp_path):
    cells = cli.parse_axes(["bdb.enabled=true|false", "gcd.enabled=true|false"])
    assert len(cells) == 4 and cells[0][1] == {"bdb.enabled": "true", "gcd.enabled": "true"}
    # a cell with an unparseable value fails on its own without stopping the grid
    rows = cli.cmd_ablate(grid=["optim.epochs=2|zero"], overrides=["train.max_steps=1"], out_dir=tmp_path,
                          preset="synthetic", env={})
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")
    with pytest.raises(C.ConfigError):
        cli.cmd_ablate(grid=[], out_dir=tmp_path, env={})
    with pytest.raises(C.ConfigError):
        cli.cmd_ablate(grid="table9", out_dir=tmp_path, env={})
    assert cli.main(["ablate", "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(C.ConfigError):
        cli.parse_axes(["nokey"])


def test_format_table():
    rows = [{"variant": "a", "mAP": 0.5, "rank1": 0.75, "status": "ok"}, {"variant": "b", "status": "failed: x"}]
    md = cli.format_table(rows)
    assert "| a | 50.0 | 75.0 | ok |" in md and "| b | - | - | failed: x |" in md
    assert cli.format_table(rows, "csv").splitlines()[0] == "variant,mAP,rank-1,status"
