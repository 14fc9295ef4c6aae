import csv
import json

import pytest

from xviewgeo import cli, evaluation

TINY = {
    "dataset": {"synthetic": {"n_train": 16, "n_test": 8, "pano_size": [16, 64], "aerial_size": 32, "seed": 2}},
    "encoder": {"embed_dim": 16, "ground_shape": [16, 64], "aerial_shape": [32, 32]},
    "train": {"epochs": 1, "batch_size": 8, "lr": 0.001},
    "eval": {"sweep_angles": [0.0, 90.0, 180.0, 270.0]},
}
VANILLA = {k: False for k in ("use_single_q", "use_single_r", "use_cross", "single_q_shift", "single_q_fov", "cross_shift", "cross_fov")}


def write_cfg(tmp_path, cfg, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def with_train(**kw):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"].update(kw)
    return cfg


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(d, with_train(epochs=0))
    assert run("train", "--config", cfg, "--out", d / "out") == 0
    return d, cfg


# ---------------------------------------------------------------- config errors


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("train", "--config", missing) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize(
    "patch,key",
    [
        ({"train": {"epoch": 3}}, "train.epoch"),
        ({"trian": {}}, "trian"),
        ({"train": {"ablation": {"use_crosss": True}}}, "train.ablation.use_crosss"),
        ({"encoder": {"embed_dim": "big"}}, "encoder.embed_dim"),
        ({"eval": {"settings": [{"kind": "north_aligned", "alpha": 3}]}}, "eval.settings[0].alpha"),
        ({"loss": {"tau_v": -1.0}}, "tau_v"),
        ({"train": {"train_alpha": "wide"}}, "train_alpha"),
    ],
)
def test_config_errors_name_the_key(tmp_path, capsys, patch, key):
    cfg = json.loads(json.dumps(TINY))
    for section, value in patch.items():
        if isinstance(value, dict) and isinstance(cfg.get(section), dict):
            cfg[section].update(value)
        else:
            cfg[section] = value
    assert run("train", "--config", write_cfg(tmp_path, cfg), "--out", tmp_path / "o") == 1
    assert key in capsys.readouterr().err


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run("train", "--config", p) == 1


def test_usage_error_is_exit_one():
    assert run("train") == 1


# ---------------------------------------------------------------- train


def test_zero_epoch_train_writes_outputs(trained):
    d, _ = trained
    out = d / "out"
    assert (out / "checkpoint.npz").is_file()
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["train"]["epochs"] == 0 and resolved["train"]["lr"] == 0.001
    assert resolved["loss"]["w3"] == 0.25 and resolved["encoder"]["backbone"] == "ToyConv"
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["settings"]) == {"north_aligned", "fov360", "fov180", "fov90", "fov70"}


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = write_cfg(tmp_path, with_train(epochs=0), "envrun.json")
    assert run("train", "--config", cfg) == 0
    assert (tmp_path / "root" / "envrun" / "metrics.json").is_file()


def test_writes_stay_inside_output_dir(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, with_train(epochs=0))
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 0
    assert list(work.iterdir()) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "exp.json", "o"]


def test_seed_flag_overrides(tmp_path):
    cfg = write_cfg(tmp_path, with_train(epochs=0))
    assert run("train", "--config", cfg, "--out", tmp_path / "o", "--seed", 9) == 0
    resolved = json.loads((tmp_path / "o" / "resolved-config.json").read_text())
    assert resolved["seed"] == 9 and all(s["seed"] == 9 for s in resolved["eval"]["settings"])


def test_runtime_failure_is_exit_two(tmp_path):
    (tmp_path / "m.csv").write_text("id,ground_path,aerial_path,split\n" + "".join(f"x{i},g{i}.png,a{i}.png,train\n" for i in range(16)))
    cfg = dict(TINY, dataset={"manifest": "m.csv"})
    assert run("train", "--config", write_cfg(tmp_path, cfg), "--out", tmp_path / "o") == 2


def test_bad_manifest_is_exit_one(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("id,ground_path,aerial_path,split\na,g,s,train\na,g,s,test\n")
    cfg = dict(TINY, dataset={"manifest": "m.csv"})
    assert run("train", "--config", write_cfg(tmp_path, cfg), "--out", tmp_path / "o") == 1
    assert "duplicate id 'a'" in capsys.readouterr().err


# ---------------------------------------------------------------- eval / sweep


def test_eval_untrained_is_at_chance(trained, tmp_path):
    d, cfg = trained
    assert run("eval", "--config", cfg, "--checkpoint", d / "out" / "checkpoint.npz", "--out", tmp_path / "e") == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    for name, m in metrics["settings"].items():
        lo, hi = evaluation.chance_band(m["n_gallery"], m["n_queries"])
        assert lo <= m["R@1"] <= hi, name
    assert (tmp_path / "e" / "sweep.png").stat().st_size > 0
    rows = list(csv.reader((tmp_path / "e" / "sweep.csv").read_text().splitlines()))
    assert rows[0] == ["angle_deg", "recall_at_1"] and len(rows) == 5


def test_eval_is_byte_deterministic(trained, tmp_path):
    d, cfg = trained
    ck = d / "out" / "checkpoint.npz"
    assert run("eval", "--config", cfg, "--checkpoint", ck, "--out", tmp_path / "a") == 0
    assert run("eval", "--config", cfg, "--checkpoint", ck, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_eval_embed_dim_mismatch_names_both(trained, tmp_path, capsys):
    d, _ = trained
    cfg = json.loads(json.dumps(TINY))
    cfg["encoder"]["embed_dim"] = 24
    p = write_cfg(tmp_path, cfg)
    assert run("eval", "--config", p, "--checkpoint", d / "out" / "checkpoint.npz", "--out", tmp_path / "e") == 1
    err = capsys.readouterr().err
    assert "embed_dim" in err and "16" in err and "24" in err


def test_eval_missing_checkpoint(trained, tmp_path):
    _, cfg = trained
    assert run("eval", "--config", cfg, "--checkpoint", tmp_path / "none.npz", "--out", tmp_path / "e") == 1


def test_eval_with_unseen_suite(trained, tmp_path):
    d, _ = trained
    cfg = json.loads(json.dumps(TINY))
    cfg["eval"]["unseen"] = [{"kind": "gaussian_noise", "params": {"severity": 3}}]
    p = write_cfg(tmp_path, cfg)
    assert run("eval", "--config", p, "--checkpoint", d / "out" / "checkpoint.npz", "--out", tmp_path / "e") == 0
    assert "gaussian_noise" in json.loads((tmp_path / "e" / "metrics.json").read_text())["unseen"]


def test_sweep_command(trained, tmp_path):
    d, cfg = trained
    assert run("sweep", "--config", cfg, "--checkpoint", d / "out" / "checkpoint.npz", "--out", tmp_path / "s") == 0
    sweep = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert sweep["angles"] == [0.0, 90.0, 180.0, 270.0] and sweep["invariance_gap"] >= 0


# ---------------------------------------------------------------- ablate


def write_grid(tmp_path, text):
    p = tmp_path / "grid.csv"
    p.write_text(text)
    return p


def test_malformed_grid_row_reports_row(tmp_path, capsys):
    g = write_grid(tmp_path, "name,use_single_r\na,1\nb,maybe\n")
    assert run("ablate", "--config", write_cfg(tmp_path, TINY), "--grid", g, "--out", tmp_path / "o") == 1
    assert "row 2" in capsys.readouterr().err


def test_grid_unknown_column(tmp_path, capsys):
    g = write_grid(tmp_path, "name,use_everything\na,1\n")
    assert run("ablate", "--config", write_cfg(tmp_path, TINY), "--grid", g, "--out", tmp_path / "o") == 1
    assert "use_everything" in capsys.readouterr().err


def test_all_off_row_equals_vanilla_train(tmp_path):
    g = write_grid(tmp_path, "name,use_single_r,use_single_q,use_cross\nvanilla,0,0,0\n")
    assert run("ablate", "--config", write_cfg(tmp_path, TINY), "--grid", g, "--out", tmp_path / "ab") == 0
    van = with_train(ablation=VANILLA)
    assert run("train", "--config", write_cfg(tmp_path, van, "van.json"), "--out", tmp_path / "tr") == 0
    rows = list(csv.DictReader((tmp_path / "ab" / "ablation.csv").read_text().splitlines()))
    metrics = json.loads((tmp_path / "tr" / "metrics.json").read_text())["settings"]
    assert len(rows) == 1
    assert list(rows[0])[:4] == ["row", "name", "use_single_q", "use_single_r"]
    assert list(rows[0])[9:11] == ["fov90 R@1", "fov90 R@1%"]
    for s in ("fov90", "fov70", "north_aligned"):
        assert float(rows[0][f"{s} R@1"]) == metrics[s]["R@1"]
    marker = json.loads((tmp_path / "ab" / "ablation.progress.json").read_text())
    assert marker == {"completed_rows": [1], "total_rows": 1, "complete": True}


def test_partial_results_kept_on_failure(tmp_path, monkeypatch):
    g = write_grid(tmp_path, "name,use_single_r\nfirst,1\nsecond,0\nthird,1\n")
    real = cli._ablate_row
    calls = []

    def flaky(cfg, row_dir, ablation):
        calls.append(row_dir)
        if len(calls) == 2:
            raise RuntimeError("disk full")
        return real(cfg, row_dir, ablation)

    monkeypatch.setattr(cli, "_ablate_row", flaky)
    assert run("ablate", "--config", write_cfg(tmp_path, TINY), "--grid", g, "--out", tmp_path / "o") == 2
    rows = list(csv.DictReader((tmp_path / "o" / "ablation.csv").read_text().splitlines()))
    assert [r["name"] for r in rows] == ["first"]
    marker = json.loads((tmp_path / "o" / "ablation.progress.json").read_text())
    assert marker["completed_rows"] == [1] and marker["complete"] is False


def test_parallel_rows_match_sequential(tmp_path):
    g = write_grid(tmp_path, "name,use_single_r\na,1\nb,0\n")
    cfg = write_cfg(tmp_path, TINY)
    assert run("ablate", "--config", cfg, "--grid", g, "--out", tmp_path / "seq") == 0
    assert run("ablate", "--config", cfg, "--grid", g, "--out", tmp_path / "par", "--jobs", 2) == 0
    assert (tmp_path / "seq" / "ablation.csv").read_bytes() == (tmp_path / "par" / "ablation.csv").read_bytes()
