import json
import os

import pytest

from gdafas.cli import load_config, main

pytestmark = pytest.mark.usefixtures("capsys")


def run(capsys, *argv, expect=0):
    code = main(list(argv))
    captured = capsys.readouterr()
    assert code == expect, f"{argv}: exit {code}\n{captured.err}"
    if expect == 0:
        lines = captured.out.strip().splitlines()
        assert len(lines) == 1  # stdout carries exactly one JSON line
        return json.loads(lines[0]), captured.err
    return None, captured.err


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "batch_size": 8, "stage1_epochs": 3, "stage2_steps": 2,
        "lr": 1e-3, "count_per_class": 10,
    }))
    assert main(["gen-data", "--config", str(cfg), "--out",
                 str(root / "data"), "--seed", "5"]) == 0
    assert main(["train-source", "--config", str(cfg), "--data",
                 str(root / "data" / "source"), "--out",
                 str(root / "src_run"), "--seed", "5"]) == 0
    assert main(["adapt", "--config", str(cfg), "--model",
                 str(root / "src_run" / "source.gdac"), "--data",
                 str(root / "data" / "target"), "--out",
                 str(root / "adapt_run"), "--seed", "5"]) == 0
    return {"root": root, "cfg": str(cfg)}


def test_gen_data_summary_and_config_echo(cli_root, capsys, tmp_path):
    out, _ = run(capsys, "gen-data", "--config", cli_root["cfg"],
                 "--out", str(tmp_path / "d"), "--seed", "9")
    assert out["command"] == "gen-data"
    assert {d["name"] for d in out["domains"]} == {"source", "target"}
    assert all(d["records"] == 20 for d in out["domains"])
    echoed = json.loads((tmp_path / "d" / "config.json").read_text())
    assert echoed["seed"] == 9  # flag wins over config file
    assert echoed["batch_size"] == 8


def test_gen_data_is_byte_identical_across_reruns(cli_root, capsys,
                                                  tmp_path):
    for name in ("a", "b"):
        run(capsys, "gen-data", "--config", cli_root["cfg"],
            "--out", str(tmp_path / name), "--seed", "5")
    for sub in ("source", "target"):
        dir_a = tmp_path / "a" / sub
        dir_b = tmp_path / "b" / sub
        names = sorted(os.listdir(dir_a / "images"))
        assert names == sorted(os.listdir(dir_b / "images"))
        assert (dir_a / "manifest.json").read_bytes() == \
            (dir_b / "manifest.json").read_bytes()
        for n in names:
            assert (dir_a / "images" / n).read_bytes() == \
                (dir_b / "images" / n).read_bytes()


def test_train_source_rerun_reproduces_checkpoint(cli_root, capsys,
                                                  tmp_path):
    root = cli_root["root"]
    run(capsys, "train-source", "--config", cli_root["cfg"],
        "--data", str(root / "data" / "source"),
        "--out", str(tmp_path / "again"), "--seed", "5")
    original = (root / "src_run" / "source.gdac").read_bytes()
    repeat = (tmp_path / "again" / "source.gdac").read_bytes()
    assert original == repeat


def test_adapt_outputs(cli_root):
    run_dir = cli_root["root"] / "adapt_run"
    assert (run_dir / "adapted.gdac").exists()
    log = (run_dir / "adapt_log.csv").read_text().splitlines()
    assert log[0] == "step,stat,per,ent1,ent2,ph,stat_ema,total"
    assert len(log) == 3  # header + 2 steps
    assert (run_dir / "config.json").exists()


def test_eval_writes_report(cli_root, capsys, tmp_path):
    report = tmp_path / "r.csv"
    out, _ = run(capsys, "eval", "--model",
                 str(cli_root["root"] / "adapt_run" / "adapted.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--report", str(report))
    assert out["command"] == "eval"
    assert 0.0 <= out["auc"] <= 1.0
    assert out["stylized"] is True
    lines = report.read_text().splitlines()
    assert lines[0] == "metric,value"
    assert lines[1].startswith("auc,")


def test_eval_raw_ignores_generator(cli_root, capsys):
    out, _ = run(capsys, "eval", "--model",
                 str(cli_root["root"] / "adapt_run" / "adapted.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--raw")
    assert out["stylized"] is False


def test_eval_unlabeled_split_fails_validation(cli_root, capsys):
    _, err = run(capsys, "eval", "--model",
                 str(cli_root["root"] / "adapt_run" / "adapted.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--split", "train", expect=1)
    assert "label" in err


def test_specmix_deterministic(cli_root, capsys, tmp_path):
    images = cli_root["root"] / "data" / "source" / "images"
    names = sorted(os.listdir(images))
    argv = ("specmix", "--input", str(images / names[0]),
            "--ref", str(images / names[1]), "--eta", "0.1",
            "--seed", "3", "--out", str(tmp_path / "c.ppm"))
    out1, _ = run(capsys, *argv)
    blob1 = (tmp_path / "c.ppm").read_bytes()
    out2, _ = run(capsys, *argv)
    assert blob1 == (tmp_path / "c.ppm").read_bytes()
    assert out1 == out2
    assert 0.0 <= out1["lambda"] < 0.1


def test_analyze_stats_files(cli_root, capsys, tmp_path):
    out, _ = run(capsys, "analyze-stats", "--model",
                 str(cli_root["root"] / "adapt_run" / "adapted.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--source-data", str(cli_root["root"] / "data" / "source"),
                 "--out", str(tmp_path))
    assert set(out["files"]) == {"bn_raw.csv", "bn_stylized.csv",
                                 "mmd_raw.csv", "mmd_stylized.csv"}
    raw = (tmp_path / "bn_raw.csv").read_text().splitlines()
    assert raw[0] == "layer,d_mean,d_var"
    assert len(raw) == 6  # five layers
    mmd = (tmp_path / "mmd_raw.csv").read_text().splitlines()
    assert mmd[0] == "block,mmd"
    assert len(mmd) == 4


def test_train_flags_override_config_file(cli_root, capsys, tmp_path):
    out, _ = run(capsys, "adapt", "--config", cli_root["cfg"],
                 "--model", str(cli_root["root"] / "src_run" / "source.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--out", str(tmp_path), "--seed", "5",
                 "--stage2-steps", "1", "--lr", "0.002")
    assert out["steps"] == 1  # flag beat the config file's 2
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["stage2_steps"] == 1
    assert echoed["lr"] == 0.002
    log = (tmp_path / "adapt_log.csv").read_text().splitlines()
    assert len(log) == 2


def test_ablate_table(cli_root, capsys, tmp_path):
    out, _ = run(capsys, "ablate", "--config", cli_root["cfg"],
                 "--model", str(cli_root["root"] / "src_run" / "source.gdac"),
                 "--data", str(cli_root["root"] / "data" / "target"),
                 "--out", str(tmp_path), "--seed", "5")
    assert [r["config"] for r in out["rows"]] == \
        ["baseline", "nsc", "nsc_dsc", "full"]
    table = (tmp_path / "ablation.csv").read_text().splitlines()
    assert table[0] == "config,hter,auc"
    assert len(table) == 5


def test_grad_check_passes_and_reproduces(capsys, tmp_path):
    argv = ("grad-check", "--seed", "1", "--trials", "2",
            "--out", str(tmp_path))
    out1, err1 = run(capsys, *argv)
    assert out1["passed"] is True and out1["checks"] >= 30
    table = (tmp_path / "grad_check.txt").read_text()
    assert "relu" in table and "loss_total" in table
    out2, err2 = run(capsys, *argv)
    assert err1 == err2  # same seed, same error table
    assert out1 == out2


def test_grad_check_fault_injection_fails(capsys):
    _, err = run(capsys, "grad-check", "--seed", "1", "--trials", "2",
                 "--fault", "sign-flip", expect=2)
    assert "relu" in err


def test_unknown_command_and_flag_exit_one(capsys):
    run(capsys, "no-such-command", expect=1)
    run(capsys, "eval", "--bogus", expect=1)


def test_missing_inputs_exit_one(cli_root, capsys, tmp_path):
    _, err = run(capsys, "eval", "--model", "missing.gdac",
                 "--data", str(cli_root["root"] / "data" / "target"),
                 expect=1)
    assert "missing.gdac" in err
    _, err = run(capsys, "train-source", "--data",
                 str(cli_root["root"] / "data" / "source"), expect=1)
    assert "--out" in err
    _, err = run(capsys, "adapt", "--model",
                 str(cli_root["root"] / "src_run" / "source.gdac"),
                 "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "o"), expect=1)
    assert "not found" in err


def test_malformed_config_reports_position(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}")
    _, err = run(capsys, "gen-data", "--config", str(bad),
                 "--out", str(tmp_path / "x"), expect=1)
    assert "line 2" in err and "column 3" in err


def test_unknown_config_keys_are_named(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1, "epochs": 2}))
    _, err = run(capsys, "gen-data", "--config", str(cfg),
                 "--out", str(tmp_path / "x"), expect=1)
    assert "epochs" in err and "learning_rate" in err


def test_load_config_validates_domains(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"domains": [{"name": "a", "gamma": 2}]}))
    with pytest.raises(Exception, match="domains\\[0\\]"):
        load_config(str(cfg))
    cfg.write_text(json.dumps({"domains": [
        {"name": "a", "gain": [1, 1, 1], "blur": 1}
    ]}))
    assert load_config(str(cfg))["domains"][0]["blur"] == 1


def test_custom_domains_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "count_per_class": 4,
        "domains": [
            {"name": "lab", "gain": [1.0, 1.0, 1.0]},
            {"name": "field", "gain": [0.7, 0.9, 1.1],
             "unlabeled_train": True},
        ],
    }))
    out, _ = run(capsys, "gen-data", "--config", str(cfg),
                 "--out", str(tmp_path / "d"), "--seed", "2")
    assert [d["name"] for d in out["domains"]] == ["lab", "field"]
    manifest = json.loads(
        (tmp_path / "d" / "field" / "manifest.json").read_text()
    )
    train = [r for r in manifest["records"] if r["split"] == "train"]
    assert all("label" not in r for r in train)
