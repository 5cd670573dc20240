import csv
import json

import numpy as np
import pytest

from flowcouple import config as cfgmod
from flowcouple import editlab
from flowcouple.cli import EVAL_HEADER, SAMPLE_HEADER, main

SMALL_CFG = """\
# tiny run for tests
d_s = 8
d_t = 8
d_v = 4
hidden_width = 8
batch_size = 8
train_per_task = 4
eval_per_task = 2
checkpoint_interval = 5
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL_CFG)
    return p


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--steps", "10", "--out", str(out)]) == 0
    return out


def read_manifest(path):
    return json.loads(path.read_text())


# -- config ------------------------------------------------------------------

def test_parse_config_types_and_comments():
    vals = cfgmod.parse_config("alpha = 0.25  # weight\n\nseed=3\nrecord_wallclock = true\nfixed_sigma = none\n")
    assert vals == {"alpha": 0.25, "seed": 3, "record_wallclock": True, "fixed_sigma": None}


@pytest.mark.parametrize("text,key", [("bogus = 1\n", "bogus"), ("seed = abc\n", "seed")])
def test_parse_config_errors_name_key(text, key):
    with pytest.raises(cfgmod.ConfigError) as err:
        cfgmod.parse_config(text)
    assert err.value.key == key and key in str(err.value)


def test_parse_config_missing_equals():
    with pytest.raises(cfgmod.ConfigError, match="line 2"):
        cfgmod.parse_config("seed = 1\njunk\n")


def test_config_dump_roundtrip():
    train, sched, data = cfgmod.build(cfgmod.parse_config(SMALL_CFG + "fixed_sigma = 0.5\n"))
    again = cfgmod.build(cfgmod.parse_config(cfgmod.dump_config(train, sched, data)))
    assert again == (train, sched, data)
    assert train.fixed_sigma == 0.5 and data.train_per_task == 4


# -- train -------------------------------------------------------------------

def test_train_zero_steps(tmp_path, cfg_file):
    out = tmp_path / "d"
    assert main(["train", "--config", str(cfg_file), "--steps", "0", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.fckp")) == ["final.fckp"]


def test_train_outputs_listed_in_manifest(trained):
    manifest = read_manifest(trained / "manifest.json")
    on_disk = sorted(p.name for p in trained.iterdir())
    assert sorted(manifest["outputs"]) == on_disk
    assert {"final.fckp", "ckpt_000005.fckp", "ckpt_000010.fckp", "metrics.csv", "dataset.csv",
            "config.txt", "manifest.json"} == set(on_disk)
    assert manifest["seed"] == 0 and manifest["code_version"]
    assert manifest["threads"] == 1


def test_train_is_deterministic(tmp_path, cfg_file):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["train", "--config", str(cfg_file), "--steps", "7", "--seed", "4", "--out", str(d)]) == 0
    for name in ("metrics.csv", "dataset.csv", "final.fckp", "ckpt_000005.fckp", "config.txt"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name


def test_curriculum_manifest_records_schedule(tmp_path, cfg_file):
    out = tmp_path / "cur"
    assert main(["train", "--config", str(cfg_file), "--regime", "curriculum", "--steps", "300",
                 "--out", str(out)]) == 0
    m = read_manifest(out / "manifest.json")
    assert m["schedule"]["warmup_steps"] == 300
    assert (m["schedule"]["warmup_local_frac"], m["schedule"]["main_local_frac"]) == (0.25, 0.5)
    assert m["config"]["coupling_regime"] == "curriculum"
    assert sum(m["coupling_counts"]["warmup"].values()) == 300 * 8


def test_train_bad_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rat = 0.1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_train_runtime_failure_exits_1(tmp_path, cfg_file):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["train", "--config", str(cfg_file), "--steps", "1", "--out", str(blocker / "sub")]) == 1


def test_bad_thread_env_exits_2(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("FLOWCOUPLE_THREADS", "zero")
    assert main(["train", "--config", str(cfg_file), "--steps", "1", "--out", str(tmp_path / "t")]) == 2


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["train", "--regime", "nope"]) == 2


# -- sample ------------------------------------------------------------------

def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_sample_nfe_and_header(tmp_path, trained):
    out = tmp_path / "s"
    assert main(["sample", "--checkpoint", str(trained), "--steps", "25", "--out", str(out)]) == 0
    rows = _rows(out / "metrics_K25.csv")
    assert list(rows[0]) == SAMPLE_HEADER
    assert len(rows) == 8 and all(r["nfe"] == "25" for r in rows)
    assert main(["sample", "--checkpoint", str(trained / "final.fckp"), "--steps", "1", "--out", str(out)]) == 0
    assert all(r["nfe"] == "1" for r in _rows(out / "metrics_K1.csv"))


def test_sample_sweep_and_dump(tmp_path, trained):
    out = tmp_path / "sweep"
    assert main(["sample", "--checkpoint", str(trained), "--steps", "5,10,20,30,50", "--dump-trajectories", "1",
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("metrics_K*.csv")) == sorted(
        f"metrics_K{k}.csv" for k in (5, 10, 20, 30, 50))
    traj = _rows(out / "trajectory_K5_i0.csv")
    assert list(traj[0]) == ["step", "t", "coordinate_index", "value"] and len(traj) == 6 * 16
    manifest = read_manifest(out / "manifest_sample.json")
    assert sorted(manifest["outputs"]) == sorted(p.name for p in out.iterdir())


def test_sample_is_deterministic(tmp_path, trained):
    for d in ("x", "y"):
        assert main(["sample", "--checkpoint", str(trained), "--steps", "5", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "metrics_K5.csv").read_bytes() == (tmp_path / "y" / "metrics_K5.csv").read_bytes()


def test_sample_missing_checkpoint_exits_2(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_sample_corrupt_checkpoint_exits_2(tmp_path, trained, capsys):
    bad = tmp_path / "bad.fckp"
    bad.write_bytes((trained / "final.fckp").read_bytes()[:40])
    assert main(["sample", "--checkpoint", str(bad), "--config", str(trained / "config.txt"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "offset" in capsys.readouterr().err


# -- eval --------------------------------------------------------------------

def test_eval_identical_inputs_zero_deltas(tmp_path, trained, capsys):
    s = tmp_path / "s"
    main(["sample", "--checkpoint", str(trained), "--steps", "5,10", "--out", str(s)])
    capsys.readouterr()
    assert main(["eval", "--a", str(s), "--b", str(s), "--out", str(tmp_path / "ev")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == ",".join(EVAL_HEADER)
    for line in lines[1:]:
        row = dict(zip(EVAL_HEADER, line.split(",")))
        for col in ("delta_preserved_rmse", "delta_edited_rmse", "delta_over_edit"):
            assert float(row[col]) == 0.0
    assert (tmp_path / "ev" / "eval_report.csv").read_text().strip().splitlines() == lines


def _write_metrics(directory, insts, preds, k=5):
    directory.mkdir()
    with open(directory / f"metrics_K{k}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        for i, (inst, pred) in enumerate(zip(insts, preds)):
            m = editlab.edit_metrics(pred, inst)
            w.writerow([i, inst.task_id, inst.seed, k, m.preserved_rmse, m.edited_rmse, m.context_score,
                        editlab.over_edit_index(pred, inst)])


def test_eval_flags_leakage(tmp_path, capsys):
    insts = editlab.gen_dataset(editlab.default_suite(64)[:3], range(2))
    clean = [i.x_tgt for i in insts]
    leaky = [i.x_tgt + np.where(i.edit_mask, 0.0, 1.0) for i in insts]
    _write_metrics(tmp_path / "clean", insts, clean)
    _write_metrics(tmp_path / "leaky", insts, leaky)
    assert main(["eval", "--a", str(tmp_path / "clean"), "--b", str(tmp_path / "leaky")]) == 0
    row = dict(zip(EVAL_HEADER, capsys.readouterr().out.strip().splitlines()[1].split(",")))
    assert row["over_edit_flag_a"] == "0" and row["over_edit_flag_b"] == "1"
    assert float(row["median_over_edit_b"]) > 1.0


def test_eval_mismatched_instances_exit_2(tmp_path):
    a = editlab.gen_dataset(editlab.default_suite(64), range(2))
    b = editlab.gen_dataset(editlab.default_suite(64), range(5, 7))
    _write_metrics(tmp_path / "a", a, [i.x_tgt for i in a])
    _write_metrics(tmp_path / "b", b, [i.x_tgt for i in b])
    assert main(["eval", "--a", str(tmp_path / "a"), "--b", str(tmp_path / "b")]) == 2


# -- score -------------------------------------------------------------------

@pytest.mark.parametrize("fixture,expected", [("table1", ["6.090", "6.058", "5.994", "5.735"]),
                                               ("gedit", ["6.679", "6.639", "6.529", "6.443"])])
def test_score_fixtures(tmp_path, capsys, fixture, expected):
    out = tmp_path / "o.csv"
    assert main(["score", "--fixture", fixture, "--csv-out", str(out)]) == 0
    assert [line.split(",")[3] for line in out.read_text().splitlines()[1:]] == expected
    assert "overall_mixed" in capsys.readouterr().out


def test_score_malformed_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("model,sc,pq,lsc,lpq\nA,1,2,3,4\nB,1,2\n")
    assert main(["score", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_score_empty_file_section(tmp_path, capsys):
    f = tmp_path / "empty.csv"
    f.write_text("model,sc,pq,lsc,lpq\n")
    assert main(["score", str(f)]) == 0


# -- oracle ------------------------------------------------------------------

def test_oracle_only_ot(capsys):
    assert main(["oracle", "--only", "ot"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("[PASS] ot")


def test_oracle_injected_failure_exits_1(capsys):
    assert main(["oracle", "--only", "grad", "--inject-failure"]) == 1
    assert "[FAIL] grad" in capsys.readouterr().out


def test_oracle_prints_gaussian_target(capsys):
    main(["oracle", "--only", "gaussian", "--gaussian-steps", "300"])
    out = capsys.readouterr().out
    assert "k(0.5) = -0.4000" in out and '"fitted"' in out


def test_oracle_unknown_name_exits_2():
    assert main(["oracle", "--only", "nope"]) == 2
