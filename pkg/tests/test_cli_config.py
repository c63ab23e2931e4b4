import json

import numpy as np
import pytest

from sigrecipe import checkpoint as CK
from sigrecipe import cli
from sigrecipe.config import ConfigError, config_from_dict, read_config, write_config

TINY = ["--model.width", "16", "--model.depth", "1", "--model.heads", "2", "--model.embed_dim", "16",
        "--model.posemb_len", "16", "--total_steps", "40", "--warmup_steps", "4", "--train.batch_size", "4",
        "--naflex_seq_lens", "4,16", "--fixedres_targets", "16x4", "--acid.enabled", "false",
        "--n_retrieval", "16", "--n_zero_shot", "32", "--eval.naflex_seq_len", "16", "--log_every", "10"]


def test_overrides_parse_both_forms():
    assert cli.parse_overrides(["--a", "1", "--b.c=2"]) == {"a": "1", "b.c": "2"}
    with pytest.raises(ConfigError):
        cli.parse_overrides(["--a"])
    with pytest.raises(ConfigError):
        cli.parse_overrides(["stray"])


def test_config_file_and_overrides(tmp_path):
    rc = read_config("configs/desk.cfg", {"peak_lr": "1e-3", "seed": "11"})
    assert rc.train.peak_lr == 1e-3 and rc.train.batch_size == 32
    assert rc.run.seed == 11 and rc.data.seed == 11
    assert rc.branches.fixedres_targets == ((48, 4),)
    write_config(rc, tmp_path / "x.cfg")
    assert read_config(tmp_path / "x.cfg") == rc
    assert config_from_dict(rc.to_dict()) == rc


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        read_config(None, {"nonsense_key": "1"})
    with pytest.raises(ConfigError):
        read_config(None, {"train.total_steps": "many"})
    with pytest.raises(ConfigError, match="boundaries"):
        read_config(None, {"tips_frac": "0.96"})


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--bogus_key", "1"]) == 2
    assert "error:" in capsys.readouterr().err
    assert cli.main(["eval", str(tmp_path / "none.sgr")]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg")]) == 2
    assert cli.main(["export", str(tmp_path / "none.sgr"), "--eval-only"]) == 2


def test_report_round_trip():
    text = cli.format_report("x", {"a": 0.5, "b": [1, 2], "c": "s"})
    assert cli.parse_report("noise\n" + text + "\ntrailing") == {"command": "x", "a": "0.5", "b": "[1, 2]",
                                                                 "c": "s"}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    rc = read_config(None, cli.parse_overrides(TINY))
    report = cli.run_train(rc, out / "a")
    return rc, out, report


def test_train_outputs(trained):
    rc, out, report = trained
    run = out / "a"
    assert set(report["checkpoints"]) == {"base", "naflex", "fixedres_16_p4"}
    for name in ("loss.png", "lr.png", "eval.png", "metrics.jsonl", "eval.json"):
        assert (run / name).stat().st_size > 0
    saved = json.loads((run / "eval.json").read_text())
    assert saved["eval"] == report["eval"]


def test_train_is_deterministic(trained, tmp_path):
    rc, out, report = trained
    again = cli.run_train(rc, tmp_path / "b")
    assert again["eval"] == report["eval"]
    a = CK.load_checkpoint(report["checkpoints"]["base"]).arrays
    b = CK.load_checkpoint(again["checkpoints"]["base"]).arrays
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_variants_share_names_and_shapes(trained):
    _, _, report = trained
    tables = []
    for path in report["checkpoints"].values():
        arrays = CK.export_for_eval(CK.load_checkpoint(path)).arrays
        tables.append({k: v.shape for k, v in arrays.items()})
    assert all(t == tables[0] for t in tables)


def test_export_then_eval_matches(trained, tmp_path, capsys):
    rc, out, report = trained
    ck = report["checkpoints"]["naflex"]
    ev_args = ["--n_retrieval", "16", "--n_zero_shot", "32"]
    assert cli.main(["export", ck, "--eval-only", "--out", str(tmp_path / "e.sgr")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", ck, *ev_args]) == 0
    full = cli.parse_report(capsys.readouterr().out)
    assert cli.main(["eval", str(tmp_path / "e.sgr"), *ev_args]) == 0
    slim = cli.parse_report(capsys.readouterr().out)
    keys = ("recall_at_1", "recall_i2t", "recall_t2i", "zero_shot_acc")
    assert all(full[k] == slim[k] for k in keys)
    assert float(full["recall_at_1"]) == pytest.approx(report["eval"]["naflex"]["recall_at_1"])
    exported = CK.load_checkpoint(tmp_path / "e.sgr").arrays
    assert not any(CK.is_auxiliary(k) for k in exported)


def test_eval_plots_and_json(trained, tmp_path, capsys):
    _, _, report = trained
    dst = tmp_path / "ev.json"
    assert cli.main(["eval", report["checkpoints"]["base"], "--n_retrieval", "16", "--n_zero_shot", "32",
                     "--out", str(dst), "--plots"]) == 0
    rep = cli.parse_report(capsys.readouterr().out)
    assert json.loads(dst.read_text())["variant"] == "base"
    assert (tmp_path / "ev.png").stat().st_size > 0 and rep["figure"].endswith("ev.png")


def test_preprocess(tmp_path, capsys):
    dst = tmp_path / "p.sgr"
    assert cli.main(["preprocess", "--out", str(dst), "--n", "5", "--seq-len", "16"]) == 0
    ck = CK.load_checkpoint(dst)
    assert ck.arrays["patches"].shape == (5, 16, 48)
    assert ck.arrays["mask"].sum(1).max() <= 16
    assert len(ck.extra["ids"]) == 5


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--trials", "3"]) == 0
    rep = cli.parse_report(capsys.readouterr().out)
    assert rep["failed"] == "[]"


def test_decoder_task_mode_from_config():
    assert read_config(None).model_config().decoder.sample_tasks is False
    assert read_config("configs/desk.cfg").model_config().decoder.sample_tasks is True
