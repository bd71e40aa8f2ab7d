import json

import pytest

from qase.cli import build_parser, main
from qase.data import read_jsonl
from qase.metrics import MetricsReport
from qase.trainer import TrainConfig, report_params

TINY = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--head-heads", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_tag_example(capsys):
    assert run(capsys, "tag", "--context", "a b c", "--spans", "2:3") == (0, "O I O\n", "")


def test_tag_bad_span(capsys):
    code, out, err = run(capsys, "tag", "--context", "a b c", "--spans", "2:9")
    assert code == 1 and out == "" and "outside" in err


def test_unknown_flag_and_missing_command(capsys):
    assert run(capsys, "tag", "--context", "a", "--nope")[0] == 1
    assert run(capsys, )[0] == 1


def test_params_matches_report_params(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"d_model": 32, "n_heads": 4, "head_width": 8, "head_heads": 2}))
    code, out, _ = run(capsys, "params", "--config", tmp_path / "c.json")
    assert code == 0
    base, with_head, delta = report_params(TrainConfig(d_model=32, n_heads=4, head_width=8, head_heads=2))
    assert out == f"base={base}\nwith_head={with_head}\ndelta={delta}\n"


def test_flag_overrides_config(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"head_kind": "baseline"}))
    _, a, _ = run(capsys, "params", "--config", tmp_path / "c.json")
    _, b, _ = run(capsys, "params", "--config", tmp_path / "c.json", "--head", "none")
    assert a.endswith("delta=12546\n") and b.endswith("delta=0\n")


def test_bad_config_is_validation_error(capsys, tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert run(capsys, "params", "--config", tmp_path / "c.json")[0] == 1
    assert run(capsys, "params", "--beta", "-1")[0] == 1


def test_help_lists_config_flags():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for key in TrainConfig().to_flat():
        flag = {"head_kind": "head", "prompt_ordering": "ordering", "lora_enabled": "lora"}.get(key, key)
        assert "--" + flag.replace("_", "-") in text


def test_pipeline(capsys, tmp_path):
    tr, dev = tmp_path / "tr.jsonl", tmp_path / "dev.jsonl"
    code, _, _ = run(capsys, "gen-data", "--preset", "smoke", "--n-examples", 12, "--out", tr, "--dev-size", 4, "--dev-out", dev)
    assert code == 0 and len(read_jsonl(tr)) == 8 and len(read_jsonl(dev)) == 4

    code, out, _ = run(capsys, "train", "--data", tr, "--out", tmp_path / "m.ckpt", "--epochs", 2, *TINY)
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]

    code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / "m.ckpt", "--data", dev, "--report", tmp_path / "r.txt")
    assert code == 0
    rep = MetricsReport.from_text((tmp_path / "r.txt").read_text())
    assert rep.kind == "squad" and rep.n_examples == 4

    assert run(capsys, "infer", "--ckpt", tmp_path / "m.ckpt", "--data", dev, "--out", tmp_path / "p.jsonl")[0] == 0
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "p.jsonl", "--data", dev)
    assert code == 0 and out == (tmp_path / "r.txt").read_text()


def test_sweep_table(capsys, tmp_path):
    tr, dev = tmp_path / "tr.jsonl", tmp_path / "dev.jsonl"
    run(capsys, "gen-data", "--preset", "smoke", "--n-examples", 6, "--out", tr, "--dev-size", 2, "--dev-out", dev)
    code, out, _ = run(
        capsys, "sweep", "--data", tr, "--dev", dev, "--beta-grid", "0,1", "--heads", "qase,baseline", "--epochs", 1, *TINY
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split("\t") == ["beta", "head", "ordering", "epochs", "kind", "n_examples", "em", "f1"]
    assert [ln.split("\t")[:2] for ln in lines[1:]] == [["0.0", "qase"], ["0.0", "baseline"], ["1.0", "qase"], ["1.0", "baseline"]]


def test_missing_data_file(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", tmp_path / "none.jsonl", "--out", tmp_path / "m")
    assert code == 1 and "not found" in err


def test_runtime_failure_exit_code(capsys, tmp_path):
    tr = tmp_path / "tr.jsonl"
    run(capsys, "gen-data", "--preset", "smoke", "--n-examples", 2, "--out", tr)
    code, _, err = run(capsys, "train", "--data", tr, "--out", tmp_path / "no" / "dir" / "m", "--epochs", 1, *TINY)
    assert code == 2 and "failed" in err
