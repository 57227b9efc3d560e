import base64
import json
import logging

import numpy as np
import pytest

from segreward import checks
from segreward.cli import main
from segreward.geometry import BinaryMask, encode_mask
from segreward.structured_output import ObjectAnswer, render_response

CUP = ObjectAnswer((100, 100, 200, 180), (150, 140))
FIRST = render_response("The cup is on the table. It is the thing to drink from.", [CUP], "cup")
SECOND = render_response("The cup is here.", [CUP])


def record(**extra):
    rec = {
        "raw_first_pass": FIRST,
        "raw_second_pass": SECOND,
        "gt_answers": [CUP.to_json()],
        "image_w": 640,
        "image_h": 480,
    }
    rec.update(extra)
    return rec


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return str(path)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# --- score -------------------------------------------------------------------------


def test_score_perfect_record(tmp_path):
    inp = write_jsonl(tmp_path / "in.jsonl", [record()])
    assert main(["score", "--input", inp, "--out", str(tmp_path / "out")]) == 0
    (row,) = read_jsonl(tmp_path / "out" / "scores.jsonl")
    assert row["reward"]["total"] == 8.0 and row["reward"]["len_conditional"] == 1.0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["count"] == 1 and summary["total"] == 8.0
    assert (tmp_path / "out" / "manifest.json").exists()


def test_score_empty_file(tmp_path):
    inp = tmp_path / "empty.jsonl"
    inp.write_text("")
    assert main(["score", "--input", str(inp), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "scores.jsonl").read_text() == ""
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["count"] == 0


def test_score_malformed_first_pass(tmp_path, caplog):
    inp = write_jsonl(tmp_path / "in.jsonl", [record(raw_first_pass="<think>x</think><answer>[{</answer>")])
    with caplog.at_level(logging.WARNING, logger="segreward"):
        assert main(["score", "--input", inp, "--out", str(tmp_path / "out")]) == 0
    (row,) = read_jsonl(tmp_path / "out" / "scores.jsonl")
    assert all(v == 0 for k, v in row["reward"].items() if k != "len_conditional")
    assert any("unparseable" in r.message for r in caplog.records)


@pytest.mark.parametrize(
    "bad",
    [
        "{not json",
        json.dumps({"raw_first_pass": FIRST}),
        json.dumps(record(gt_answers="cup")),
        json.dumps(record(image_w=-3)),
        json.dumps([1, 2]),
    ],
)
def test_score_schema_error_reports_line(tmp_path, capsys, bad):
    inp = tmp_path / "in.jsonl"
    inp.write_text(json.dumps(record()) + "\n" + bad + "\n")
    assert main(["score", "--input", str(inp)]) == 1
    assert f"{inp}:2" in capsys.readouterr().err


def test_score_groups_by_id(tmp_path, capsys):
    far = render_response("Looking.", [ObjectAnswer((400, 300, 500, 400), (450, 350))], "cup")
    inp = write_jsonl(
        tmp_path / "in.jsonl",
        [record(group_id="g"), record(group_id="g", raw_first_pass=far), record(group_id="h")],
    )
    assert main(["score", "--input", inp]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["advantage"] for r in rows[:2]] == pytest.approx([1.0, -1.0], abs=1e-6)
    assert rows[2]["advantage"] == 0


def test_score_missing_input_is_input_error(capsys):
    assert main(["score"]) == 1
    assert main(["score", "--input", "/nonexistent/x.jsonl"]) == 1


# --- train -------------------------------------------------------------------------

SMALL = "n_cases = 8\neval_cases = 8\ngroup_size = 4\nbatch_size = 4\nsteps = 3\n"


def test_train_zero_steps(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--steps", "0", "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_text().splitlines() == [
        "step,mean_total,mean_acc,mean_desc,mean_len,mean_n1,mean_n2,answer_entropy,acc_rate,gate_open,kl,epoch"
    ]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["steps"] == 0


def test_train_manifest_replay_is_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--seed", "5", "--out", str(a)]) == 0
    assert "run: step 2" in capsys.readouterr().out
    assert main(["train", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("metrics.csv", "traces.jsonl", "summary.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert len((a / "metrics.csv").read_text().splitlines()) == 4


def test_train_ablation_matrix(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL + "matrix = ablation\ntrace = false\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    csvs = sorted(p.parent.name for p in out.glob("*/metrics.csv"))
    assert csvs == ["base", "base+desc", "base+desc+len"]
    assert all((out / n / "manifest.json").exists() for n in csvs)
    assert "gIoU" in (out / "table.txt").read_text()


def test_train_config_error_names_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gamma = lots\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "gamma" in capsys.readouterr().err


def test_scoring_reproduces_training_rewards(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["score", "--config", str(cfg), "--input", str(out / "traces.jsonl"), "--out", str(tmp_path / "s")]) == 0
    traces = read_jsonl(out / "traces.jsonl")
    scores = read_jsonl(tmp_path / "s" / "scores.jsonl")
    expected = [(s["reward"], s["advantage"]) for t in traces for s in t["samples"]]
    assert len(scores) == len(expected) == 3 * 4 * 4
    assert [(r["reward"], r["advantage"]) for r in scores] == expected


# --- oracle ------------------------------------------------------------------------


@pytest.mark.parametrize("suite,count", [("matching", 200), ("gradient", 5), ("mask_iou", 200), ("kl", 5)])
def test_oracle_suites_pass(tmp_path, capsys, suite, count):
    out = tmp_path / suite
    assert main(["oracle", "--suite", suite, "--count", str(count), "--out", str(out)]) == 0
    assert f"{suite}: PASS" in capsys.readouterr().out
    assert json.loads((out / "oracle.json").read_text())["passed"] is True


def test_oracle_bad_suite():
    assert main(["oracle", "--suite", "nope"]) == 1


def test_oracle_mismatch_exits_2(monkeypatch, capsys):
    def broken(a, b):
        return 0.0

    monkeypatch.setattr(checks, "mask_iou", broken)
    assert main(["oracle", "--suite", "mask_iou", "--count", "20"]) == 2
    assert "mismatch:" in capsys.readouterr().out


# --- eval --------------------------------------------------------------------------


def mask_record(bits, **extra):
    m = BinaryMask(np.asarray(bits, dtype=bool))
    return {"mask": base64.b64encode(encode_mask(m)).decode("ascii"), **extra}


def box_bits(h, w, y0, y1, x0, x1):
    a = np.zeros((h, w), dtype=bool)
    a[y0:y1, x0:x1] = True
    return a


def run_eval(tmp_path, preds, gts, capsys=None):
    p = write_jsonl(tmp_path / "pred.jsonl", preds)
    g = write_jsonl(tmp_path / "gt.jsonl", gts)
    code = main(["eval", "--input", p, "--gt", g, "--out", str(tmp_path / "out")])
    report = json.loads((tmp_path / "out" / "eval.json").read_text()) if code == 0 else None
    return code, report


def test_eval_identity(tmp_path):
    gts = [mask_record(box_bits(8, 8, 0, 4, 0, 4)), mask_record(box_bits(8, 8, 2, 8, 1, 5))]
    code, report = run_eval(tmp_path, gts, gts)
    assert code == 0
    assert report["all"]["giou"] == 1.0 and report["all"]["ciou"] == 1.0


def test_eval_one_wrong_of_two(tmp_path):
    a, b = box_bits(8, 8, 0, 4, 0, 4), box_bits(8, 8, 4, 8, 4, 8)
    code, report = run_eval(tmp_path, [mask_record(a), mask_record(a)], [mask_record(a), mask_record(b)])
    assert report["all"]["giou"] == 0.5


def test_eval_mixed_sizes(tmp_path):
    # a 100-pixel object predicted exactly and a 4-pixel object missed entirely
    big, small = box_bits(20, 20, 0, 10, 0, 10), box_bits(20, 20, 18, 20, 18, 20)
    empty = np.zeros((20, 20), dtype=bool)
    preds = [mask_record(big, tokens=30), mask_record(empty, tokens=20)]
    code, report = run_eval(tmp_path, preds, [mask_record(big), mask_record(small)])
    r = report["all"]
    # pixel counts: gIoU = (1 + 0) / 2; cIoU = (100 + 0) / (100 + 4)
    assert r["giou"] == 0.5 and r["ciou"] == pytest.approx(100 / 104)
    assert r["ciou"] != r["giou"] and r["tokens"] == 25


def test_eval_splits(tmp_path):
    a = box_bits(4, 4, 0, 2, 0, 2)
    gts = [mask_record(a, split="val"), mask_record(a, split="test")]
    code, report = run_eval(tmp_path, [mask_record(a), mask_record(np.zeros((4, 4)))], gts)
    assert sorted(report) == ["test", "val"]
    assert report["val"]["giou"] == 1.0 and report["test"]["giou"] == 0.0


def test_eval_misaligned(tmp_path):
    a = mask_record(box_bits(4, 4, 0, 2, 0, 2))
    assert run_eval(tmp_path, [a], [a, a])[0] == 1
    assert run_eval(tmp_path, [{**a, "id": 1}], [{**a, "id": 2}])[0] == 1
    assert run_eval(tmp_path, [mask_record(np.zeros((3, 3)))], [a])[0] == 1
