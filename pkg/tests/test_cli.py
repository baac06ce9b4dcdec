import hashlib
import json

import pytest

from acrodis.cli import main


def _hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main([
        "synth", "--num-acronyms", "3", "--senses", "2", "--examples-per-sense", "10",
        "--cue-strength", "0.9", "--seed", "11", "--out-dir", str(out),
    ])
    assert code == 0
    return out


def test_synth_outputs(synth_dir):
    for name in ("train.json", "dev.json", "test.json", "dictionary.json", "manifest.json"):
        assert (synth_dir / name).exists(), name
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["subcommand"] == "synth"
    assert manifest["seed"] == 11
    assert set(manifest["outputs"])  # hashes recorded


def test_prepare_reports_stats(synth_dir, tmp_path, capsys):
    out = tmp_path / "prep"
    code = main([
        "prepare", "--data", str(synth_dir / "train.json"),
        "--dev", str(synth_dir / "dev.json"), "--test", str(synth_dir / "test.json"),
        "--dict", str(synth_dir / "dictionary.json"), "--out-dir", str(out),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "train: 48" in printed
    assert "vocabulary size:" in printed
    assert (out / "vocab.json").exists()
    stats = json.loads((out / "stats.json").read_text())
    assert stats["counts"] == {"train": 48, "dev": 6, "test": 6}


def test_evaluate_perfect_predictions(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ACRODIS_OUT_DIR", str(tmp_path / "out"))
    gold = [{"id": "1", "tokens": ["x"], "acronym": 0, "label": "alpha beta"},
            {"id": "2", "tokens": ["x"], "acronym": 0, "label": "gamma delta"}]
    preds = [{"id": "1", "label": "alpha beta"}, {"id": "2", "label": "gamma delta"}]
    gold_path = tmp_path / "gold.json"
    pred_path = tmp_path / "pred.json"
    gold_path.write_text(json.dumps(gold))
    pred_path.write_text(json.dumps(preds))
    code = main(["evaluate", "--pred", str(pred_path), "--gold", str(gold_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "macro_f1 1.00" in out
    assert "precision" in out  # per-class table header
    assert (tmp_path / "out" / "report.json").exists()
    assert (tmp_path / "out" / "report.json.manifest.json").exists()


def test_evaluate_writes_report(tmp_path):
    gold = [{"id": "1", "label": "a"}]
    preds = [{"id": "1", "label": "a"}]
    gold_path = tmp_path / "gold.json"
    pred_path = tmp_path / "pred.json"
    report_path = tmp_path / "report.json"
    gold_path.write_text(json.dumps(gold))
    pred_path.write_text(json.dumps(preds))
    assert main(["evaluate", "--pred", str(pred_path), "--gold", str(gold_path),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["macro_f1"] == 1.0


def test_predict_missing_checkpoint(tmp_path, synth_dir, capsys):
    code = main([
        "predict", "--model", str(tmp_path / "nope.npz"),
        "--data", str(synth_dir / "test.json"),
        "--dict", str(synth_dir / "dictionary.json"),
        "--out", str(tmp_path / "p.json"),
    ])
    assert code == 1
    assert "ValidationError" in capsys.readouterr().err


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_baseline_and_single_table_ensemble(synth_dir, tmp_path):
    pred_path = tmp_path / "rule.json"
    probs_path = tmp_path / "rule_probs.json"
    code = main([
        "baseline", "--data", str(synth_dir / "test.json"),
        "--dict", str(synth_dir / "dictionary.json"),
        "--out", str(pred_path), "--probs", str(probs_path), "--split", "test",
    ])
    assert code == 0
    fused_path = tmp_path / "fused.json"
    code = main([
        "ensemble", "--probs", str(probs_path), "--weights", "1.0",
        "--out", str(fused_path),
    ])
    assert code == 0
    rule = {r["id"]: r["label"] for r in json.loads(pred_path.read_text())}
    fused = {r["id"]: r["label"] for r in json.loads(fused_path.read_text())}
    assert rule == fused
    assert (tmp_path / "fused.json.manifest.json").exists()


def test_ensemble_weight_count_mismatch(synth_dir, tmp_path, capsys):
    probs_path = tmp_path / "p.json"
    probs_path.write_text(json.dumps({"1": {"a": 0.6, "b": 0.4}}))
    code = main(["ensemble", "--probs", str(probs_path), "--weights", "1.0", "2.0",
                 "--out", str(tmp_path / "f.json")])
    assert code == 1
    assert "ParameterError" in capsys.readouterr().err


def test_full_pipeline_tiny_and_deterministic(synth_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ACRODIS_OUT_DIR", str(tmp_path / "out"))
    ckpt = tmp_path / "ckpt.npz"
    code = main([
        "pretrain", "--train", str(synth_dir / "train.json"),
        "--dict", str(synth_dir / "dictionary.json"),
        "--out", str(ckpt), "--log", str(tmp_path / "pre.jsonl"),
        "--steps-phase1", "3", "--steps-phase2", "2", "--batch-size", "4",
        "--hidden-dim", "8", "--num-layers", "1", "--num-heads", "2",
        "--ffn-dim", "12", "--max-seq-len", "48", "--seed", "5",
    ])
    assert code == 0
    assert ckpt.exists()
    assert (tmp_path / "pre.jsonl").read_text().count("\n") == 5
    manifest = json.loads((tmp_path / "ckpt.npz.manifest.json").read_text())
    assert manifest["config"]["tau"] == 0.02  # logged hyperparameter

    model = tmp_path / "model.npz"
    code = main([
        "finetune", "--checkpoint", str(ckpt),
        "--train", str(synth_dir / "train.json"), "--dev", str(synth_dir / "dev.json"),
        "--dict", str(synth_dir / "dictionary.json"),
        "--out", str(model), "--epochs", "1", "--batch-size", "8",
        "--proj-hidden", "8", "--proj-out", "4", "--seed", "5",
    ])
    assert code == 0

    inputs_before = {p: _hash(p) for p in synth_dir.glob("*.json")}
    pred1 = tmp_path / "pred1.json"
    pred2 = tmp_path / "pred2.json"
    for pred in (pred1, pred2):
        code = main([
            "predict", "--model", str(model), "--data", str(synth_dir / "test.json"),
            "--dict", str(synth_dir / "dictionary.json"), "--out", str(pred),
            "--split", "test",
        ])
        assert code == 0
    assert pred1.read_bytes() == pred2.read_bytes()
    # no subcommand mutates its inputs
    assert inputs_before == {p: _hash(p) for p in synth_dir.glob("*.json")}

    code = main(["evaluate", "--pred", str(pred1), "--gold", str(synth_dir / "test.json")])
    assert code == 0
    assert "macro_f1" in capsys.readouterr().out
