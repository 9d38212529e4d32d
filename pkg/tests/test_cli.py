"""End-to-end command tests driven through main(argv)."""

import json

import numpy as np
import pytest

from pavedet import cli
from pavedet import data as D
from pavedet.boxes import DetectionBox, GroundTruthBox

from oracles import oracle_evaluate


def _write_pair(tmp_path, gt_by_image, pred_by_image):
    gt_dir = tmp_path / "gt"
    pred_dir = tmp_path / "pred"
    gt_dir.mkdir(exist_ok=True)
    pred_dir.mkdir(exist_ok=True)
    for image_id, boxes in gt_by_image.items():
        (gt_dir / f"{image_id}.txt").write_text(D.serialize_yolo_label(boxes))
    for image_id, boxes in pred_by_image.items():
        (pred_dir / f"{image_id}.txt").write_text(
            D.serialize_predictions(boxes))
    return gt_dir, pred_dir


def test_eval_perfect_predictions(tmp_path):
    gt = [GroundTruthBox(0, 0.4, 0.4, 0.6, 0.6)]
    pred = [DetectionBox(0, 1.0, 0.4, 0.4, 0.6, 0.6)]
    gt_dir, pred_dir = _write_pair(tmp_path, {"a": gt}, {"a": pred})
    out = tmp_path / "report.json"
    assert cli.main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["overall"]["map50"] == 1.0
    assert out.with_suffix(".txt").exists()
    assert (tmp_path / "report_pr.png").exists()


def test_eval_empty_prediction_dir(tmp_path):
    gt = [GroundTruthBox(2, 0.1, 0.1, 0.5, 0.5)]
    gt_dir, pred_dir = _write_pair(tmp_path, {"a": gt}, {})
    out = tmp_path / "report.json"
    assert cli.main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["overall"]["map50"] == 0.0
    assert doc["overall"]["recall"] == 0.0


def test_eval_missing_counterpart_names_file(tmp_path, capsys):
    pred = [DetectionBox(0, 0.9, 0.1, 0.1, 0.2, 0.2)]
    gt_dir, pred_dir = _write_pair(tmp_path, {}, {"orphan": pred})
    code = cli.main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--out", str(tmp_path / "r.json")])
    assert code == 2
    assert "orphan" in capsys.readouterr().err


def test_eval_parse_error_reports_line(tmp_path, capsys):
    gt_dir, pred_dir = _write_pair(
        tmp_path, {"a": [GroundTruthBox(0, 0.1, 0.1, 0.2, 0.2)]}, {})
    (pred_dir / "a.txt").write_text("0 0.5 0.5 0.1\n")
    code = cli.main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--out", str(tmp_path / "r.json")])
    assert code == 2
    assert "line 1" in capsys.readouterr().err


def test_eval_matches_oracle_on_fixture(tmp_path):
    rng = np.random.default_rng(12)
    gt_by, pred_by = {}, {}
    gt_boxes, pred_boxes = {}, {}
    for image_id in ("x", "y", "z"):
        gts, preds = [], []
        for _ in range(int(rng.integers(1, 4))):
            cls = int(rng.integers(0, 7))
            x0, y0 = rng.uniform(0, 0.5, size=2)
            gts.append(GroundTruthBox(cls, x0, y0, x0 + 0.3, y0 + 0.3,
                                      image_id=image_id))
        for _ in range(int(rng.integers(0, 4))):
            cls = int(rng.integers(0, 7))
            x0, y0 = rng.uniform(0, 0.5, size=2)
            conf = round(float(rng.uniform(0.1, 1.0)), 6)
            preds.append(DetectionBox(cls, conf, x0, y0, x0 + 0.3, y0 + 0.3,
                                      image_id=image_id))
        gt_by[image_id] = gts
        pred_by[image_id] = preds
        gt_boxes[image_id] = [(b.class_id, (b.x_min, b.y_min,
                                            b.x_max, b.y_max)) for b in gts]
        pred_boxes[image_id] = [(b.class_id, b.confidence,
                                 (b.x_min, b.y_min, b.x_max, b.y_max))
                                for b in preds]
    gt_dir, pred_dir = _write_pair(tmp_path, gt_by, pred_by)
    out = tmp_path / "report.json"
    assert cli.main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    want = oracle_evaluate(pred_boxes, gt_boxes, 7)
    # serialization rounds coordinates to 1e-6; same-shape boxes keep IoU
    # decisions, so metrics agree to well below the report tolerance
    assert abs(doc["overall"]["map50"] - want["map50"]) < 1e-6
    assert abs(doc["overall"]["precision"] - want["precision"]) < 1e-6
    assert abs(doc["overall"]["recall"] - want["recall"]) < 1e-6
    assert abs(doc["overall"]["f1"] - want["f1"]) < 1e-6


def test_gradcheck_small_shape_passes(capsys):
    assert cli.main(["gradcheck", "--shape", "2,8,3,3"]) == 0
    assert "all 28 parameter groups" in capsys.readouterr().out


def test_gradcheck_corrupt_hook_fails_naming_group(capsys):
    assert cli.main(["gradcheck", "--shape", "2,8,3,3", "--corrupt"]) == 1
    err = capsys.readouterr().err
    assert "ab.qkv.weight" in err


def test_gradcheck_impossible_tolerance_fails():
    assert cli.main(["gradcheck", "--shape", "2,8,3,3",
                     "--tolerance", "1e-15"]) == 1


def test_gradcheck_rejects_bad_shape():
    assert cli.main(["gradcheck", "--shape", "2,8,3"]) == 2
    assert cli.main(["gradcheck", "--shape", "a,b,c,d"]) == 2


def test_train_toy_writes_artifacts(tmp_path):
    out = tmp_path / "run" / "model.pvd"
    code = cli.main(["train-toy", "--n", "16", "--epochs", "2",
                     "--out", str(out)])
    assert code == 0
    run = out.parent
    for name in ("model.pvd", "model.pvd.json", "train_log.csv",
                 "train_report.json", "train_report.txt",
                 "holdout_report.json", "training_curves.png",
                 "train_report_pr.png", "split.json"):
        assert (run / name).exists(), name
    lines = (run / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_map50" and len(lines) == 3


def test_train_toy_rejects_bad_placements(tmp_path):
    assert cli.main(["train-toy", "--placements", "2;3",
                     "--out", str(tmp_path / "m.pvd")]) == 2


def test_seed_env_variable_overrides_flag(tmp_path, monkeypatch):
    out = tmp_path / "m.pvd"
    monkeypatch.setenv("PAVEDET_SEED", "7")
    assert cli.main(["train-toy", "--n", "12", "--epochs", "1", "--seed", "0",
                     "--out", str(out)]) == 0
    manifest = D.manifest_from_json((tmp_path / "split.json").read_text())
    ids = [f"img_{i:05d}" for i in range(12)]
    assert manifest == D.split_dataset(ids, 7)
    monkeypatch.setenv("PAVEDET_SEED", "not-a-number")
    assert cli.main(["train-toy", "--n", "12", "--epochs", "1",
                     "--out", str(out)]) == 2


def test_ablate_emits_four_rows(tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--n", "12", "--epochs", "1",
                     "--out", str(out)]) == 0
    doc = json.loads((out / "ablate.json").read_text())
    assert doc["seed"] == 0
    rows = doc["rows"]
    assert [r["config"] for r in rows] == [
        "no-PSA", "single-PSA", "all-stage-PSA", "R=1.0"]
    assert rows[0]["flops"] < rows[1]["flops"] < rows[2]["flops"]
    for r in rows:
        assert 0.0 <= r["map50"] <= 1.0 and 0.0 <= r["f1"] <= 1.0
    assert (out / "ablation.png").exists()
    assert (out / "ablate.txt").exists()


def test_bench_report_self_consistent(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--iters", "3", "--warmup", "1",
                     "--out", str(out)]) == 0
    rows = json.loads((out / "bench.json").read_text())
    r = rows[0]
    total = r["t_pre"] + r["t_inference"] + r["t_post"]
    assert abs(r["fps"] - 1 / total) <= 0.01 * r["fps"]
    assert r["params"] == 40796 and r["flops"] == 8301312
    assert (out / "bench.png").exists()


def test_bench_missing_inputs(tmp_path):
    assert cli.main(["bench", "--ckpt", str(tmp_path / "nope.pvd")]) == 2
    empty = tmp_path / "imgs"
    empty.mkdir()
    assert cli.main(["bench", "--images", str(empty), "--iters", "1"]) == 2


def test_flops_command_totals(capsys):
    assert cli.main(["flops"]) == 0
    base = capsys.readouterr().out
    assert "8301312" in base
    assert cli.main(["flops", "--placements", ""]) == 0
    off = capsys.readouterr().out
    assert int(off.split()[-1]) < 8301312
    assert cli.main(["flops", "--placements", "2;3"]) == 2


def test_featmap_writes_dumps(tmp_path):
    prefix = tmp_path / "fm" / "map"
    assert cli.main(["featmap", "--out", str(prefix)]) == 0
    pre = sorted((tmp_path / "fm").glob("map_pre_psa*.pgm"))
    post = sorted((tmp_path / "fm").glob("map_post_psa*.pgm"))
    assert len(pre) == 17 and len(post) == 17  # mean + 16 channels each
    assert (tmp_path / "fm" / "map_pre_psa.png").exists()


def test_featmap_requires_attention_at_stage(tmp_path, capsys):
    assert cli.main(["featmap", "--stage", "0",
                     "--out", str(tmp_path / "x")]) == 2
    assert "no PSA at stage 0" in capsys.readouterr().err
    assert cli.main(["featmap", "--image", str(tmp_path / "missing.ppm"),
                     "--out", str(tmp_path / "x")]) == 2


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["flops", "--bogus"])
    assert exc.value.code == 2
