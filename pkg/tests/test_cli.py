import json
import sys

import numpy as np
import pytest

from helpers import tree_digest
from pixelcues.attention import init_filter_bank
from pixelcues.cli import main
from pixelcues.dataio import (
    DatasetManifest,
    ManifestRecord,
    read_filter_bank,
    read_label_png,
    read_tensor,
    save_manifest,
    write_label_png,
    write_rgb_png,
    write_tensor,
)
from pixelcues.maps import LabelMap
from pixelcues.saliency import RgbImage
from pixelcues.synthetic import SceneSpec, generate_synthetic


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_synth")
    generate_synthetic(root, seed=11, count=6, spec=SceneSpec(min_shapes=2, max_shapes=2))
    return root


def run(*argv):
    return main([str(a) for a in argv])


# --- gen-synth -----------------------------------------------------------------


def test_gen_synth_default_spec_is_mixed(tmp_path, capsys):
    assert run("gen-synth", "--out", tmp_path / "d", "--count", 20, "--seed", 0) == 0
    out = capsys.readouterr().out
    assert "classes: 3" in out
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    tag_counts = {len(r["tags"]) for r in doc["records"]}
    assert tag_counts == {1, 2}
    assert len(doc["label_space"]) == 4


def test_gen_synth_deterministic_tree(tmp_path):
    assert run("gen-synth", "--out", tmp_path / "a", "--count", 5, "--seed", 3) == 0
    assert run("gen-synth", "--out", tmp_path / "b", "--count", 5, "--seed", 3) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_synth_zero_count_is_usage_error(tmp_path):
    assert run("gen-synth", "--out", tmp_path / "x", "--count", 0) == 1


# --- saliency -------------------------------------------------------------------


def test_saliency_single_round_equals_detector_output(synth, tmp_path):
    out = tmp_path / "sal"
    code = run("saliency", "--manifest", synth / "manifest.json", "--rounds", 1, "--out", out)
    assert code == 0
    doc = json.loads((synth / "manifest.json").read_text())
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        got = read_tensor(out / f"{stem}_s1.dct")
        oracle = read_tensor(synth / record["saliency"])
        np.testing.assert_array_equal(got, oracle)
    report = json.loads((out / "saliency_report.json").read_text())
    assert report["failed"] == [] and report["completed"] == 6


def test_saliency_threshold_override_accepted(synth, tmp_path):
    out = tmp_path / "sal"
    code = run(
        "saliency", "--manifest", synth / "manifest.json",
        "--thresholds", 0.5, "--rounds", 2, "--out", out,
    )
    assert code == 0
    assert (out / "scene_0000_s2.dct").exists()


def test_saliency_two_rounds_cover_both_shapes(synth, tmp_path):
    out = tmp_path / "sal"
    assert run("saliency", "--manifest", synth / "manifest.json", "--rounds", 2, "--out", out) == 0
    doc = json.loads((synth / "manifest.json").read_text())
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        fused = read_tensor(out / f"{stem}_s2.dct")
        gt = read_label_png(synth / record["ground_truth"])
        for class_id in record["tags"]:
            region = gt.data == class_id
            assert (fused[region] == 1.0).all()


# --- cues ------------------------------------------------------------------------


def test_cues_zero_saliency_all_background(tmp_path):
    root = tmp_path / "data"
    generate_synthetic(root, seed=2, count=4, spec=SceneSpec(min_shapes=2, max_shapes=2))
    for i in range(4):
        write_tensor(root / "saliency" / f"scene_{i:04d}.dct", np.zeros((64, 64), np.float32))
    out = tmp_path / "cues"
    assert run("cues", "--manifest", root / "manifest.json", "--out", out) == 0
    summary = json.loads((out / "cue_summary.json").read_text())
    assert summary["pixel_counts"]["background"] == 4 * 64 * 64
    assert sum(summary["pixel_counts"].values()) == 4 * 64 * 64
    cues = read_label_png(out / "scene_0000.png")
    assert (cues.data == 0).all()


def test_cues_from_saliency_stage(synth, tmp_path):
    sal = tmp_path / "sal"
    assert run("saliency", "--manifest", synth / "manifest.json", "--rounds", 2, "--out", sal) == 0
    out = tmp_path / "cues"
    code = run(
        "cues", "--manifest", synth / "manifest.json",
        "--saliency", sal, "--rounds", 2, "--out", out,
    )
    assert code == 0
    # fused saliency makes the cues match the ground truth on this suite
    doc = json.loads((synth / "manifest.json").read_text())
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        np.testing.assert_array_equal(
            read_label_png(out / f"{stem}.png").data,
            read_label_png(synth / record["ground_truth"]).data,
        )


def test_cues_missing_inputs_listed(tmp_path):
    root = tmp_path / "data"
    root.mkdir(parents=True)
    write_rgb_png(root / "a.png", RgbImage(np.zeros((4, 4, 3), np.uint8)))
    manifest = DatasetManifest(
        ("background", "x"), (0, 0, 0), [ManifestRecord(image="a.png", tags=(1,))], root=root
    )
    save_manifest(manifest, root / "manifest.json")
    assert run("cues", "--manifest", root / "manifest.json", "--out", tmp_path / "out") == 2


# --- adapt ----------------------------------------------------------------------


def test_adapt_one_hot_reproduces_ground_truth(synth, tmp_path):
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    doc = json.loads((synth / "manifest.json").read_text())
    num_labels = len(doc["label_space"])
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        gt = read_label_png(synth / record["ground_truth"])
        one_hot = np.zeros((num_labels, 64, 64), dtype=np.float32)
        for label in range(num_labels):
            one_hot[label][gt.data == label] = 1.0
        write_tensor(pred_dir / f"{stem}.dct", one_hot)
    out = tmp_path / "adapted"
    assert run("adapt", "--manifest", synth / "manifest.json", "--pred", pred_dir, "--out", out) == 0
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        np.testing.assert_array_equal(
            read_label_png(out / f"{stem}.png").data,
            read_label_png(synth / record["ground_truth"]).data,
        )


def test_adapt_missing_channel_is_data_error(synth, tmp_path):
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    doc = json.loads((synth / "manifest.json").read_text())
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        write_tensor(pred_dir / f"{stem}.dct", np.zeros((2, 64, 64), np.float32))
    assert run("adapt", "--manifest", synth / "manifest.json", "--pred", pred_dir, "--out", tmp_path / "o") == 2


# --- eval ------------------------------------------------------------------------


def test_eval_perfect_prediction(synth, tmp_path, capsys):
    out = tmp_path / "eval"
    code = run("eval", "--manifest", synth / "manifest.json", "--pred", synth / "gt", "--out", out)
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mean_iou"] == 1.0
    assert "mean IoU" in capsys.readouterr().out


def hand_fixture(tmp_path):
    root = tmp_path / "hand"
    (root / "gt").mkdir(parents=True)
    pred_dir = tmp_path / "hand_pred"
    pred_dir.mkdir()
    gts = {
        "one": [[0, 1], [1, 2]],
        "two": [[2, 2], [255, 0]],
        "three": [[255, 255], [255, 255]],  # all-ignored image contributes nothing
    }
    preds = {
        "one": [[0, 1], [2, 2]],
        "two": [[2, 1], [1, 0]],
        "three": [[0, 0], [0, 0]],
    }
    records = []
    for name in gts:
        write_rgb_png(root / f"{name}.png", RgbImage(np.zeros((2, 2, 3), np.uint8)))
        write_label_png(root / "gt" / f"{name}.png", LabelMap(np.asarray(gts[name], np.uint8)))
        write_label_png(pred_dir / f"{name}.png", LabelMap(np.asarray(preds[name], np.uint8)))
        records.append(ManifestRecord(image=f"{name}.png", tags=(), ground_truth=f"gt/{name}.png"))
    manifest = DatasetManifest(("background", "c1", "c2"), (0, 0, 0), records, root=root)
    save_manifest(manifest, root / "manifest.json")
    return root, pred_dir


def test_eval_hand_computed_miou(tmp_path):
    root, pred_dir = hand_fixture(tmp_path)
    out = tmp_path / "eval"
    assert run("eval", "--manifest", root / "manifest.json", "--pred", pred_dir, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    # hand tally: IoU = (1, 1/3, 1/2) -> mean 11/18
    assert report["per_class"]["background"]["iou"] == 1.0
    assert report["per_class"]["c1"]["iou"] == pytest.approx(1 / 3)
    assert report["per_class"]["c2"]["iou"] == pytest.approx(1 / 2)
    assert report["mean_iou"] == pytest.approx(11 / 18)
    assert report["evaluated_pixels"] == 7


def test_eval_dimension_mismatch_is_data_error(tmp_path):
    root, pred_dir = hand_fixture(tmp_path)
    write_label_png(pred_dir / "one.png", LabelMap(np.zeros((3, 3), np.uint8)))
    assert run("eval", "--manifest", root / "manifest.json", "--pred", pred_dir, "--out", tmp_path / "o") == 2


# --- train-head -------------------------------------------------------------------


def features_fixture(tmp_path, synth):
    feat_dir = tmp_path / "features"
    feat_dir.mkdir()
    doc = json.loads((synth / "manifest.json").read_text())
    num_labels = len(doc["label_space"])
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        planes = np.zeros((num_labels - 1, 2, 2), dtype=np.float32)
        for class_id in record["tags"]:
            planes[class_id - 1] = 1.0
        write_tensor(feat_dir / f"{stem}.dct", planes)
    return feat_dir


def test_train_head_zero_lr_returns_init(synth, tmp_path):
    feat_dir = features_fixture(tmp_path, synth)
    out = tmp_path / "head"
    code = run(
        "train-head", "--manifest", synth / "manifest.json", "--features", feat_dir,
        "--lr", 0, "--steps", 5, "--seed", 3, "--out", out,
    )
    assert code == 0
    bank = read_filter_bank(out / "filter_bank.dct")
    init = init_filter_bank(bank.class_ids, bank.channels, seed=3)
    np.testing.assert_array_equal(bank.weights, init.weights)
    np.testing.assert_array_equal(bank.biases, init.biases)
    curve = (out / "loss_curve.csv").read_text().strip().splitlines()
    assert curve[0] == "step,loss"
    assert len(curve) == 6


def test_train_head_learns_tags(synth, tmp_path):
    feat_dir = features_fixture(tmp_path, synth)
    out = tmp_path / "head"
    code = run(
        "train-head", "--manifest", synth / "manifest.json", "--features", feat_dir,
        "--lr", 2.0, "--steps", 300, "--seed", 0, "--out", out,
    )
    assert code == 0
    curve = [float(line.split(",")[1]) for line in (out / "loss_curve.csv").read_text().strip().splitlines()[1:]]
    assert curve[-1] < curve[0]
    # indicator features are separable, so the trained head recovers every tag
    from helpers import tag_accuracy
    from pixelcues.attention import FeatureVolume, ImageTags

    bank = read_filter_bank(out / "filter_bank.dct")
    doc = json.loads((synth / "manifest.json").read_text())
    dataset = []
    for record in doc["records"]:
        stem = record["image"].rsplit("/", 1)[1][:-4]
        feat = FeatureVolume(read_tensor(feat_dir / f"{stem}.dct"))
        dataset.append((feat, ImageTags(frozenset(record["tags"]), len(doc["label_space"]))))
    assert tag_accuracy(dataset, bank) == 1.0


# --- pipeline and exit codes -------------------------------------------------------


def test_pipeline_end_to_end(synth, tmp_path, capsys):
    out = tmp_path / "run"
    code = run("pipeline", "--manifest", synth / "manifest.json", "--rounds", 2, "--out", out)
    assert code == 0
    report = json.loads((out / "eval" / "report.json").read_text())
    assert report["mean_iou"] == 1.0
    assert "pipeline mIoU" in capsys.readouterr().out


def test_pipeline_combiner_swap_runs(synth, tmp_path):
    for combiner in ("arithmetic", "geometric"):
        out = tmp_path / combiner
        code = run(
            "pipeline", "--manifest", synth / "manifest.json",
            "--rounds", 2, "--combiner", combiner, "--out", out,
        )
        assert code == 0


def test_pipeline_config_file_with_flag_override(synth, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "config_version": 1,
        "manifest": str(synth / "manifest.json"),
        "rounds": 1,
        "gamma": 0.4,
    }))
    out = tmp_path / "run"
    assert run("pipeline", "--config", config, "--rounds", 2, "--out", out) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["rounds"] == 2  # flag wins over the config file


def test_parallel_workers_match_serial_tree(synth, tmp_path):
    for name, workers in (("serial", 1), ("parallel", 3)):
        code = run(
            "pipeline", "--manifest", synth / "manifest.json",
            "--rounds", 2, "--workers", workers, "--out", tmp_path / name,
        )
        assert code == 0
    serial = tree_digest(tmp_path / "serial")
    parallel = tree_digest(tmp_path / "parallel")
    # only the echoed worker count may differ
    serial.pop("config.json")
    parallel.pop("config.json")
    assert serial == parallel


def test_unknown_config_key_is_usage_error(synth, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"manifest": str(synth / "manifest.json"), "tresholds": [0.5]}))
    assert run("pipeline", "--config", config, "--out", tmp_path / "o") == 1


def test_unknown_flag_is_usage_error():
    assert run("pipeline", "--bogus") == 1


def test_unknown_subcommand_is_usage_error():
    assert run("frobnicate") == 1


def test_missing_manifest_is_data_error(tmp_path):
    assert run("pipeline", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "o") == 2


def test_failing_external_detector_is_stage_failure(synth, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "manifest": str(synth / "manifest.json"),
        "detector": "external",
        "external_command": [sys.executable, "-c", "import sys; sys.exit(4)"],
        "rounds": 1,
    }))
    out = tmp_path / "run"
    assert run("pipeline", "--config", config, "--out", out) == 3
    report = json.loads((out / "saliency" / "saliency_report.json").read_text())
    assert len(report["failed"]) == 6


def test_invalid_gamma_is_usage_error(synth, tmp_path):
    assert run("pipeline", "--manifest", synth / "manifest.json", "--gamma", 1.5, "--out", tmp_path / "o") == 1
