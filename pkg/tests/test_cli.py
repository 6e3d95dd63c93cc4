import json
from pathlib import Path

import numpy as np
import pytest

from mood.cli import run
from mood.datamodel import RunManifest, read_feature_dump
from mood.scores import load_scores_csv

SAMPLES = Path(__file__).resolve().parents[1] / "src" / "mood" / "_sample"


def brute_force_auroc(ids, oods) -> float:
    ids, oods = np.asarray(ids), np.asarray(oods)
    gt = (oods[:, None] > ids[None, :]).sum()
    eq = (oods[:, None] == ids[None, :]).sum()
    return float((gt + 0.5 * eq) / (ids.size * oods.size))


def test_eval_reproduces_brute_force_auroc(tmp_path):
    out = tmp_path / "report.json"
    code = run([
        "eval",
        "--id", str(SAMPLES / "id_scores.csv"),
        "--ood", str(SAMPLES / "ood_scores.csv"),
        "--out", str(out),
    ])
    assert code == 0
    report = json.loads(out.read_text())
    expected = brute_force_auroc(
        load_scores_csv(SAMPLES / "id_scores.csv"),
        load_scores_csv(SAMPLES / "ood_scores.csv"),
    )
    assert abs(report["auroc"] - expected) <= 1e-12
    manifest = RunManifest.load(str(out) + ".manifest.json")
    assert manifest.stage == "eval"


def test_unknown_flag_exits_2_without_outputs(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = run(["eval", "--id", "x.csv", "--ood", "y.csv", "--out", str(out), "--bogus"])
    assert code == 2
    assert not out.exists()
    assert not list(tmp_path.iterdir())


def test_missing_input_exits_3_without_outputs(tmp_path):
    out = tmp_path / "report.json"
    code = run([
        "eval", "--id", str(tmp_path / "missing.csv"),
        "--ood", str(SAMPLES / "ood_scores.csv"), "--out", str(out),
    ])
    assert code == 3
    assert not out.exists()


def test_bad_format_exits_3(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,score,file\n")
    out = tmp_path / "report.json"
    code = run(["eval", "--id", str(bad), "--ood", str(bad), "--out", str(out)])
    assert code == 3
    assert not out.exists()


def test_unknown_config_key_exits_2(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 1, "mystery": {}}))
    code = run(["gen", "--config", str(config), "--out", str(tmp_path / "d.npz")])
    assert code == 2
    assert not (tmp_path / "d.npz").exists()


def test_gen_deterministic_and_flag_overrides_config(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 3, "gen": {"classes": 2, "per_class": 4, "side": 8, "channels": 1}}))
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    assert run(["gen", "--config", str(config), "--out", str(a)]) == 0
    assert run(["gen", "--config", str(config), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    manifest = RunManifest.load(str(a) + ".manifest.json")
    assert manifest.seed == 3
    c = tmp_path / "c.npz"
    assert run(["gen", "--config", str(config), "--seed", "4", "--out", str(c)]) == 0
    assert RunManifest.load(str(c) + ".manifest.json").seed == 4
    assert c.read_bytes() != a.read_bytes()


@pytest.fixture(scope="module")
def pipeline_artifacts(tmp_path_factory):
    """Run the full CLI chain once on a small problem."""
    root = tmp_path_factory.mktemp("pipeline")

    def cli(*parts):
        assert run([str(p) for p in parts]) == 0

    train, id_test, ood_test = root / "train.npz", root / "id.npz", root / "ood.npz"
    cli("gen", "--classes", 2, "--per-class", 16, "--side", 8, "--seed", 7, "--out", train)
    cli("gen", "--classes", 2, "--per-class", 8, "--side", 8, "--seed", 8, "--out", id_test)
    cli("gen", "--classes", 2, "--per-class", 8, "--side", 8, "--ood", "--seed", 9, "--out", ood_test)
    model, tuned = root / "model.ckpt", root / "tuned.ckpt"
    cli("pretrain", "--data", train, "--epochs", 8, "--seed", 7, "--out", model)
    cli("finetune", "--data", train, "--model", model, "--classes", 2,
        "--epochs", 8, "--seed", 7, "--out", tuned)
    feats_fit = root / "fit.moodfd"
    feats_id = root / "id.moodfd"
    feats_ood = root / "ood.moodfd"
    cli("extract", "--data", train, "--model", tuned, "--out", feats_fit)
    cli("extract", "--data", id_test, "--model", tuned, "--out", feats_id)
    cli("extract", "--data", ood_test, "--model", tuned, "--out", feats_ood)
    gm = root / "gm.ckpt"
    cli("fit", "--features", feats_fit, "--out", gm)
    id_scores, ood_scores = root / "id.csv", root / "ood.csv"
    cli("score", "--metric", "mahalanobis", "--features", feats_id, "--gaussian", gm,
        "--out", id_scores)
    cli("score", "--metric", "mahalanobis", "--features", feats_ood, "--gaussian", gm,
        "--out", ood_scores)
    report = root / "report.json"
    cli("eval", "--id", id_scores, "--ood", f"synthetic={ood_scores}", "--out", report)
    confusion = root / "confusion.json"
    cli("confusion", "--gaussian", gm, "--features", feats_ood, "--id-scores", id_scores,
        "--out", confusion)
    return root


def test_pipeline_outputs_exist_and_parse(pipeline_artifacts):
    root = pipeline_artifacts
    fs = read_feature_dump(root / "id.moodfd")
    assert fs.features.shape[1] == 64
    report = json.loads((root / "report.json").read_text())
    assert 0.0 <= report["auroc"] <= 1.0
    assert "synthetic" in report["per_set"]
    confusion = json.loads((root / "confusion.json").read_text())
    assert confusion["accepted"] == sum(int(v) for v in confusion["counts"].values())
    for artifact in ("train.npz", "model.ckpt", "tuned.ckpt", "fit.moodfd", "report.json"):
        assert (root / (artifact + ".manifest.json")).exists()


def test_logit_metrics_from_model_and_data(pipeline_artifacts, tmp_path):
    root = pipeline_artifacts
    for metric in ("msp", "entropy", "energy"):
        out = tmp_path / f"{metric}.csv"
        assert run([
            "score", "--metric", metric, "--model", str(root / "tuned.ckpt"),
            "--data", str(root / "id.npz"), "--out", str(out),
        ]) == 0
        assert load_scores_csv(out).shape == (16,)
    out = tmp_path / "gradnorm.csv"
    assert run([
        "score", "--metric", "gradnorm", "--features", str(root / "id.moodfd"),
        "--model", str(root / "tuned.ckpt"), "--out", str(out),
    ]) == 0
    assert load_scores_csv(out).shape == (16,)


def test_score_threads_flag_preserves_values(pipeline_artifacts, tmp_path):
    root = pipeline_artifacts
    single, multi = tmp_path / "s1.csv", tmp_path / "s4.csv"
    base = ["score", "--metric", "mahalanobis", "--features", str(root / "id.moodfd"),
            "--gaussian", str(root / "gm.ckpt")]
    assert run(base + ["--threads", "1", "--out", str(single)]) == 0
    assert run(base + ["--threads", "4", "--out", str(multi)]) == 0
    np.testing.assert_array_equal(load_scores_csv(single), load_scores_csv(multi))


def test_score_requires_context(tmp_path, pipeline_artifacts):
    root = pipeline_artifacts
    code = run([
        "score", "--metric", "mahalanobis", "--features", str(root / "id.moodfd"),
        "--out", str(tmp_path / "x.csv"),
    ])
    assert code == 2
    assert not (tmp_path / "x.csv").exists()


def test_selfcheck_passes(capsys):
    assert run(["selfcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert all("PASS" in line for line in lines)


def test_eval_histogram_csv_export(tmp_path):
    prefix = str(tmp_path / "hist_")
    out = tmp_path / "report.json"
    assert run([
        "eval", "--id", str(SAMPLES / "id_scores.csv"),
        "--ood", f"sample={SAMPLES / 'ood_scores.csv'}",
        "--bins", "6", "--histograms", prefix, "--out", str(out),
    ]) == 0
    for name in ("id", "sample"):
        lines = (tmp_path / f"hist_{name}.csv").read_text().strip().splitlines()
        assert lines[0] == "edge_lo,edge_hi,count,density"
        assert len(lines) == 7
    manifest = RunManifest.load(str(out) + ".manifest.json")
    assert len(manifest.outputs) == 3


def test_repeat_cli_stages_are_byte_identical(pipeline_artifacts, tmp_path):
    root = pipeline_artifacts

    def chain(dest):
        feats = dest / "id.moodfd"
        gm = dest / "gm.ckpt"
        scores_csv = dest / "id.csv"
        report = dest / "report.json"
        assert run(["extract", "--data", str(root / "id.npz"), "--model",
                    str(root / "tuned.ckpt"), "--out", str(feats)]) == 0
        assert run(["fit", "--features", str(root / "fit.moodfd"), "--out", str(gm)]) == 0
        assert run(["score", "--metric", "mahalanobis", "--features", str(feats),
                    "--gaussian", str(gm), "--out", str(scores_csv)]) == 0
        assert run(["eval", "--id", str(scores_csv), "--ood", str(root / "ood.csv"),
                    "--out", str(report)]) == 0
        return [feats, gm, scores_csv, report]

    first_dir, second_dir = tmp_path / "first", tmp_path / "second"
    first_dir.mkdir()
    second_dir.mkdir()
    for a, b in zip(chain(first_dir), chain(second_dir)):
        assert a.read_bytes() == b.read_bytes()
