"""Batch command-line front end for the full pipeline.

One subcommand per stage: ``gen``, ``pretrain``, ``finetune``, ``extract``,
``fit``, ``score``, ``eval``, ``confusion``, plus ``selfcheck``. Every
stage-producing command writes its outputs atomically and records a
RunManifest next to the primary output, so a fixed config reproduces
byte-identical artifacts.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datamodel, evaluate, finetune, gaussian, mim, scores
from .datamodel import RunManifest, atomic_write_bytes, config_digest
from .errors import ConfigError, DataError, MoodError

_SECTION_KEYS = {
    "gen": {"classes", "per_class", "side", "channels", "ood", "seed", "out"},
    "pretrain": {
        "data", "out", "epochs", "batch", "lr", "momentum", "mask_ratio", "target_mode",
        "codebook_size", "patch", "d_model", "depth", "heads", "seed",
    },
    "finetune": {
        "data", "model", "out", "mode", "target_class", "alpha", "classes", "epochs",
        "batch", "lr", "momentum", "seed",
    },
    "extract": {"data", "model", "layer", "out"},
    "fit": {"features", "reg", "out"},
    "score": {
        "metric", "features", "logits", "gaussian", "model", "data", "temperature",
        "threads", "out",
    },
    "eval": {"id", "ood", "tpr", "bins", "histograms", "out"},
    "confusion": {"gaussian", "features", "id_scores", "tpr", "out"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"seed"}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    for section, keys in _SECTION_KEYS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        bad = set(body) - keys
        if bad:
            raise ConfigError(f"{path}: unknown keys {sorted(bad)} in section {section!r}")
    return doc


class _Resolver:
    """Merge CLI flags over config-file values over defaults."""

    def __init__(self, args: argparse.Namespace, section: str):
        self.args = args
        self.config = _load_config(getattr(args, "config", None))
        self.section = self.config.get(section, {})
        self.global_seed = self.config.get("seed")

    def get(self, key: str, default=None, required: bool = False):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.section:
            return self.section[key]
        if key == "seed" and self.global_seed is not None:
            return self.global_seed
        if required and default is None:
            raise ConfigError(f"missing required parameter --{key.replace('_', '-')}")
        return default


def _write_manifest(stage: str, params: dict, seed: int, inputs, outputs, extra=None) -> None:
    manifest = RunManifest(
        stage=stage,
        config_digest=config_digest(params),
        seed=int(seed),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        extra=extra or {},
    )
    manifest.save(str(outputs[0]) + ".manifest.json")


def _cmd_gen(args) -> int:
    r = _Resolver(args, "gen")
    params = {
        "classes": int(r.get("classes", 2)),
        "per_class": int(r.get("per_class", 32)),
        "side": int(r.get("side", 8)),
        "channels": int(r.get("channels", 1)),
        "ood": bool(r.get("ood", False)),
        "seed": int(r.get("seed", 0)),
    }
    out = r.get("out", required=True)
    ds = datamodel.generate_synthetic(
        params["classes"], params["per_class"], params["side"],
        params["channels"], params["ood"], params["seed"],
    )
    datamodel.save_dataset(ds, out)
    _write_manifest("gen", params, params["seed"], [], [out])
    return 0


def _cmd_pretrain(args) -> int:
    r = _Resolver(args, "pretrain")
    data_path = r.get("data", required=True)
    out = r.get("out", required=True)
    seed = int(r.get("seed", 0))
    config = mim.TrainConfig(
        epochs=int(r.get("epochs", 30)),
        batch_size=int(r.get("batch", 8)),
        learning_rate=float(r.get("lr", 0.01)),
        momentum=float(r.get("momentum", 0.9)),
        mask_ratio=float(r.get("mask_ratio", 0.4)),
        target_mode=str(r.get("target_mode", "pixel")),
        codebook_size=int(r.get("codebook_size", 16)),
        patch_size=int(r.get("patch", 4)),
        d_model=int(r.get("d_model", 64)),
        depth=int(r.get("depth", 2)),
        heads=int(r.get("heads", 4)),
    )
    data = datamodel.load_dataset(data_path)
    result = mim.train_mim(data, config, seed)
    result.model.save(out)
    _write_manifest(
        "pretrain", {**config.as_dict(), "seed": seed}, seed, [data_path], [out],
        extra={"epoch_losses": list(result.epoch_losses)},
    )
    return 0


def _cmd_finetune(args) -> int:
    r = _Resolver(args, "finetune")
    data_path = r.get("data", required=True)
    model_path = r.get("model", required=True)
    out = r.get("out", required=True)
    data = datamodel.load_dataset(data_path)
    mode = str(r.get("mode", "multi_class"))
    default_classes = 10 if mode == "one_class" else data.class_count
    cfg = finetune.FinetuneConfig(
        mode=mode,
        target_class=int(r.get("target_class", 0)),
        epochs=int(r.get("epochs", 30)),
        batch_size=int(r.get("batch", 8)),
        learning_rate=float(r.get("lr", 0.01)),
        momentum=float(r.get("momentum", 0.9)),
        seed=int(r.get("seed", 0)),
    )
    smoothing = finetune.SmoothingConfig(
        alpha=float(r.get("alpha", 0.1)),
        class_count=int(r.get("classes", default_classes)),
    )
    model = mim.ToyMimModel.load(model_path)
    result = finetune.finetune_classifier(model, data, cfg, smoothing)
    result.model.save(out)
    stage = "intermediate_ft" if mode == "intermediate" else "finetune"
    _write_manifest(
        stage,
        {**cfg.as_dict(), "alpha": smoothing.alpha, "classes": smoothing.class_count},
        cfg.seed, [data_path, model_path], [out],
        extra={
            "epoch_losses": list(result.epoch_losses),
            "epoch_accuracy": list(result.epoch_accuracy),
        },
    )
    return 0


def _cmd_extract(args) -> int:
    r = _Resolver(args, "extract")
    data_path = r.get("data", required=True)
    model_path = r.get("model", required=True)
    out = r.get("out", required=True)
    layer = str(r.get("layer", "pooled_final"))
    model = mim.ToyMimModel.load(model_path)
    data = datamodel.load_dataset(data_path)
    fs = finetune.extract_features(model, data, layer=layer)
    datamodel.write_feature_dump(fs, out)
    _write_manifest("extract", {"layer": layer}, 0, [data_path, model_path], [out])
    return 0


def _cmd_fit(args) -> int:
    r = _Resolver(args, "fit")
    features_path = r.get("features", required=True)
    out = r.get("out", required=True)
    reg = float(r.get("reg", gaussian.DEFAULT_REG))
    fs = datamodel.read_feature_dump(features_path)
    gm = gaussian.fit_gaussian(fs, reg=reg)
    gm.save(out)
    _write_manifest("fit", {"reg": reg}, 0, [features_path], [out])
    return 0


def _score_values(r, metric: str, temperature: float) -> tuple[scores.ScoreVector, list[str]]:
    features_path = r.get("features")
    logits_path = r.get("logits")
    gaussian_path = r.get("gaussian")
    model_path = r.get("model")
    data_path = r.get("data")
    threads = int(r.get("threads", os.environ.get("MOOD_THREADS", "1")))
    inputs: list[str] = []

    def batched(matrix, **kwargs):
        if threads <= 1 or matrix.shape[0] < 2 * threads:
            return scores.score_batch(matrix, metric, temperature=temperature, **kwargs)
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(matrix.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(
                    lambda idx: scores.score_batch(
                        matrix[idx], metric, temperature=temperature, **kwargs
                    ).values,
                    chunks,
                )
            )
        return scores.ScoreVector(
            values=np.concatenate(parts), metric=metric,
            params={"temperature": temperature} if metric in ("energy", "gradnorm") else {},
        )

    if metric == "mahalanobis":
        if features_path is None or gaussian_path is None:
            raise ConfigError("mahalanobis scoring needs --features and --gaussian")
        fs = datamodel.read_feature_dump(features_path)
        gm = gaussian.GaussianModel.load(gaussian_path)
        inputs += [features_path, gaussian_path]
        return batched(fs.features, gaussian=gm), inputs
    if metric == "gradnorm":
        if features_path is None or model_path is None:
            raise ConfigError("gradnorm scoring needs --features and --model")
        fs = datamodel.read_feature_dump(features_path)
        model = mim.ToyMimModel.load(model_path)
        w, b = finetune.classifier_head(model)
        inputs += [features_path, model_path]
        return batched(fs.features, head_weights=w, head_bias=b), inputs
    # logit metrics: explicit logits file, or a model + dataset to compute them
    if logits_path is not None:
        logits = datamodel.read_feature_dump(logits_path).features
        inputs.append(logits_path)
    elif model_path is not None and data_path is not None:
        model = mim.ToyMimModel.load(model_path)
        data = datamodel.load_dataset(data_path)
        logits = finetune.classify_logits(model, data)
        inputs += [model_path, data_path]
    else:
        raise ConfigError(f"{metric} scoring needs --logits, or --model with --data")
    return batched(logits), inputs


def _cmd_score(args) -> int:
    r = _Resolver(args, "score")
    metric = str(r.get("metric", required=True))
    temperature = float(r.get("temperature", 1.0))
    out = r.get("out", required=True)
    sv, inputs = _score_values(r, metric, temperature)
    sv.save_csv(out)
    _write_manifest("score", {"metric": metric, "temperature": temperature}, 0, inputs, [out])
    return 0


def _parse_ood_args(raw: list[str]) -> dict[str, str]:
    sets = {}
    for i, item in enumerate(raw):
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = (f"ood{i}" if len(raw) > 1 else "ood"), item
        if name in sets:
            raise ConfigError(f"duplicate OOD set name {name!r}")
        sets[name] = path
    return sets


def _cmd_eval(args) -> int:
    r = _Resolver(args, "eval")
    id_path = r.get("id", required=True)
    ood_raw = r.get("ood", required=True)
    if isinstance(ood_raw, str):
        ood_raw = [ood_raw]
    out = r.get("out", required=True)
    tpr = float(r.get("tpr", 0.95))
    bins = int(r.get("bins", 20))
    hist_prefix = r.get("histograms")
    ood_sets = _parse_ood_args(list(ood_raw))
    id_scores = scores.load_scores_csv(id_path)
    ood_scores = {name: scores.load_scores_csv(path) for name, path in ood_sets.items()}
    report = evaluate.build_report(id_scores, ood_scores, tpr=tpr, bins=bins)
    report.save(out)
    outputs = [out]
    if hist_prefix is not None:
        for name, doc in (("id", report.id_histogram), *report.ood_histograms.items()):
            path = f"{hist_prefix}{name}.csv"
            edges = np.asarray(doc["bin_edges"])
            counts = np.asarray(doc["counts"])
            text = evaluate.histogram_csv(edges, counts, int(counts.sum()))
            atomic_write_bytes(path, text.encode("utf-8"))
            outputs.append(path)
    _write_manifest(
        "eval", {"tpr": tpr, "bins": bins}, 0, [id_path, *ood_sets.values()], outputs
    )
    return 0


def _cmd_confusion(args) -> int:
    r = _Resolver(args, "confusion")
    gaussian_path = r.get("gaussian", required=True)
    features_path = r.get("features", required=True)
    id_scores_path = r.get("id_scores", required=True)
    out = r.get("out", required=True)
    tpr = float(r.get("tpr", 0.95))
    gm = gaussian.GaussianModel.load(gaussian_path)
    fs = datamodel.read_feature_dump(features_path)
    id_scores = scores.load_scores_csv(id_scores_path)
    counts = evaluate.confusion_counts(gm, fs, id_scores, tpr)
    doc = {
        "tpr": tpr,
        "threshold": evaluate.threshold_at_tpr(id_scores, tpr),
        "counts": {str(k): v for k, v in counts.items()},
        "accepted": int(sum(counts.values())),
    }
    atomic_write_bytes(out, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    _write_manifest(
        "confusion", {"tpr": tpr}, 0, [gaussian_path, features_path, id_scores_path], [out]
    )
    return 0


def _selfcheck_gradients() -> float:
    dims = mim.ModelDims(d_model=8, depth=1, heads=2, tokens=4, patch=2, channels=1)
    rng = np.random.Generator(np.random.PCG64(0))
    ps = mim.patchify(rng.uniform(size=(4, 4, 1)), 2)
    mask = mim.sample_mask(4, 0.5, 0)
    worst = 0.0

    model = mim.init_model(dims, seed=0, dtype=np.float64)
    worst = max(worst, mim.gradient_check(model, lambda m: mim.mim_loss_and_grad(m, ps, mask)))

    dims_cb = mim.ModelDims(d_model=8, depth=1, heads=2, tokens=4, patch=2, channels=1, recon_dim=6)
    model_cb = mim.init_model(dims_cb, seed=0, dtype=np.float64)
    cb = mim.Codebook(centroids=rng.normal(size=(6, 4)))
    worst = max(
        worst,
        mim.gradient_check(model_cb, lambda m: mim.mim_loss_and_grad(m, ps, mask, "codebook", cb)),
    )

    model_cls = mim.attach_cls_head(model, 5, seed=1)
    tokens = ps.tokens[None]
    targets = finetune.smooth_labels(2, finetune.SmoothingConfig(0.1, 5))[None]

    def cls_thunk(m):
        loss, _, grads = mim._classify_loss_and_grad_batch(m.params, m.dims, tokens, targets, True)
        return loss, grads

    worst = max(worst, mim.gradient_check(model_cls, cls_thunk))
    return worst


def _cmd_selfcheck(args) -> int:
    failures = 0

    def report(name: str, ok: bool, detail: str) -> None:
        nonlocal failures
        print(f"selfcheck {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        failures += 0 if ok else 1

    worst = _selfcheck_gradients()
    report("gradient-fidelity", worst < 1e-4, f"max rel err {worst:.3e}")

    rng = np.random.Generator(np.random.PCG64(1))
    worst_diff = 0.0
    for _ in range(25):
        ids = rng.integers(-3, 4, size=rng.integers(1, 40)).astype(float)
        oods = rng.integers(-3, 4, size=rng.integers(1, 40)).astype(float)
        gt = (oods[:, None] > ids[None, :]).sum()
        eq = (oods[:, None] == ids[None, :]).sum()
        brute = (gt + 0.5 * eq) / (ids.size * oods.size)
        worst_diff = max(worst_diff, abs(evaluate.auroc(ids, oods) - brute))
    report("auroc-oracle", worst_diff <= 1e-12, f"max |rank - brute| {worst_diff:.2e}")

    worst_rel = 0.0
    for _ in range(25):
        d, k = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        a = rng.normal(size=(d, d))
        sigma = a @ a.T + 0.5 * np.eye(d)
        gm = gaussian.GaussianModel(
            means=rng.normal(size=(k, d)), chol=np.linalg.cholesky(sigma),
            class_labels=np.arange(k, dtype=np.int64),
            class_counts=np.full(k, 2, dtype=np.int64), reg_epsilon=1e-12, dim=d,
        )
        inv = np.linalg.inv(sigma)
        f = rng.normal(size=d)
        brute = min(float((f - mu) @ inv @ (f - mu)) for mu in gm.means)
        got = gaussian.mahalanobis_score(gm, f)
        worst_rel = max(worst_rel, abs(got - brute) / max(abs(brute), 1e-30))
    report("mahalanobis-oracle", worst_rel < 1e-8, f"max rel diff {worst_rel:.2e}")

    hits = np.zeros(10)
    draws = 5000
    for i in range(draws):
        hits[mim.sample_mask(10, 0.4, i).masked_indices] += 1
    freq_err = float(np.abs(hits / draws - 0.4).max())
    report("mask-frequency", freq_err < 0.03, f"max |freq - 0.4| {freq_err:.3f}")

    return 0 if failures == 0 else 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mood",
        description="Masked-image-modeling OOD detection pipeline (desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.set_defaults(handler=handler)
        return p

    p = add("gen", _cmd_gen, "generate a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--ood", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("pretrain", _cmd_pretrain, "masked-image-modeling pretraining")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--target-mode", dest="target_mode", choices=("pixel", "codebook"))
    p.add_argument("--codebook-size", dest="codebook_size", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--seed", type=int)

    p = add("finetune", _cmd_finetune, "label-smoothed classifier fine-tuning")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--mode", choices=finetune.FINETUNE_MODES)
    p.add_argument("--target-class", dest="target_class", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)

    p = add("extract", _cmd_extract, "pooled feature extraction to MOODFD")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--layer", choices=finetune.FEATURE_LAYERS)
    p.add_argument("--out")

    p = add("fit", _cmd_fit, "fit the class-conditional Gaussian")
    p.add_argument("--features")
    p.add_argument("--reg", type=float)
    p.add_argument("--out")

    p = add("score", _cmd_score, "score samples with one OOD metric")
    p.add_argument("--metric", choices=scores.METRICS)
    p.add_argument("--features")
    p.add_argument("--logits")
    p.add_argument("--gaussian")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--temperature", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")

    p = add("eval", _cmd_eval, "AUROC / FPR@TPR report from score CSVs")
    p.add_argument("--id")
    p.add_argument("--ood", action="append", help="OOD score CSV, optionally name=path")
    p.add_argument("--tpr", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--histograms", help="path prefix for per-set histogram CSV exports")
    p.add_argument("--out")

    p = add("confusion", _cmd_confusion, "near-OOD confusion counts at a TPR threshold")
    p.add_argument("--gaussian")
    p.add_argument("--features")
    p.add_argument("--id-scores", dest="id_scores")
    p.add_argument("--tpr", type=float)
    p.add_argument("--out")

    add("selfcheck", _cmd_selfcheck, "run gradient and oracle self-checks")
    return parser


def run(argv=None) -> int:
    """Entry point; returns the process exit code instead of raising."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except MoodError as exc:
        print(f"mood: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"mood: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"mood: i/o error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
