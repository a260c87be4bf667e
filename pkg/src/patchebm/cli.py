"""Command-line pipeline: synth, split, train, evaluate, explain, compare.

Every command is deterministic given --seed and exits 0 on success; failures
print one machine-readable JSON line to stderr and exit nonzero. Report
commands write CSV and JSON plus rendered PNG figures into --out.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import datakit, evalstats, plots
from .backbones import PatchGrid, forward_logits
from .ebm import EbmTrainConfig, fit_ebm, group_importance_ci
from .trainer import (
    GlIcnnModel,
    TrainConfig,
    extract_features,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train_fc_model,
    train_pipeline,
)
from . import nn

MODEL_CNN_EBM = "cnn_ebm"
MODEL_CNN_MLP = "cnn_mlp"
MODEL_CNN_LINEAR = "cnn_linear"
MODEL_PATCHMEAN_EBM = "patchmean_ebm"


def _default_synth() -> dict:
    return dataclasses.asdict(datakit.SynthConfig())


def _default_train() -> dict:
    cfg = TrainConfig()
    out = dataclasses.asdict(cfg)
    return out


def load_config(path: str | None) -> dict:
    base = {"synth": _default_synth(), "train": _default_train()}
    if path:
        user = json.loads(Path(path).read_text())
        for section in ("synth", "train"):
            if section in user:
                unknown = set(user[section]) - set(base[section])
                if unknown:
                    raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
                for key, value in user[section].items():
                    if key == "ebm" and isinstance(value, dict):
                        base["train"]["ebm"].update(value)
                    else:
                        base[section][key] = value
    return base


def _synth_config(cfg: dict, seed: int | None) -> datakit.SynthConfig:
    data = dict(cfg["synth"])
    if seed is not None:
        data["seed"] = seed
    data["volume_shape"] = tuple(data["volume_shape"])
    data["patch_shape"] = tuple(data["patch_shape"])
    data["signal_patches"] = tuple(data["signal_patches"])
    data["subjects_per_class"] = tuple(data["subjects_per_class"])
    return datakit.SynthConfig(**data)


def _train_config(cfg: dict, seed: int | None, task: str | None) -> TrainConfig:
    data = dict(cfg["train"])
    if seed is not None:
        data["seed"] = seed
    if task is not None:
        data["task"] = task
    ebm = EbmTrainConfig(**data.pop("ebm"))
    if data.get("class_weights") is not None:
        data["class_weights"] = tuple(data["class_weights"])
    return TrainConfig(ebm=ebm, **data)


def _grid_for(dataset: datakit.VolumeDataset, cfg: dict, names_path: str | None) -> PatchGrid:
    patch_shape = tuple(cfg["synth"]["patch_shape"])
    grid = PatchGrid(dataset.volume_shape, patch_shape)
    if names_path:
        grid = grid.with_names_from(names_path)
    return grid


def _split_dataset(dataset: datakit.VolumeDataset, seed: int):
    tr, va, te = evalstats.stratified_split(dataset.labels, seed=seed)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def _write_split_manifests(out: Path, dataset: datakit.VolumeDataset,
                           manifest_path: Path, seed: int) -> dict[str, Path]:
    entries = {e.subject_id: e for e in datakit.load_manifest(manifest_path)}
    tr, va, te = evalstats.stratified_split(dataset.labels, seed=seed)
    paths = {}
    for name, idx in (("train", tr), ("valid", va), ("test", te)):
        subset = [entries[dataset.subject_ids[i]] for i in idx]
        path = out / f"{name}.csv"
        datakit.write_manifest(path, subset)
        paths[name] = path
    return paths


def cmd_synth(args, cfg: dict) -> int:
    synth_cfg = _synth_config(cfg, args.seed)
    if args.print_config:
        print(json.dumps(dataclasses.asdict(synth_cfg), indent=2))
        return 0
    out = Path(args.out)
    dataset = datakit.generate_synthetic(synth_cfg)
    manifest = datakit.write_dataset(out, dataset)
    print(f"wrote {len(dataset)} volumes and {manifest}")
    return 0


def cmd_split(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.print_config:
        print(json.dumps({"seed": seed, "ratios": [0.8, 0.1, 0.1]}, indent=2))
        return 0
    dataset = datakit.load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _write_split_manifests(out, dataset, Path(args.manifest), seed)
    counts = {name: sum(1 for _ in datakit.load_manifest(p)) for name, p in paths.items()}
    print(f"split {len(dataset)} subjects into " +
          ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args, cfg: dict) -> int:
    config = _train_config(cfg, args.seed, args.task)
    if args.print_config:
        print(json.dumps(dataclasses.asdict(config), indent=2))
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = datakit.load_dataset(args.manifest)
    train_ds, valid_ds, _ = _split_dataset(dataset, config.seed)
    _write_split_manifests(out, dataset, Path(args.manifest), config.seed)

    def log(epoch: int, loss: float) -> None:
        print(f"epoch {epoch}: validation loss {loss:.5f}")

    if args.from_checkpoint:
        model = load_checkpoint(args.from_checkpoint)
        model, result = finetune(model, train_ds, valid_ds, config)
    else:
        grid = _grid_for(dataset, cfg, args.patch_names)
        model, result = train_pipeline(train_ds, valid_ds, grid, config, log_fn=log)
    ckpt = out / "model.glic"
    save_checkpoint(ckpt, model)
    history = {
        "task": config.task,
        "losses": result.losses,
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
        "stop_epoch": result.stop_epoch,
        "stopped_early": result.stopped_early,
    }
    (out / "history.json").write_text(json.dumps(history, indent=2))
    print(f"saved best model (epoch {result.best_epoch}, "
          f"validation loss {result.best_loss:.5f}) to {ckpt}")
    return 0


def cmd_evaluate(args, cfg: dict) -> int:
    if args.print_config:
        print(json.dumps({"bootstrap_reps": 100, "seed": args.seed or 0}, indent=2))
        return 0
    model = load_checkpoint(args.from_checkpoint)
    dataset = datakit.load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    task = args.task or model.config.task
    scores = model.predict_proba(dataset.volumes)
    scored = evalstats.ScoredSet(dataset.subject_ids, scores, dataset.labels)
    point = evalstats.auc(scored)
    low, high = evalstats.bootstrap_ci(scored, evalstats.auc, reps=100, seed=seed)
    report = evalstats.EvalReport(task, [evalstats.ModelResult(MODEL_CNN_EBM, point, low, high)])
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    with open(out / "scores.csv", "w") as f:
        f.write("subject_id,score,label\n")
        for sid, s, y in zip(dataset.subject_ids, scores, dataset.labels):
            f.write(f"{sid},{s:.8f},{y}\n")
    plots.save_roc_curve(scored, out / "roc.png", title=f"{task} (AUC={point:.3f})")
    print(f"AUC {point:.4f} [{low:.4f}, {high:.4f}] on {len(dataset)} subjects; reports in {out}")
    return 0


def cmd_explain(args, cfg: dict) -> int:
    if args.print_config:
        print(json.dumps({"top_k": args.top_k, "bootstrap_reps": 100,
                          "seed": args.seed or 0}, indent=2))
        return 0
    if bool(args.subject) == bool(args.group):
        raise ValueError("explain needs exactly one of --subject or --group")
    model = load_checkpoint(args.from_checkpoint)
    dataset = datakit.load_dataset(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = list(model.feature_names)
    seed = args.seed if args.seed is not None else 0

    if args.subject:
        if args.subject not in dataset.subject_ids:
            raise KeyError(f"unknown subject id {args.subject!r}")
        i = dataset.subject_ids.index(args.subject)
        feats = model.features(dataset.volumes[i:i + 1])[0]
        contributions = model.head.individual_importance(feats)
        logit = float(model.head.intercept + contributions.sum())
        prob = float(model.head.predict_proba(feats))
        predicted = int(prob >= 0.5)
        reference = int(dataset.labels[i])
        payload = {
            "subject_id": args.subject,
            "predicted_label": predicted,
            "probability": prob,
            "reference_label": reference,
            "intercept": model.head.intercept,
            "logit": logit,
            "contributions": {n: float(v) for n, v in zip(names, contributions)},
        }
        (out / "individual_importance.json").write_text(json.dumps(payload, indent=2))
        with open(out / "individual_importance.csv", "w") as f:
            f.write("feature,contribution\n")
            for n, v in zip(names, contributions):
                f.write(f"{n},{v:.8f}\n")
        plots.save_individual_importance(
            names, contributions, predicted, prob, reference,
            out / "individual_importance.png", subject_id=args.subject,
        )
        print(f"{args.subject}: predicted {predicted} (p={prob:.4f}), reference {reference}; "
              f"reports in {out}")
        return 0

    feats = model.features(dataset.volumes)
    point, low, high = group_importance_ci(model.head, feats, reps=100, seed=seed)
    order = np.argsort(-point)
    if args.top_k is not None:
        order = order[: args.top_k]
    payload = {
        "features": [
            {"feature": names[i], "importance": float(point[i]),
             "ci_low": float(low[i]), "ci_high": float(high[i])}
            for i in order
        ],
        "subjects": len(dataset),
        "bootstrap_reps": 100,
    }
    (out / "group_importance.json").write_text(json.dumps(payload, indent=2))
    with open(out / "group_importance.csv", "w") as f:
        f.write("feature,importance,ci_low,ci_high\n")
        for i in order:
            f.write(f"{names[i]},{point[i]:.8f},{low[i]:.8f},{high[i]:.8f}\n")
    plots.save_group_importance(
        [names[i] for i in order], point[order], low[order], high[order],
        out / "group_importance.png",
    )
    top = ", ".join(names[i] for i in order[: min(3, order.size)])
    print(f"group importance over {len(dataset)} subjects; top features: {top}; reports in {out}")
    return 0


def _patch_means(volumes: np.ndarray, grid: PatchGrid) -> np.ndarray:
    from .backbones import extract_patches

    return np.column_stack([
        patch.reshape(len(volumes), -1).mean(axis=1)
        for patch in extract_patches(volumes, grid)
    ])


def cmd_compare(args, cfg: dict) -> int:
    config = _train_config(cfg, args.seed, args.task)
    if args.print_config:
        print(json.dumps(dataclasses.asdict(config), indent=2))
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = datakit.load_dataset(args.manifest)
    grid = _grid_for(dataset, cfg, args.patch_names)
    train_ds, valid_ds, test_ds = _split_dataset(dataset, config.seed)

    print("training glass-box CNN+EBM model")
    glicnn, _ = train_pipeline(train_ds, valid_ds, grid, config)
    print("training black-box CNN+MLP baseline")
    mlp_backbones, mlp_head, _ = train_fc_model(train_ds, valid_ds, grid, config, "mlp")
    print("training CNN+linear baseline")
    lin_backbones, lin_head, _ = train_fc_model(train_ds, valid_ds, grid, config, "linear")
    print("training patch-mean EBM baseline")
    mean_head = fit_ebm(
        _patch_means(train_ds.volumes, grid), train_ds.labels, config.ebm,
        seed=config.seed, feature_names=grid.patch_names,
    )

    def fc_scorer(backbones, head):
        def score(volumes: np.ndarray) -> np.ndarray:
            logits = []
            with nn.no_grad():
                for lo in range(0, len(volumes), config.batch_size):
                    outp = forward_logits(backbones, head, volumes[lo:lo + config.batch_size])
                    logits.append(outp.data.reshape(-1))
            z = np.concatenate(logits).astype(np.float64)
            return 1.0 / (1.0 + np.exp(-z))
        return score

    models = [
        (MODEL_CNN_EBM, lambda v: glicnn.predict_proba(v)),
        (MODEL_CNN_MLP, fc_scorer(mlp_backbones, mlp_head)),
        (MODEL_CNN_LINEAR, fc_scorer(lin_backbones, lin_head)),
        (MODEL_PATCHMEAN_EBM, lambda v: np.asarray(mean_head.predict_proba(_patch_means(v, grid)))),
    ]
    report = evalstats.run_comparison(
        models, test_ds.volumes, test_ds.labels, test_ds.subject_ids,
        task=config.task, reps=100, seed=config.seed,
    )
    report.write_json(out / "comparison.json")
    report.write_csv(out / "comparison.csv")
    plots.save_auc_comparison(report, out / "auc_comparison.png")
    for r in report.results:
        print(f"{r.name}: AUC {r.auc:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]")
    print(f"reports in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchebm",
        description="Glass-box 3D image classification with patch-wise CNN "
                    "features and an explainable boosting head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
        if manifest:
            p.add_argument("--manifest", required=False, help="dataset manifest CSV")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override every seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--task", help="task label recorded in reports")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective config and exit")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, manifest=False)

    p = sub.add_parser("split", help="stratified 8:1:1 train/valid/test manifests")
    common(p)

    p = sub.add_parser("train", help="warm-up plus alternating optimization")
    common(p)
    p.add_argument("--from-checkpoint", help="fine-tune from this checkpoint")
    p.add_argument("--patch-names", help="JSON file mapping patch index to region name")

    p = sub.add_parser("evaluate", help="AUC with bootstrap CI on a manifest")
    common(p)
    p.add_argument("--from-checkpoint", required=True, help="checkpoint to evaluate")

    p = sub.add_parser("explain", help="individual or group feature importance")
    common(p)
    p.add_argument("--from-checkpoint", required=True, help="checkpoint to explain")
    p.add_argument("--subject", help="subject id for individual importance")
    p.add_argument("--group", action="store_true", help="group-level importance")
    p.add_argument("--top-k", type=int, help="keep only the k most important features")

    p = sub.add_parser("compare", help="train and compare all model variants")
    common(p)
    p.add_argument("--patch-names", help="JSON file mapping patch index to region name")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "compare": cmd_compare,
}

NEEDS_MANIFEST = {"split", "train", "evaluate", "explain", "compare"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command in NEEDS_MANIFEST and not args.print_config and not args.manifest:
            raise ValueError(f"{args.command} requires --manifest")
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
