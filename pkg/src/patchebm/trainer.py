"""Warm-up training, the alternating CNN/EBM optimization loop, checkpoints.

Per alternating epoch: (1) refit a fresh EBM head on features extracted with
frozen CNN weights, (2) run CNN gradient steps through the frozen head using
its surrogate gradient, (3) score weighted cross-entropy on the validation
set with the exact piecewise-constant head. The patience rule compares each
epoch's loss to the previous epoch's; checkpoints are saved only on a new
global minimum, so the returned model is always the argmin-loss snapshot.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .backbones import BackboneSet, LinearHead, MlpHead, PatchGrid, forward_logits
from .datakit import VolumeDataset
from .ebm import EbmHead, EbmTrainConfig, fit_ebm
from . import nn

CHECKPOINT_MAGIC = b"GLIC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    n_max: int = 15
    n_tolerate: int = 3
    warmup_epochs: int = 5
    steps_per_epoch: int | None = None  # None: one sweep over the training set
    batch_size: int = 16
    learning_rate: float = 1e-3
    class_weights: tuple[float, float] | None = None  # None: inverse class frequency
    seed: int = 0
    share_local_weights: bool = False
    task: str = "task"
    ebm: EbmTrainConfig = field(default_factory=EbmTrainConfig)

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if self.n_tolerate < 0:
            raise ValueError("n_tolerate must be non-negative")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch size and learning rate must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive when given")


def inverse_frequency_weights(labels: np.ndarray) -> tuple[float, float]:
    labels = np.asarray(labels)
    n = labels.size
    n1 = int(labels.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("training set must contain both classes")
    return n / (2.0 * n0), n / (2.0 * n1)


def weighted_ce(logits: np.ndarray, labels: np.ndarray, class_weights: tuple[float, float]) -> float:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    w = np.where(y == 1, class_weights[1], class_weights[0])
    per = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - y * z
    return float((w * per).mean())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def extract_features(backbones: BackboneSet, volumes: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Frozen-CNN feature matrix [N, k], computed without graph recording."""
    volumes = np.asarray(volumes, dtype=np.float32)
    chunks = []
    with nn.no_grad():
        for lo in range(0, len(volumes), batch_size):
            chunks.append(backbones.forward_features(volumes[lo:lo + batch_size]).data)
    return np.concatenate(chunks, axis=0).astype(np.float64)


@dataclass
class LoopResult:
    """Outcome of the patience-controlled epoch loop."""

    losses: list[float]
    best_epoch: int
    best_loss: float
    stop_epoch: int
    stopped_early: bool


def patience_loop(
    epoch_fn: Callable[[int], float],
    n_max: int,
    n_tolerate: int,
    save_fn: Callable[[int], None] | None = None,
) -> LoopResult:
    """Run epochs 1..n_max with the early-stopping contract.

    The stagnation counter resets exactly when loss_i < loss_{i-1} (loss_0 is
    +inf, so epoch 1 always resets); `save_fn` fires only on a new global
    minimum. Stops after epoch e when the counter exceeds n_tolerate.
    """
    losses: list[float] = []
    prev = math.inf
    best = math.inf
    best_epoch = 0
    t = 0
    stop_epoch = 0
    stopped_early = False
    for epoch in range(1, n_max + 1):
        loss = float(epoch_fn(epoch))
        losses.append(loss)
        if loss < best:
            best = loss
            best_epoch = epoch
            if save_fn is not None:
                save_fn(epoch)
        if loss < prev:
            t = 0
        else:
            t += 1
        prev = loss
        stop_epoch = epoch
        if t > n_tolerate:
            stopped_early = True
            break
    return LoopResult(losses, best_epoch, best, stop_epoch, stopped_early)


@dataclass
class GlIcnnModel:
    """Trained artifact: backbone weights plus the exact EBM head."""

    backbones: BackboneSet
    head: EbmHead
    config: TrainConfig

    @property
    def grid(self) -> PatchGrid:
        return self.backbones.grid

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.grid.feature_names

    def features(self, volumes: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return extract_features(self.backbones, volumes, batch_size)

    def predict_logit(self, volumes: np.ndarray) -> np.ndarray:
        return np.asarray(self.head.predict_logit(self.features(volumes)))

    def predict_proba(self, volumes: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_logit(volumes))


def _check_dataset(ds: VolumeDataset, name: str) -> None:
    if len(ds) == 0:
        raise ValueError(f"{name} set is empty")
    if len(np.unique(ds.labels)) < 2 and name == "training":
        raise ValueError("training set must contain both classes")


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def warmup_glcnn(
    train: VolumeDataset,
    grid: PatchGrid,
    config: TrainConfig,
    head_kind: str = "mlp",
) -> tuple[BackboneSet, MlpHead | LinearHead]:
    """End-to-end training of the CNN-plus-FC-head variant for warm-up epochs.

    With warmup_epochs == 0 the freshly initialized weights come back
    untouched. The FC head is retained as the black-box baseline's output
    block.
    """
    _check_dataset(train, "training")
    backbones = BackboneSet(grid, seed=_derive_seed(config.seed, 1),
                            share_local_weights=config.share_local_weights)
    head_cls = {"mlp": MlpHead, "linear": LinearHead}[head_kind]
    head = head_cls(grid.feature_count, seed=_derive_seed(config.seed, 2))
    if config.warmup_epochs == 0:
        return backbones, head
    weights = config.class_weights or inverse_frequency_weights(train.labels)
    params = backbones.parameters() + head.parameters()
    opt = nn.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 3])
    for _ in range(config.warmup_epochs):
        for batch in _minibatches(len(train), config.batch_size, rng):
            logits = forward_logits(backbones, head, train.volumes[batch])
            loss = nn.weighted_cross_entropy(logits, train.labels[batch], weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return backbones, head


class AlternatingTrainer:
    """One alternating epoch split into its three verifiable stages."""

    def __init__(self, backbones: BackboneSet, train: VolumeDataset,
                 valid: VolumeDataset, config: TrainConfig):
        _check_dataset(train, "training")
        if len(valid) == 0:
            raise ValueError("validation set is empty")
        self.backbones = backbones
        self.train = train
        self.valid = valid
        self.config = config
        self.weights = config.class_weights or inverse_frequency_weights(train.labels)
        self.head: EbmHead | None = None
        self.opt = nn.Adam(backbones.parameters(), lr=config.learning_rate)
        self.batch_rng = np.random.default_rng([config.seed, 4])

    def refit_head(self, epoch: int) -> EbmHead:
        """Stage 1: fresh EBM on frozen-CNN features (no CNN weight changes)."""
        feats = extract_features(self.backbones, self.train.volumes, self.config.batch_size)
        self.head = fit_ebm(
            feats, self.train.labels, self.config.ebm,
            seed=_derive_seed(self.config.seed, 5, epoch),
            feature_names=self.backbones.grid.feature_names,
        )
        return self.head

    def cnn_steps(self, epoch: int) -> None:
        """Stage 2: gradient steps through the frozen head's surrogate."""
        assert self.head is not None, "refit_head must run before cnn_steps"
        n = len(self.train)
        batches = list(_minibatches(n, self.config.batch_size, self.batch_rng))
        if self.config.steps_per_epoch is not None:
            batches = batches[: self.config.steps_per_epoch]
        w0, w1 = self.weights
        for batch in batches:
            feats = self.backbones.forward_features(self.train.volumes[batch])
            x = feats.data.astype(np.float64)
            y = self.train.labels[batch].astype(np.float64)
            prob = _sigmoid(np.asarray(self.head.predict_logit(x)))
            w = np.where(y == 1, w1, w0)
            dloss_dlogit = w * (prob - y) / y.size
            grad = dloss_dlogit[:, None] * self.head.surrogate_gradient(x)
            self.opt.zero_grad()
            feats.backward(grad.astype(feats.dtype))
            self.opt.step()

    def validation_loss(self) -> float:
        """Stage 3: weighted cross-entropy with the exact head."""
        assert self.head is not None, "refit_head must run before validation_loss"
        feats = extract_features(self.backbones, self.valid.volumes, self.config.batch_size)
        logits = np.asarray(self.head.predict_logit(feats))
        return weighted_ce(logits, self.valid.labels, self.weights)

    def run_epoch(self, epoch: int) -> float:
        self.refit_head(epoch)
        self.cnn_steps(epoch)
        return self.validation_loss()

    def snapshot(self) -> GlIcnnModel:
        assert self.head is not None
        copy = BackboneSet(self.backbones.grid, seed=0,
                           share_local_weights=self.config.share_local_weights)
        for (_, src), (_, dst) in zip(self.backbones.named_parameters(), copy.named_parameters()):
            dst.data = src.data.copy()
        return GlIcnnModel(copy, self.head, self.config)


def train_glicnn(
    backbones: BackboneSet,
    train: VolumeDataset,
    valid: VolumeDataset,
    config: TrainConfig,
    log_fn: Callable[[int, float], None] | None = None,
) -> tuple[GlIcnnModel, LoopResult]:
    """The alternating loop over warm-started backbones; returns the best model."""
    trainer = AlternatingTrainer(backbones, train, valid, config)
    best: dict[str, GlIcnnModel] = {}

    def epoch(i: int) -> float:
        loss = trainer.run_epoch(i)
        if log_fn is not None:
            log_fn(i, loss)
        return loss

    def save(epoch_idx: int) -> None:
        best["model"] = trainer.snapshot()

    result = patience_loop(epoch, config.n_max, config.n_tolerate, save)
    return best["model"], result


def train_pipeline(
    train: VolumeDataset,
    valid: VolumeDataset,
    grid: PatchGrid,
    config: TrainConfig,
    log_fn: Callable[[int, float], None] | None = None,
) -> tuple[GlIcnnModel, LoopResult]:
    """Warm-up plus alternating optimization, end to end."""
    backbones, _ = warmup_glcnn(train, grid, config)
    return train_glicnn(backbones, train, valid, config, log_fn=log_fn)


def finetune(
    model: GlIcnnModel,
    train: VolumeDataset,
    valid: VolumeDataset,
    config: TrainConfig,
) -> tuple[GlIcnnModel, LoopResult]:
    """Run the identical alternating loop starting from a loaded checkpoint."""
    if train.volume_shape != model.grid.volume_shape:
        raise ValueError(
            f"checkpoint expects volumes of shape {model.grid.volume_shape}, "
            f"dataset has {train.volume_shape}"
        )
    cfg = replace(config, share_local_weights=model.config.share_local_weights)
    return train_glicnn(model.backbones, train, valid, cfg)


def train_fc_model(
    train: VolumeDataset,
    valid: VolumeDataset,
    grid: PatchGrid,
    config: TrainConfig,
    head_kind: str = "mlp",
) -> tuple[BackboneSet, MlpHead | LinearHead, LoopResult]:
    """Black-box/linear baselines: end-to-end backprop with the same patience rule."""
    backbones, head = warmup_glcnn(train, grid, config, head_kind=head_kind)
    weights = config.class_weights or inverse_frequency_weights(train.labels)
    params = backbones.parameters() + head.parameters()
    opt = nn.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 6])
    best_state: dict[str, list[np.ndarray]] = {}

    def epoch_fn(epoch: int) -> float:
        n = len(train)
        batches = list(_minibatches(n, config.batch_size, rng))
        if config.steps_per_epoch is not None:
            batches = batches[: config.steps_per_epoch]
        for batch in batches:
            logits = forward_logits(backbones, head, train.volumes[batch])
            loss = nn.weighted_cross_entropy(logits, train.labels[batch], weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with nn.no_grad():
            val_logits = []
            for lo in range(0, len(valid), config.batch_size):
                out = forward_logits(backbones, head, valid.volumes[lo:lo + config.batch_size])
                val_logits.append(out.data.reshape(-1))
        return weighted_ce(np.concatenate(val_logits), valid.labels, weights)

    def save(epoch: int) -> None:
        best_state["params"] = [p.data.copy() for p in params]

    result = patience_loop(epoch_fn, config.n_max, config.n_tolerate, save)
    for p, saved in zip(params, best_state["params"]):
        p.data = saved
    return backbones, head, result


# --- checkpoint container -------------------------------------------------
#
# Layout: magic "GLIC" | uint32 version | uint32 json_len | json metadata |
# one raw little-endian float32 blob per parameter, in the order declared by
# the metadata's "params" list.


def save_checkpoint(path: str | Path, model: GlIcnnModel) -> None:
    path = Path(path)
    named = model.backbones.named_parameters()
    meta = {
        "version": CHECKPOINT_VERSION,
        "task": model.config.task,
        "seed": model.config.seed,
        "grid": {
            "volume_shape": list(model.grid.volume_shape),
            "patch_shape": list(model.grid.patch_shape),
            "patch_names": list(model.grid.patch_names),
        },
        "share_local_weights": model.config.share_local_weights,
        "feature_names": list(model.feature_names),
        "train_config": _config_to_dict(model.config),
        "ebm_head": json.loads(model.head.to_json()),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(meta).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> GlIcnnModel:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, json_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(f.read(json_len).decode("utf-8"))
        grid = PatchGrid(
            tuple(meta["grid"]["volume_shape"]),
            tuple(meta["grid"]["patch_shape"]),
            tuple(meta["grid"]["patch_names"]),
        )
        config = _config_from_dict(meta["train_config"])
        backbones = BackboneSet(grid, seed=0, share_local_weights=meta["share_local_weights"])
        named = backbones.named_parameters()
        declared = meta["params"]
        if len(declared) != len(named):
            raise ValueError(f"{path}: parameter count mismatch")
        for (name, tensor), spec_entry in zip(named, declared):
            if name != spec_entry["name"] or list(tensor.shape) != spec_entry["shape"]:
                raise ValueError(f"{path}: parameter layout mismatch at {spec_entry['name']}")
            count = int(np.prod(spec_entry["shape"]))
            raw = f.read(4 * count)
            if len(raw) < 4 * count:
                raise ValueError(f"{path}: checkpoint truncated inside {name}")
            tensor.data = np.frombuffer(raw, dtype="<f4").reshape(tensor.shape).astype(np.float32)
    head = EbmHead.from_json(json.dumps(meta["ebm_head"]))
    return GlIcnnModel(backbones, head, config)


def _config_to_dict(config: TrainConfig) -> dict:
    ebm = config.ebm
    return {
        "n_max": config.n_max,
        "n_tolerate": config.n_tolerate,
        "warmup_epochs": config.warmup_epochs,
        "steps_per_epoch": config.steps_per_epoch,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "class_weights": list(config.class_weights) if config.class_weights else None,
        "seed": config.seed,
        "share_local_weights": config.share_local_weights,
        "task": config.task,
        "ebm": {
            "max_bins": ebm.max_bins,
            "learning_rate": ebm.learning_rate,
            "max_rounds": ebm.max_rounds,
            "bag_count": ebm.bag_count,
            "validation_fraction": ebm.validation_fraction,
            "early_stopping_patience": ebm.early_stopping_patience,
            "bootstrap": ebm.bootstrap,
        },
    }


def _config_from_dict(data: dict) -> TrainConfig:
    ebm = EbmTrainConfig(**data.get("ebm", {}))
    fields = {k: v for k, v in data.items() if k != "ebm"}
    if fields.get("class_weights") is not None:
        fields["class_weights"] = tuple(fields["class_weights"])
    return TrainConfig(ebm=ebm, **fields)
