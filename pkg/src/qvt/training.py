"""Adam, the minibatch training loop and a small grid-search helper."""

from __future__ import annotations

import copy
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .data import N_CLASSES, DatasetSplit, EnzymeRecord, stratified_split
from .encoders import MODALITIES, EncoderConfig, QuantumNormalizer, text_lexemes
from .fusion_model import ModelConfig, QVTModel, focal_loss, forward_batch, init_model, predict_proba
from .mol_chem import build_vocab

log = logging.getLogger(__name__)

PRESETS = {
    "desk": {},
    "paper": {"d_model": 1024},
}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    lr: float = 3e-3
    gamma: float = 2.0
    dropout: float = 0.1
    enabled_modalities: tuple[str, ...] = MODALITIES
    preset: str = "desk"
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    n_classes: int = N_CLASSES
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        self.enabled_modalities = tuple(self.enabled_modalities)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.enabled_modalities, self.n_classes, self.dropout)

    def with_modalities(self, modalities: Sequence[str]) -> TrainConfig:
        clone = copy.deepcopy(self)
        clone.enabled_modalities = tuple(modalities)
        return clone

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["enabled_modalities"] = list(self.enabled_modalities)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        encoder = dict(PRESETS[d.get("preset", "desk")])
        encoder.update(d.pop("encoder", {}) or {})
        return cls(encoder=EncoderConfig.from_dict(encoder), **d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, tc.Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place. Parameters without a
    gradient entry are treated as having gradient zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise tc.ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t) if b1 < 1.0 else m
        v_hat = v / (1.0 - b2**t) if b2 < 1.0 else v
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


# ------------------------------------------------------------------- train

def class_alpha(records: Sequence[EnzymeRecord], n_classes: int) -> np.ndarray:
    """Inverse class frequency, normalised to mean 1; unseen classes count once."""
    counts = np.bincount([r.label for r in records], minlength=n_classes).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return inv / inv.mean()


def prepare_model(config: TrainConfig, train_records: Sequence[EnzymeRecord]) -> QVTModel:
    vocab: tuple[str, ...] = ("<unk>",)
    if "sequence" in config.enabled_modalities:
        vocab = build_vocab(text_lexemes(r, config.encoder.text_source) for r in train_records)
    normalizer = QuantumNormalizer.fit([r.quantum.as_tuple() for r in train_records])
    rng = np.random.default_rng([config.seed, 0])
    model = init_model(config.model_config(), vocab, normalizer, rng)
    model.meta = {"train_config": config.to_dict()}
    return model


def top1(model: QVTModel, records: Sequence[EnzymeRecord]) -> float:
    if not records:
        return 0.0
    probs = predict_proba(model, records)
    return float(np.mean(np.argmax(probs, axis=1) == np.array([r.label for r in records])))


@dataclass
class TrainResult:
    model: QVTModel
    history: list[dict]
    split: DatasetSplit
    optimizer: AdamState

    def __iter__(self):
        # unpacks as (model, history)
        return iter((self.model, self.history))


def train(config: TrainConfig, data: Sequence[EnzymeRecord], split: DatasetSplit | None = None) -> TrainResult:
    if not data and split is None:
        raise ValueError("no training data")
    if split is None:
        split = stratified_split(data, config.split_ratios, config.seed)
    train_set = split.train
    if not train_set:
        raise ValueError("training split is empty")
    model = prepare_model(config, train_set)
    alpha = class_alpha(train_set, config.n_classes)
    state = AdamState(lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    selection = split.validation or train_set

    feats = [model.featurizer(r) for r in train_set]
    labels = np.array([r.label for r in train_set])
    history = []
    best_acc, best_params = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits, _ = forward_batch(model, [feats[i] for i in idx], training=True, rng=dropout_rng)
            loss = focal_loss(logits, labels[idx], alpha, config.gamma)
            for p in model.params.values():
                p.zero_grad()
            tc.backward(loss)
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, state)
            total += loss.item() * len(idx)
        val_acc = top1(model, selection)
        history.append({"epoch": epoch, "train_loss": total / len(train_set), "val_top1": val_acc})
        log.info("epoch %d loss %.4f val_top1 %.4f", epoch, total / len(train_set), val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            model.meta["best_epoch"] = epoch
    for k, p in model.params.items():
        p.data = best_params[k]
        p.zero_grad()
    return TrainResult(model, history, split, state)


# ------------------------------------------------------------- grid search

def _set_path(config: TrainConfig, key: str, value) -> TrainConfig:
    clone = copy.deepcopy(config)
    target = clone
    parts = key.split(".")
    for part in parts[:-1]:
        target = getattr(target, part)
    if not hasattr(target, parts[-1]):
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, parts[-1], value)
    clone.__post_init__()
    if isinstance(target, EncoderConfig):
        target.__post_init__()
    return clone


def grid_search(config: TrainConfig, data: Sequence[EnzymeRecord], grid: dict[str, list]) -> tuple[TrainConfig, list[dict]]:
    """Train every combination in ``grid`` (keys may be dotted, e.g.
    ``encoder.d_model``) and pick the best final-model validation top-1;
    ties go to the earlier combination."""
    keys = sorted(grid)
    split = stratified_split(data, config.split_ratios, config.seed)
    results, best, best_acc = [], config, -1.0
    for values in itertools.product(*(grid[k] for k in keys)):
        candidate = config
        for k, v in zip(keys, values):
            candidate = _set_path(candidate, k, v)
        model, _ = train(candidate, data, split)
        acc = top1(model, split.validation or split.train)
        results.append({"settings": dict(zip(keys, values)), "val_top1": acc})
        if acc > best_acc:
            best, best_acc = candidate, acc
    return best, results
