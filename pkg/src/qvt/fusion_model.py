"""Cross-attention fusion over modality tokens, the classification head and focal loss.

Each enabled modality contributes one token (its embedding after a
per-modality projection). A learned FUSE token is prepended and one
multi-head self-attention block runs over the ``n + 1`` tokens; the FUSE
row of the result is the fused representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders as enc
from . import tensor_core as tc
from .encoders import MODALITIES, EncoderConfig, Featurizer, ModalityEmbedding, Params, QuantumNormalizer
from .tensor_core import Tensor

CHECKPOINT_FORMAT = "qvt-checkpoint"
CHECKPOINT_VERSION = 1


class EmptyModalitySet(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    modalities: tuple[str, ...] = MODALITIES
    n_classes: int = 6
    dropout: float = 0.1

    def __post_init__(self):
        mods = tuple(m for m in MODALITIES if m in set(self.modalities))
        if not mods:
            raise EmptyModalitySet("at least one modality must be enabled")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        self.modalities = mods
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be in [0, 1]")


@dataclass
class AttentionRecord:
    weights: np.ndarray  # [n_heads, T, T], T = n_tokens + 1
    tokens: tuple[str, ...]  # ("fuse", *modalities)


@dataclass
class Prediction:
    logits: Tensor
    probabilities: np.ndarray
    attention: AttentionRecord


@dataclass
class QVTModel:
    config: ModelConfig
    params: Params
    vocab: tuple[str, ...]
    normalizer: QuantumNormalizer
    meta: dict = field(default_factory=dict)
    _featurizer: Featurizer | None = field(default=None, repr=False)

    @property
    def featurizer(self) -> Featurizer:
        if self._featurizer is None:
            self._featurizer = Featurizer(self.config.encoder, self.vocab, self.normalizer, self.config.modalities)
        return self._featurizer

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(config: ModelConfig, vocab: Sequence[str], normalizer: QuantumNormalizer,
               rng: np.random.Generator) -> QVTModel:
    cfg = config.encoder
    d = cfg.d_model
    params: Params = {}
    for m in config.modalities:
        if m == "sequence":
            enc.init_sequence(params, rng, cfg, len(vocab))
        else:
            enc.INITIALIZERS[m](params, rng, cfg)
    for m in config.modalities:
        enc.init_linear(params, rng, f"fusion.proj.{m}", d, d)
    params["fusion.fuse_token"] = enc.init_weight(rng, (d,), d)
    enc.init_attention(params, rng, "fusion.attn", d)
    enc.init_layer_norm(params, "fusion.ln", d)
    enc.init_linear(params, rng, "head.fc1", d, d)
    enc.init_linear(params, rng, "head.fc2", d, config.n_classes)
    return QVTModel(config, params, tuple(vocab), normalizer)


# ------------------------------------------------------------------ fusion

def fuse_batch(embeddings: Sequence[tuple[str, Tensor]], params: Params, n_heads: int):
    """embeddings: (modality, [B, d]) pairs → (fused [B, d], attention [B, h, T, T])."""
    if not embeddings:
        raise EmptyModalitySet("nothing to fuse")
    B, d = embeddings[0][1].shape
    tokens = [tc.reshape(params["fusion.fuse_token"] + tc.tensor(np.zeros((B, d))), (B, 1, d))]
    for m, e in embeddings:
        if e.shape != (B, d):
            raise tc.ShapeMismatch(f"{m} embedding has shape {e.shape}, expected {(B, d)}")
        tokens.append(tc.reshape(enc.linear(params, f"fusion.proj.{m}", e), (B, 1, d)))
    x = tc.concat(tokens, axis=1)
    attn, weights = enc.multi_head_attention(params, "fusion.attn", x, n_heads)
    out = enc.affine_layer_norm(params, "fusion.ln", x + attn)
    return out[:, 0, :], weights


def fuse(embeddings: Sequence[ModalityEmbedding], params: Params, n_heads: int):
    if not embeddings:
        raise EmptyModalitySet("nothing to fuse")
    d = embeddings[0].vector.shape[0]
    pairs = [(e.modality, tc.reshape(e.vector, (1, d))) for e in embeddings]
    fused, weights = fuse_batch(pairs, params, n_heads)
    record = AttentionRecord(weights[0], ("fuse",) + tuple(e.modality for e in embeddings))
    return tc.reshape(fused, (d,)), record


# -------------------------------------------------------------------- head

def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    if p >= 1.0:
        return np.zeros(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def classify_batch(fused: Tensor, params: Params, training: bool = False, p: float = 0.1,
                   rng: np.random.Generator | None = None) -> Tensor:
    h = tc.relu(enc.linear(params, "head.fc1", fused))
    if training and p > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs a seeded generator")
        h = h * dropout_mask(h.shape, p, rng)
    return enc.linear(params, "head.fc2", h)


def classify(fused: Tensor, params: Params, training: bool = False, p: float = 0.1,
             rng: np.random.Generator | None = None, attention: AttentionRecord | None = None) -> Prediction:
    d = fused.shape[-1]
    logits = tc.reshape(classify_batch(tc.reshape(fused, (1, d)), params, training, p, rng), (-1,))
    probs = tc.softmax(logits).data
    if attention is None:
        attention = AttentionRecord(np.zeros((0, 0, 0)), ())
    return Prediction(logits, probs, attention)


# ----------------------------------------------------------------- forward

def embed_batch(model: QVTModel, feats: Sequence[enc.RecordFeatures]) -> list[tuple[str, Tensor]]:
    cfg = model.config.encoder
    p = model.params
    out = []
    for m in model.config.modalities:
        if m == "sequence":
            ids, mask = enc.pad_tokens([f.tokens for f in feats])
            e = enc.sequence_forward(p, cfg, ids, mask)
        elif m == "graph":
            x, edges, owner = enc.batch_graphs([f.graph for f in feats])
            e = enc.graph_forward(p, cfg, x, edges, owner, len(feats))
        elif m == "image":
            e = enc.image_forward(p, cfg, np.stack([f.image for f in feats]))
        elif m == "quantum":
            e = enc.quantum_forward(p, np.stack([f.quantum for f in feats]))
        else:
            e = enc.fingerprint_forward(p, np.stack([f.fingerprint for f in feats]))
        out.append((m, e))
    return out


def forward_batch(model: QVTModel, feats: Sequence[enc.RecordFeatures], training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Logits [B, n_classes] and fusion attention [B, h, T, T] for pre-featurised records."""
    fused, weights = fuse_batch(embed_batch(model, feats), model.params, model.config.encoder.n_heads)
    logits = classify_batch(fused, model.params, training, model.config.dropout, rng)
    return logits, weights


def forward(record, model: QVTModel, training: bool = False, rng: np.random.Generator | None = None) -> Prediction:
    feats = model.featurizer(record)
    logits, weights = forward_batch(model, [feats], training, rng)
    logits = tc.reshape(logits, (-1,))
    att = AttentionRecord(weights[0], ("fuse",) + model.config.modalities)
    return Prediction(logits, tc.softmax(logits).data, att)


def predict_proba(model: QVTModel, records: Sequence, batch_size: int = 64) -> np.ndarray:
    rows = []
    for start in range(0, len(records), batch_size):
        feats = [model.featurizer(r) for r in records[start : start + batch_size]]
        logits, _ = forward_batch(model, feats)
        rows.append(tc.softmax(logits, axis=-1).data)
    return np.concatenate(rows) if rows else np.zeros((0, model.config.n_classes))


# -------------------------------------------------------------------- loss

def focal_loss(logits: Tensor, labels, alpha, gamma: float = 2.0) -> Tensor:
    """Mean of ``-alpha[y] * (1 - p_y)**gamma * log p_y`` over the batch.

    ``logits`` is [n_classes] for one record or [B, n_classes];
    ``labels`` are zero-based class indices.
    """
    if logits.ndim == 1:
        logits = tc.reshape(logits, (1, -1))
    B, C = logits.shape
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (B,):
        raise tc.ShapeMismatch(f"{y.shape[0]} labels for {B} rows")
    if np.any(y < 0) or np.any(y >= C):
        raise LabelOutOfRange(f"labels must be in [0, {C})")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (C,))
    if np.any(alpha <= 0):
        raise ValueError("alpha entries must be positive")
    onehot = np.eye(C)[y]
    log_p = tc.sum(tc.log_softmax(logits, axis=-1) * onehot, axis=1)
    modulator = tc.power(1.0 - tc.exp(log_p), gamma)
    per_record = modulator * log_p * (-alpha[y])
    return tc.mean(per_record)


# -------------------------------------------------------------- checkpoints

def model_to_dict(model: QVTModel) -> dict:
    cfg = model.config
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "encoder": cfg.encoder.to_dict(),
            "modalities": list(cfg.modalities),
            "n_classes": cfg.n_classes,
            "dropout": cfg.dropout,
        },
        "meta": model.meta,
        "vocab": list(model.vocab),
        "normalization": model.normalizer.to_dict(),
        "tensors": {name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                    for name, t in sorted(model.params.items())},
    }


def model_from_dict(obj: dict) -> QVTModel:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a QVT checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    c = obj["config"]
    config = ModelConfig(EncoderConfig.from_dict(c["encoder"]), tuple(c["modalities"]), c["n_classes"], c["dropout"])
    params = {name: tc.parameter(np.array(t["values"], dtype=np.float64).reshape(t["shape"]))
              for name, t in obj["tensors"].items()}
    norm = obj["normalization"]
    normalizer = QuantumNormalizer(tuple(norm["minimum"]), tuple(norm["maximum"]))
    return QVTModel(config, params, tuple(obj["vocab"]), normalizer, obj.get("meta", {}))


def save_checkpoint(model: QVTModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> QVTModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
