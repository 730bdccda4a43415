import dataclasses
import math

import numpy as np
import pytest
from conftest import tiny_encoder
from gradcheck import end_to_end_check

from qvt import tensor_core as tc
from qvt.data import generate_synthetic_dataset
from qvt.encoders import ModalityEmbedding
from qvt.fusion_model import (
    EmptyModalitySet,
    LabelOutOfRange,
    ModelConfig,
    classify,
    focal_loss,
    forward,
    fuse,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    predict_proba,
    save_checkpoint,
)
from qvt.training import TrainConfig, prepare_model


@pytest.fixture(scope="module")
def records():
    return generate_synthetic_dataset(3, seed=5)


def make_model(records, modalities=None, seed=0, dropout=0.1):
    kw = dict(encoder=tiny_encoder(max_seq_len=24), seed=seed, dropout=dropout)
    if modalities is not None:
        kw["enabled_modalities"] = modalities
    return prepare_model(TrainConfig(**kw), records)


def ref_focal(logits, y, alpha=1.0, gamma=2.0):
    z = np.asarray(logits, dtype=np.float64)
    log_p = z[y] - (z.max() + math.log(np.sum(np.exp(z - z.max()))))
    p = math.exp(log_p)
    return -alpha * (1.0 - p) ** gamma * log_p


# ------------------------------------------------------------------ config

def test_model_config_validation():
    with pytest.raises(EmptyModalitySet):
        ModelConfig(modalities=())
    with pytest.raises(ValueError):
        ModelConfig(modalities=("smell",))
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.5)
    assert ModelConfig(modalities=("quantum", "sequence")).modalities == ("sequence", "quantum")


# ------------------------------------------------------------------ fusion

def test_identical_tokens_give_uniform_attention(records):
    model = make_model(records)
    p = model.params
    d = model.config.encoder.d_model
    for m in model.config.modalities:
        p[f"fusion.proj.{m}.w"].data = np.eye(d)
        p[f"fusion.proj.{m}.b"].data = np.zeros(d)
    v = np.random.default_rng(3).normal(size=d)
    p["fusion.fuse_token"].data = v.copy()
    embs = [ModalityEmbedding(m, tc.tensor(v)) for m in model.config.modalities]
    _, att = fuse(embs, p, model.config.encoder.n_heads)
    T = len(embs) + 1
    assert att.weights.shape == (model.config.encoder.n_heads, T, T)
    assert np.max(np.abs(att.weights - 1.0 / T)) < 1e-12
    assert att.tokens == ("fuse",) + model.config.modalities


def test_attention_rows_sum_to_one(records):
    model = make_model(records)
    for r in records[:6]:
        w = forward(r, model).attention.weights
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-10
        assert np.all(w >= 0)


def test_single_modality_deterministic(records):
    model = make_model(records, modalities=("graph",))
    a = forward(records[0], model)
    b = forward(records[0], model)
    assert a.logits.data.tolist() == b.logits.data.tolist()
    assert a.attention.weights.shape == (2, 2, 2)


def test_removing_token_differs_from_zeroing(records):
    model = make_model(records)
    d = model.config.encoder.d_model
    rng = np.random.default_rng(0)
    embs = [ModalityEmbedding(m, tc.tensor(rng.normal(size=d))) for m in model.config.modalities]
    n_heads = model.config.encoder.n_heads
    full, _ = fuse(embs, model.params, n_heads)
    removed, _ = fuse(embs[:-1], model.params, n_heads)
    zeroed, _ = fuse(embs[:-1] + [ModalityEmbedding(embs[-1].modality, tc.tensor(np.zeros(d)))], model.params, n_heads)
    assert not np.allclose(removed.data, zeroed.data)
    assert not np.allclose(full.data, zeroed.data)


def test_fuse_empty():
    with pytest.raises(EmptyModalitySet):
        fuse([], {}, 2)


# -------------------------------------------------------------------- head

def test_inference_deterministic_and_normalised(records):
    model = make_model(records)
    p1 = predict_proba(model, records)
    p2 = predict_proba(model, records)
    assert p1.tolist() == p2.tolist()
    assert p1.shape == (len(records), 6)
    assert np.max(np.abs(p1.sum(axis=1) - 1.0)) < 1e-12


def test_full_dropout_gives_bias(records):
    model = make_model(records, dropout=1.0)
    model.params["head.fc2.b"].data = np.arange(6, dtype=np.float64)
    pred = forward(records[0], model, training=True, rng=np.random.default_rng(0))
    assert pred.logits.data.tolist() == list(range(6))


def test_dropout_needs_rng(records):
    model = make_model(records)
    with pytest.raises(ValueError):
        forward(records[0], model, training=True)


def test_dropout_active_only_in_training(records):
    model = make_model(records, dropout=0.5)
    ref = forward(records[0], model).logits.data
    train = forward(records[0], model, training=True, rng=np.random.default_rng(1)).logits.data
    assert not np.allclose(ref, train)


def test_classify_single_vector(records):
    model = make_model(records)
    fused = tc.tensor(np.ones(model.config.encoder.d_model))
    pred = classify(fused, model.params)
    assert pred.logits.shape == (6,)
    assert abs(pred.probabilities.sum() - 1.0) < 1e-12


def test_quantum_only_ignores_smiles(records):
    model = make_model(records, modalities=("quantum",))
    r = records[0]
    other = dataclasses.replace(r, smiles="c1ccccc1O", selfies=None, sequence="GGGG")
    assert forward(r, model).logits.data.tolist() == forward(other, model).logits.data.tolist()


# -------------------------------------------------------------------- loss

def test_focal_gamma_zero_is_cross_entropy(rng):
    for _ in range(50):
        z = rng.normal(size=(4, 6)) * 3
        y = rng.integers(0, 6, size=4)
        got = focal_loss(tc.tensor(z), y, 1.0, gamma=0.0).item()
        ce = np.mean([-(z[i, y[i]] - np.log(np.sum(np.exp(z[i])))) for i in range(4)])
        assert abs(got - ce) < 1e-12


def test_focal_examples():
    assert focal_loss(tc.tensor(np.zeros(2)), 0, 1.0, gamma=0.0).item() == pytest.approx(math.log(2), abs=1e-15)
    val = focal_loss(tc.tensor(np.array([math.log(9.0), 0.0])), 0, 1.0, gamma=2.0).item()
    assert val == pytest.approx(1.0536051565782623e-3, rel=1e-9)
    assert val == pytest.approx(ref_focal([math.log(9.0), 0.0], 0), rel=1e-12)


def test_focal_matches_reference(rng):
    for _ in range(100):
        z = rng.normal(size=6) * 4
        y = int(rng.integers(0, 6))
        a = float(rng.uniform(0.1, 3))
        g = float(rng.uniform(0, 4))
        alpha = np.ones(6)
        alpha[y] = a
        got = focal_loss(tc.tensor(z), y, alpha, g).item()
        assert got == pytest.approx(ref_focal(z, y, a, g), rel=1e-10, abs=1e-15)


def test_focal_shift_invariant(rng):
    z = rng.normal(size=(3, 6))
    y = [0, 3, 5]
    base = focal_loss(tc.tensor(z), y, 1.0).item()
    assert abs(focal_loss(tc.tensor(z + 17.5), y, 1.0).item() - base) < 1e-12


def test_focal_monotone_in_true_class_probability():
    prev = math.inf
    for p in np.linspace(0.01, 0.99, 99):
        z = np.array([math.log(p), math.log(1 - p)])
        val = focal_loss(tc.tensor(z), 0, 1.0).item()
        assert val < prev
        prev = val


def test_focal_errors():
    z = tc.tensor(np.zeros((2, 3)))
    with pytest.raises(LabelOutOfRange):
        focal_loss(z, [0, 3], 1.0)
    with pytest.raises(LabelOutOfRange):
        focal_loss(z, [-1, 0], 1.0)
    with pytest.raises(tc.ShapeMismatch):
        focal_loss(z, [0], 1.0)
    with pytest.raises(ValueError):
        focal_loss(z, [0, 1], 1.0, gamma=-1)
    with pytest.raises(ValueError):
        focal_loss(z, [0, 1], 0.0)


# --------------------------------------------------------------- gradients

def test_end_to_end_gradient_matches_fd():
    worst, n = end_to_end_check(fraction=0.01, seed=0)
    assert n >= 10
    assert worst <= 1.0


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(records, tmp_path):
    model = make_model(records)
    path = tmp_path / "m.json"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    assert back.vocab == model.vocab
    assert sorted(back.params) == sorted(model.params)
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
    assert predict_proba(back, records).tolist() == predict_proba(model, records).tolist()
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign(records):
    d = model_to_dict(make_model(records))
    with pytest.raises(ValueError):
        model_from_dict(dict(d, format="other"))
    with pytest.raises(ValueError):
        model_from_dict(dict(d, version=99))
