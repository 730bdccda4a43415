import json
import logging

import numpy as np
import pytest
from conftest import tiny_encoder

from qvt import tensor_core as tc
from qvt.data import generate_synthetic_dataset
from qvt.fusion_model import model_to_dict
from qvt.training import AdamState, TrainConfig, _set_path, adam_step, class_alpha, grid_search, top1, train

log = logging.getLogger(__name__)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(4, seed=2)


def tiny_config(**kw):
    base = dict(encoder=tiny_encoder(max_seq_len=24), epochs=2, batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -------------------------------------------------------------------- Adam

def test_adam_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.epsilon, s.step) == (1e-3, 0.9, 0.999, 1e-8, 0)


def test_adam_zero_grad():
    p = {"w": tc.parameter(np.array([1.0, -2.0]))}
    _, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert p["w"].data.tolist() == [1.0, -2.0] and state.step == 1
    _, state = adam_step(p, {}, state)
    assert p["w"].data.tolist() == [1.0, -2.0] and state.step == 2


def test_adam_first_step_is_sign(rng):
    g = rng.normal(size=20) * 10
    x0 = rng.normal(size=20)
    p = {"w": tc.parameter(x0.copy())}
    adam_step(p, {"w": g}, AdamState(lr=0.01))
    assert np.max(np.abs((p["w"].data - x0) + 0.01 * np.sign(g))) < 1e-9


def test_adam_descends_quadratic():
    p = {"x": tc.parameter(np.array([1.0]))}
    state = AdamState(lr=0.1)
    prev = 1.0
    for _ in range(5):
        x = p["x"]
        x.zero_grad()
        tc.backward(tc.sum(x * x))
        adam_step(p, {"x": x.grad}, state)
        f = float(p["x"].data[0] ** 2)
        assert f < prev
        prev = f


def test_adam_no_momentum_is_sign_descent(rng):
    state = AdamState(lr=0.05, beta1=0.0, beta2=0.0, epsilon=1e-8)
    x = rng.normal(size=10)
    p = {"w": tc.parameter(x.copy())}
    for _ in range(4):
        g = rng.normal(size=10)
        expected = p["w"].data - 0.05 * g / (np.abs(g) + 1e-8)
        adam_step(p, {"w": g}, state)
        assert np.max(np.abs(p["w"].data - expected)) < 1e-15


def test_adam_shape_mismatch():
    with pytest.raises(tc.ShapeMismatch):
        adam_step({"w": tc.parameter(np.zeros(3))}, {"w": np.zeros(2)}, AdamState())


# ------------------------------------------------------------------ config

def test_config_roundtrip(tmp_path):
    cfg = tiny_config(lr=0.01, enabled_modalities=("graph", "quantum"))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(path) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "learning_rate": 0.1})
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(split_ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        TrainConfig(preset="huge")
    assert TrainConfig.from_dict({"preset": "paper"}).encoder.d_model == 1024


def test_set_path():
    cfg = tiny_config()
    out = _set_path(cfg, "encoder.d_model", 12)
    assert out.encoder.d_model == 12 and cfg.encoder.d_model == 8
    with pytest.raises(ValueError):
        _set_path(cfg, "encoder.width", 3)


def test_class_alpha():
    recs = generate_synthetic_dataset(2, seed=0)[:10]  # classes 1..5, class 6 unseen
    a = class_alpha(recs, 6)
    assert abs(a.mean() - 1.0) < 1e-12
    assert a[0] == a[1] and a[5] > a[0]


# ------------------------------------------------------------------- train

def test_single_full_batch_epoch_is_one_step(small):
    result = train(tiny_config(epochs=1, batch_size=10_000), small)
    assert result.optimizer.step == 1
    assert set(result.optimizer.m) == set(result.model.params)
    assert len(result.history) == 1
    assert set(result.history[0]) == {"epoch", "train_loss", "val_top1"}


def test_training_bitwise_deterministic(small):
    a, ha = train(tiny_config(), small)
    b, hb = train(tiny_config(), small)
    assert ha == hb
    assert json.dumps(model_to_dict(a)) == json.dumps(model_to_dict(b))
    c, _ = train(tiny_config(seed=1), small)
    assert json.dumps(model_to_dict(a)) != json.dumps(model_to_dict(c))


def test_best_epoch_selection(small):
    result = train(tiny_config(epochs=4), small)
    accs = [h["val_top1"] for h in result.history]
    best = result.model.meta["best_epoch"]
    assert accs[best - 1] == max(accs) and best == accs.index(max(accs)) + 1
    assert top1(result.model, result.split.validation) == max(accs)


def test_smoothed_loss_sanity():
    data = generate_synthetic_dataset(10, seed=0)
    _, history = train(tiny_config(epochs=5), data)
    losses = np.array([h["train_loss"] for h in history])
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    log.info("smoothed train loss %s", smooth.tolist())
    assert np.all(smooth[1:] <= smooth[:-1] * 1.05)


def test_train_errors():
    with pytest.raises(ValueError):
        train(tiny_config(), [])


def test_grid_search(small):
    best, results = grid_search(tiny_config(epochs=1), small, {"lr": [1e-3, 1e-2], "encoder.d_model": [4, 8]})
    assert len(results) == 4
    assert [r["settings"] for r in results] == [
        {"encoder.d_model": 4, "lr": 1e-3}, {"encoder.d_model": 4, "lr": 1e-2},
        {"encoder.d_model": 8, "lr": 1e-3}, {"encoder.d_model": 8, "lr": 1e-2}]
    top = max(r["val_top1"] for r in results)
    first = next(r for r in results if r["val_top1"] == top)["settings"]
    assert (best.encoder.d_model, best.lr) == (first["encoder.d_model"], first["lr"])
