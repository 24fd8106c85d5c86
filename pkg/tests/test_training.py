import math

import numpy as np
import pytest

from conftest import tiny_config
from helpers import numeric_grad, rel_error
from physiolite.exceptions import ConfigError
from physiolite.metrics import softmax
from physiolite.model import build_model
from physiolite.signal_io import Band, SyntheticSpec, gen_synthetic
from physiolite.training import (EpochRecord, TrainConfig, adamw_step, bce_with_logits, combined_loss, cross_entropy,
                                 distill, distill_grid, format_history, hard_loss, init_adamw_state, kd_loss,
                                 lr_schedule, parse_history, soft_macro_f1_loss, split_indices, train)


def test_cross_entropy_values():
    loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = cross_entropy(np.array([[50.0, -50.0]]), np.array([0]))
    assert loss < 1e-20


def test_bce_values():
    loss, _ = bce_with_logits(np.array([[0.0]]), np.array([[1]]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, _ = bce_with_logits(np.array([[40.0]]), np.array([[1]]))
    assert loss < 1e-15


def test_soft_f1_values():
    y = np.eye(3)[[0, 1, 2, 1]]
    assert soft_macro_f1_loss(y, y)[0] < 1e-7
    wrong = np.eye(3)[[1, 2, 0, 0]]
    assert soft_macro_f1_loss(wrong, y)[0] > 1 - 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    n, c = 4, 3 + seed % 3
    z = rng.standard_normal((n, c)) * 2
    labels = rng.integers(0, c, n)
    multi = rng.integers(0, 2, (n, c))
    zt = rng.standard_normal((n, c)) * 2
    probs = rng.uniform(0.05, 0.95, (n, c))
    cases = [
        (lambda: cross_entropy(z, labels), z, 1e-5),
        (lambda: bce_with_logits(z, multi), z, 1e-4),
        (lambda: soft_macro_f1_loss(probs, multi), probs, 1e-4),
        (lambda: kd_loss(z, zt, 2.0, "single-label"), z, 1e-4),
        (lambda: kd_loss(z, zt, 1.5, "multi-label"), z, 1e-4),
        (lambda: hard_loss(z, labels, "single-label", "ce+softf1", 0.3), z, 1e-4),
        (lambda: hard_loss(z, multi, "multi-label", "ce+softf1", 0.3), z, 1e-4),
    ]
    for fn, wrt, tol in cases:
        ana = fn()[1]
        num = numeric_grad(lambda: fn()[0], wrt)
        assert rel_error(ana, num) < tol


def test_kd_identical_is_zero(rng):
    z = rng.standard_normal((5, 4))
    assert abs(kd_loss(z, z.copy(), 2.0)[0]) < 1e-12
    assert abs(kd_loss(z, z.copy(), 2.0, "multi-label")[0]) < 1e-12


def test_kd_two_class_reference():
    # scripted: p_t = softmax([0.5, 0]), p_s = softmax([0, 0.5]);
    # KL = sum p_t log(p_t / p_s) = 0.5 * (sigmoid(0.5) - sigmoid(-0.5)) = 0.5 * tanh(0.25); loss = T^2 KL
    expected = 4.0 * 0.5 * math.tanh(0.25)
    loss, _ = kd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 2.0)
    assert abs(loss - expected) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_kd_high_temperature_limit(seed):
    rng = np.random.default_rng(seed)
    c = 5
    zs, zt = rng.standard_normal((1, c)), rng.standard_normal((1, c))
    d = (zs - zs.mean()) - (zt - zt.mean())
    quad = float((d ** 2).sum()) / (2 * c)
    loss, _ = kd_loss(zs, zt, 1e3)
    assert abs(loss - quad) <= 0.01 * quad


def test_combined_loss():
    assert combined_loss(1.7, 0.4, 0.0) == 1.7
    assert combined_loss(1.7, 0.4, 1.0) == 0.4
    cfg = TrainConfig()
    assert (cfg.alpha_kd, cfg.temperature) == (0.3, 2.0)
    assert (cfg.lr_max, cfg.weight_decay, cfg.warmup_epochs, cfg.epochs, cfg.batch_size) == (1e-3, 1e-3, 5, 30, 16)
    with pytest.raises(ConfigError):
        combined_loss(1, 1, 1.5)


def test_lr_schedule():
    cfg = TrainConfig(epochs=25, warmup_epochs=5)
    assert lr_schedule(4, cfg) == cfg.lr_max
    assert lr_schedule(0, cfg) == pytest.approx(cfg.lr_max / 5)
    assert lr_schedule(15, cfg) == pytest.approx(cfg.lr_max / 2)
    last = cfg.lr_max * 0.5 * (1 + math.cos(math.pi * (25 - 1 - 5) / 20))
    assert lr_schedule(24, cfg) == pytest.approx(last)
    assert 0 < last < 0.01 * cfg.lr_max


def test_adamw_decay_only():
    theta = {"w": np.array([2.0, -1.0])}
    state = init_adamw_state(theta)
    adamw_step(theta, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(theta["w"], np.array([2.0, -1.0]) * (1 - 0.1 * 0.01), rtol=0, atol=1e-15)
    theta = {"w": np.array([2.0])}
    adamw_step(theta, {"w": np.zeros(1)}, init_adamw_state(theta), lr=0.1, weight_decay=0.0)
    assert theta["w"][0] == 2.0


def test_adamw_scripted_step():
    lr, wd, eps, theta0 = 1e-3, 1e-2, 1e-8, 0.7
    # first step with g=1: m_hat = v_hat = 1
    expected = theta0 - lr * (1.0 / (1.0 + eps) + wd * theta0)
    theta = {"w": np.array([theta0])}
    adamw_step(theta, {"w": np.array([1.0])}, init_adamw_state(theta), lr, wd, eps=eps)
    assert abs(theta["w"][0] - expected) < 1e-10


def test_split_indices():
    tr, va = split_indices(100, 0)
    assert len(va) == 20 and len(tr) == 80
    assert set(tr) | set(va) == set(range(100)) and not set(tr) & set(va)
    np.testing.assert_array_equal(split_indices(100, 0)[1], va)


def test_history_round_trip():
    hist = [EpochRecord(0, 1.25, 0.5, 0.4, float("nan"), 1e-3), EpochRecord(1, 0.75, 0.6, 0.55, 0.8, 5e-4)]
    back = parse_history(format_history(hist))
    assert back[1] == hist[1]
    assert back[0].loss == 1.25 and math.isnan(back[0].val_auroc)


@pytest.fixture(scope="module")
def two_class():
    spec = SyntheticSpec(n_classes=2, bands=(Band(8.0, 4.0), Band(50.0, 10.0)), window_len=64, n_windows=120, seed=4)
    return gen_synthetic(spec)


def test_training_sanity(two_class):
    cfg = tiny_config(n_classes=2)
    model, history = train(build_model(cfg), two_class, TrainConfig(epochs=10, warmup_epochs=2, seed=0))
    assert len(history) == 10
    assert history[-1].val_acc >= 0.95


def test_training_deterministic(two_class):
    cfg = tiny_config(n_classes=2)
    tc = TrainConfig(epochs=2, warmup_epochs=1, seed=3)
    a, ha = train(build_model(cfg), two_class, tc)
    b, hb = train(build_model(cfg), two_class, tc)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert ha == hb


def test_threaded_training_deterministic(two_class, monkeypatch):
    monkeypatch.delenv("PHYSIOLITE_THREADS", raising=False)
    cfg = tiny_config(n_classes=2)
    tc = TrainConfig(epochs=1, warmup_epochs=0, seed=3, n_threads=3)
    a, _ = train(build_model(cfg), two_class, tc)
    b, _ = train(build_model(cfg), two_class, tc)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    single, _ = train(build_model(cfg), two_class, TrainConfig(epochs=1, warmup_epochs=0, seed=3))
    for name in a.params:
        np.testing.assert_allclose(a.params[name], single.params[name], atol=1e-4)


def test_distill_alpha_zero_is_train(two_class):
    cfg = tiny_config(n_classes=2)
    tc = TrainConfig(epochs=2, warmup_epochs=1, seed=1)
    teacher, _ = train(build_model(tiny_config(n_classes=2, seed=9)), two_class, tc)
    scratch, hs = train(build_model(cfg), two_class, tc)
    student, hd = distill(teacher, cfg, two_class, TrainConfig(epochs=2, warmup_epochs=1, seed=1, alpha_kd=0.0))
    for name in scratch.params:
        np.testing.assert_array_equal(student.params[name], scratch.params[name])
    assert hs == hd


def test_distill_grid_and_errors(two_class):
    cfg = tiny_config(n_classes=2)
    tc = TrainConfig(epochs=1, warmup_epochs=0, seed=1)
    teacher, _ = train(build_model(tiny_config(n_classes=2, use_positional=False)), two_class, tc)
    runs = distill_grid(teacher, cfg, two_class, tc, alphas=(0.3, 0.5, 0.7))
    assert sorted(runs) == [0.3, 0.5, 0.7]
    assert all(len(h) == 1 for _, h in runs.values())
    with pytest.raises(ConfigError):
        distill(teacher, tiny_config(n_classes=3), two_class, tc)


def test_multi_label_training():
    ds = gen_synthetic(SyntheticSpec(multi_label=True, window_len=64, n_windows=40, seed=1))
    cfg = tiny_config(task_kind="multi-label")
    for loss_kind in ("bce", "ce+softf1"):
        model, hist = train(build_model(cfg), ds, TrainConfig(epochs=2, warmup_epochs=1, loss_kind=loss_kind))
        assert len(hist) == 2 and np.isfinite(hist[-1].loss)
    with pytest.raises(ConfigError):
        train(build_model(cfg), ds, TrainConfig(epochs=1, warmup_epochs=0, loss_kind="ce"))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha_kd=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=3, warmup_epochs=4)
    with pytest.raises(ConfigError):
        TrainConfig(loss_kind="hinge")


def test_class_mismatch(two_class):
    with pytest.raises(ConfigError):
        train(build_model(tiny_config(n_classes=3)), two_class, TrainConfig(epochs=1, warmup_epochs=0))
