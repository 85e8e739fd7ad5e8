import csv
import math

import numpy as np
import pytest

from dadjscc.channel import ChannelConfig
from dadjscc.data import ImageDataset, take_subset, to_unit_range
from dadjscc.layers import Parameter
from dadjscc.models import VariantSpec, build_model, end_to_end
from dadjscc.tensor import Tape, Tensor, backward
from dadjscc.training import (AdamState, TrainConfig, adam_step, cross_entropy_loss, fit,
                              mse_loss, train_epoch)

from conftest import synthetic_images
from gradcheck import check_gradients, leaf


def small_dataset(n, seed=0):
    imgs, labels = synthetic_images(n, np.random.default_rng(seed))
    return ImageDataset(to_unit_range(imgs), labels, 10)


def test_mse_examples():
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
    assert mse_loss(Tensor(x), x).item() == 0.0
    assert abs(mse_loss(Tensor(x + 0.1), x).item() - 0.01) < 1e-12
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_mse_gradient():
    rng = np.random.default_rng(1)
    target = rng.standard_normal((3, 4))
    pred = leaf(rng, 3, 4)
    check_gradients(lambda p: mse_loss(p, target), [pred])
    with Tape() as tape:
        loss = mse_loss(pred, target)
    pred.grad = None
    backward(loss, tape)
    np.testing.assert_allclose(pred.grad, 2 * (pred.data - target) / target.size, atol=1e-15)


def test_cross_entropy_examples():
    assert abs(cross_entropy_loss(Tensor(np.zeros((4, 10))), [0, 3, 5, 9]).item()
               - math.log(10)) < 1e-6
    logits = np.zeros((1, 10), np.float64)
    logits[0, 2] = 1000.0
    assert cross_entropy_loss(Tensor(logits), [2]).item() < 1e-12
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((2, 10))), [0, 10])


def test_cross_entropy_vs_softmax_oracle():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 10)) * 3
    labels = rng.integers(0, 10, 6)
    ref = 0.0
    for row, lab in zip(logits, labels):
        p = [math.exp(v) for v in row]
        ref += -math.log(p[lab] / sum(p))
    assert abs(cross_entropy_loss(Tensor(logits), labels).item() - ref / 6) < 1e-12
    check_gradients(lambda z: cross_entropy_loss(z, labels), [leaf(rng, 6, 10)])


def _scalar_param(value, grad):
    p = Parameter(np.array([value], np.float64), name="p")
    p.grad = np.array([grad], np.float64)
    return p


def test_adam_first_step():
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    p = _scalar_param(0.5, 1.0)
    adam_step([p], AdamState([p]), cfg)
    assert abs(p.data[0] - (0.5 - 1e-3 / (1 + 1e-8))) < 1e-15


def test_adam_zero_grad_unchanged():
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    p = _scalar_param(0.5, 0.0)
    st = AdamState([p])
    adam_step([p], st, cfg)
    assert p.data[0] == 0.5 and st.t == 1


def test_adam_three_steps_vs_oracle():
    cfg = TrainConfig(lr=1e-2, weight_decay=1e-3)
    grads = [0.3, -1.2, 0.05]
    p = _scalar_param(0.8, 0.0)
    st = AdamState([p])
    theta, m, v = 0.8, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p.grad = np.array([g])
        adam_step([p], st, cfg)
        theta *= 1 - cfg.lr * cfg.weight_decay
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= cfg.lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data[0] - theta) < 1e-10


def test_decoupled_decay_exact_factor():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    p = _scalar_param(2.0, 0.0)
    st = AdamState([p])
    for step in range(1, 4):
        adam_step([p], st, cfg)
        assert p.data[0] == 2.0 * 0.95 ** step


def test_adam_missing_grad():
    p = Parameter(np.zeros(2), name="w")
    with pytest.raises(ValueError):
        adam_step([p], AdamState([p]), TrainConfig())


def test_zero_lr_invariance():
    ds = small_dataset(40)
    m = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(0))
    before = {n: p.data.copy() for n, p in m.named_parameters().items()}
    cfg = TrainConfig(lr=0.0, weight_decay=0.0, batch_size=40,
                      channel=ChannelConfig.fixed(10.0))
    stats = train_epoch(m, ds, cfg, np.random.default_rng(3))
    for n, p in m.named_parameters().items():
        assert p.data.tobytes() == before[n].tobytes()
    # the one batch holds every image; replay the same rng draws for the initial forward
    rng = np.random.default_rng(3)
    order = rng.permutation(len(ds))
    recon, _ = end_to_end(m, Tensor(ds.images[order]), cfg.channel, rng)
    assert stats.mean_loss == mse_loss(recon, ds.images[order]).item()


def test_epoch_determinism():
    ds = small_dataset(48)
    runs = []
    for _ in range(2):
        m = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(0))
        cfg = TrainConfig(batch_size=16)
        runs.append(train_epoch(m, ds, cfg, np.random.default_rng(1)).batch_losses)
    assert runs[0] == runs[1] and len(runs[0]) == 3


def test_smoke_training_loss_decreases():
    full = small_dataset(400, seed=4)
    ds = take_subset(full, 200, np.random.default_rng(0))
    m = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(0))
    report = fit(m, ds, TrainConfig(epochs=5), np.random.default_rng(0))
    losses = [e.mean_loss for e in report.epochs]
    assert len(losses) == 5
    assert losses[4] < losses[0]


def test_fit_zero_epochs(tmp_path):
    m = build_model(VariantSpec("djscc", 4), np.random.default_rng(0))
    report = fit(m, small_dataset(8), TrainConfig(epochs=0), np.random.default_rng(0), tmp_path)
    assert report.epochs == [] and report.final_loss is None
    assert (tmp_path / "initial.manifest").exists() and not (tmp_path / "best.manifest").exists()
    assert (tmp_path / "train_log.csv").read_text().strip() == "epoch,mean_loss,wall_seconds"


def test_fit_log_rows_and_checkpoints(tmp_path):
    m = build_model(VariantSpec("adjscc", 4), np.random.default_rng(0))
    cfg = TrainConfig(epochs=3, batch_size=8)
    report = fit(m, small_dataset(16), cfg, np.random.default_rng(0), tmp_path)
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[0] == ["epoch", "mean_loss", "wall_seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert [float(r[1]) for r in rows[1:]] == pytest.approx([e.mean_loss for e in report.epochs])
    assert report.best_loss == min(e.mean_loss for e in report.epochs)
    for stem in ("initial", "best", "last", "last_optim"):
        assert (tmp_path / f"{stem}.bin").exists()


def test_fit_resume_matches_uninterrupted(tmp_path):
    ds = small_dataset(24)
    cfg = TrainConfig(epochs=4, batch_size=8)
    m = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(0))
    full = fit(m, ds, cfg, np.random.default_rng(5), tmp_path / "full")

    m2 = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(0))
    fit(m2, ds, TrainConfig(epochs=2, batch_size=8), np.random.default_rng(5), tmp_path / "part")
    m3 = build_model(VariantSpec("da_djscc", 4), np.random.default_rng(99))
    resumed = fit(m3, ds, cfg, np.random.default_rng(123), tmp_path / "part", resume=True)
    assert [e.epoch for e in resumed.epochs] == [3, 4]
    # optimizer state and rng position are restored, so the trajectory continues exactly
    assert [e.mean_loss for e in resumed.epochs] == [e.mean_loss for e in full.epochs[2:]]
    rows = list(csv.reader(open(tmp_path / "part" / "train_log.csv")))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
