"""Loss, optimizers, training loop, evaluation, and checkpoint format."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from lgcnn.data import ImageDataset
from lgcnn.model import parse_model_spec
from lgcnn.network import build
from lgcnn.presets import load_preset, scaled_text
from lgcnn.tensor import Tensor
from lgcnn.train import (TrainConfig, TrainingDiverged, cross_entropy_loss,
                         evaluate, load_checkpoint, make_optimizer,
                         restore_checkpoint, save_checkpoint, train)

TOY_SPEC = """
model toy
input (1, 4, 6)
Flatten
FC(24, 2)
Softmax
"""


def toy_dataset(n_per_class=40, seed=0, split="train"):
    """Two classes separated by the sign of the image mean."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, shift in ((0, -1.0), (1, 1.0)):
        imgs = rng.normal(shift, 0.5, size=(n_per_class, 1, 4, 6))
        xs.append(imgs)
        ys.extend([label] * n_per_class)
    images = Tensor(np.concatenate(xs).astype(np.float32))
    return ImageDataset(images=images, labels=np.array(ys), class_ids=(0, 1),
                        split=split)


class FixedPredictor:
    """Stands in for a network when only predict() matters."""

    def __init__(self, preds):
        self.preds = np.asarray(preds)
        self.cursor = 0

    def predict(self, x):
        n = x.shape[0]
        out = self.preds[self.cursor:self.cursor + n]
        self.cursor += n
        return out


# ---- loss ------------------------------------------------------------------


def test_loss_zero_for_perfect_onehot():
    probs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
    loss, grad = cross_entropy_loss(probs, [0, 1])
    assert loss == 0.0
    # gradient (probs - onehot) / batch is exactly zero here
    npt.assert_array_equal(grad.data, np.zeros((2, 2), dtype=np.float32))


def test_loss_uniform_probs_is_log_class_count():
    for classes in (4, 20):
        probs = Tensor(np.full((3, classes), 1.0 / classes))
        loss, _ = cross_entropy_loss(probs, [0, 1, 2])
        assert loss == pytest.approx(math.log(classes), rel=1e-12)


def test_loss_value_matches_per_sample_mean():
    probs = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]))
    loss, _ = cross_entropy_loss(probs, [0, 2])
    expect = -(math.log(0.7) + math.log(0.8)) / 2
    assert loss == pytest.approx(expect, rel=1e-6)


def test_loss_gradient_matches_finite_differences_through_softmax():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 2, 4])

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    _, grad = cross_entropy_loss(Tensor(softmax(logits)), labels)
    h = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        zp = logits.copy(); zp[idx] += h
        zm = logits.copy(); zm[idx] -= h
        lp, _ = cross_entropy_loss(Tensor(softmax(zp)), labels)
        lm, _ = cross_entropy_loss(Tensor(softmax(zm)), labels)
        fd[idx] = (lp - lm) / (2 * h)
    npt.assert_allclose(grad.data, fd, rtol=1e-4, atol=1e-9)


def test_loss_rejects_unnormalized_rows():
    with pytest.raises(ValueError, match="sum to 1"):
        cross_entropy_loss(Tensor(np.array([[0.5, 0.4]])), [0])


def test_loss_rejects_out_of_range_labels():
    probs = Tensor(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError, match="labels"):
        cross_entropy_loss(probs, [2])
    with pytest.raises(ValueError, match="labels"):
        cross_entropy_loss(probs, [-1])


def test_loss_rejects_wrong_label_count():
    with pytest.raises(ValueError, match="expected 1 labels"):
        cross_entropy_loss(Tensor(np.array([[0.5, 0.5]])), [0, 1])


# ---- optimizers --------------------------------------------------------------


def test_sgd_step_matches_hand_update_exactly():
    p = Tensor(np.array([2.0], dtype=np.float32))
    g = Tensor(np.array([0.5], dtype=np.float32))
    opt = make_optimizer([p], TrainConfig(optimizer="sgd", learning_rate=0.1))
    opt.step([g])
    expect = np.float32(2.0) - np.float32(0.1) * np.float32(0.5)
    assert p.data[0] == expect


def test_sgd_momentum_two_steps_match_hand_recurrence():
    p = Tensor(np.array([1.0], dtype=np.float32))
    cfg = TrainConfig(optimizer="sgd_momentum", learning_rate=0.1, momentum=0.9)
    opt = make_optimizer([p], cfg)
    opt.step([Tensor(np.array([1.0], dtype=np.float32))])
    opt.step([Tensor(np.array([2.0], dtype=np.float32))])
    # v1 = 1, w = 1 - .1; v2 = .9 + 2, w -= .1 * v2
    v1 = 1.0
    w = np.float32(1.0) - np.float32(0.1) * np.float32(v1)
    v2 = np.float32(0.9) * np.float32(v1) + np.float32(2.0)
    w = w - np.float32(0.1) * v2
    assert p.data[0] == pytest.approx(float(w), rel=1e-7)


def test_adam_first_step_is_lr_times_unit_gradient():
    p = Tensor(np.array([0.0], dtype=np.float32))
    cfg = TrainConfig(optimizer="adam", learning_rate=0.01)
    opt = make_optimizer([p], cfg)
    opt.step([Tensor(np.array([0.5], dtype=np.float32))])
    # bias-corrected m/sqrt(v) is g/|g| = 1 on step one
    assert p.data[0] == pytest.approx(-0.01, rel=1e-5)


def test_zero_learning_rate_changes_nothing():
    spec = parse_model_spec(TOY_SPEC)
    net = build(spec, seed=4)
    before = [p.data.copy() for p in net.params()]
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.0,
                      optimizer="sgd", seed=1)
    train(net, toy_dataset(), cfg)
    for b, p in zip(before, net.params()):
        npt.assert_array_equal(b, p.data)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adagrad")
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


# ---- training loop -------------------------------------------------------------


def test_training_learns_separable_classes():
    spec = parse_model_spec(TOY_SPEC)
    net = build(spec, seed=0)
    ds = toy_dataset()
    cfg = TrainConfig(epochs=50, batch_size=16, learning_rate=0.1,
                      optimizer="sgd", seed=0)
    report = train(net, ds, cfg)
    assert len(report.epoch_loss) == 50
    assert report.epoch_accuracy[-1] >= 0.99
    assert report.epoch_loss[1] <= report.epoch_loss[0]
    assert report.final_loss == report.epoch_loss[-1]


def test_training_is_deterministic_for_fixed_seed():
    ds = toy_dataset()
    cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=0.05,
                      optimizer="adam", seed=9)
    runs = []
    for _ in range(2):
        net = build(parse_model_spec(TOY_SPEC), seed=2)
        report = train(net, ds, cfg)
        runs.append((report.epoch_loss, [p.data.copy() for p in net.params()]))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        npt.assert_array_equal(a, b)


def test_shuffle_seed_changes_trajectory():
    ds = toy_dataset()
    losses = []
    for seed in (0, 1):
        net = build(parse_model_spec(TOY_SPEC), seed=2)
        cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.05,
                          optimizer="sgd", seed=seed)
        losses.append(train(net, ds, cfg).epoch_loss[0])
    assert losses[0] != losses[1]


def test_zero_epochs_trains_nothing():
    net = build(parse_model_spec(TOY_SPEC), seed=0)
    report = train(net, toy_dataset(), TrainConfig(epochs=0))
    assert report.epoch_loss == []
    assert report.final_loss is None


def test_empty_dataset_is_rejected():
    class Empty:
        labels = np.array([], dtype=np.int64)
        images = None

    with pytest.raises(ValueError, match="empty"):
        train(build(parse_model_spec(TOY_SPEC), seed=0), Empty(), TrainConfig(epochs=1))


def test_divergence_raises_structured_error():
    net = build(parse_model_spec(TOY_SPEC), seed=0)
    for p in net.params():
        # near float32 max: the first matmul overflows to inf and the
        # max-shifted softmax turns inf - inf into nan probabilities
        p.data[...] = 3e38
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=0.1, optimizer="sgd")
    with pytest.raises(TrainingDiverged) as err:
        with np.errstate(all="ignore"):
            train(net, toy_dataset(), cfg)
    assert err.value.epoch == 0
    assert err.value.last_checkpoint is None


def test_divergence_leaves_earlier_checkpoints_in_place(tmp_path):
    ds = toy_dataset()
    net = build(parse_model_spec(TOY_SPEC), seed=0)
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=0.05,
                      optimizer="sgd", seed=0, checkpoint_every=1)
    train(net, ds, cfg, checkpoint_dir=tmp_path)
    kept = sorted(p.name for p in tmp_path.glob("*.lgck"))
    assert kept == ["epoch-0001.lgck", "epoch-0002.lgck", "final.lgck"]
    for p in net.params():
        p.data[...] = 3e38
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(net, ds, cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.lgck")) == kept


# ---- evaluation -----------------------------------------------------------------


def test_evaluate_confusion_and_fdr_reconcile():
    images = Tensor(np.zeros((5, 1, 4, 6), dtype=np.float32))
    ds = ImageDataset(images=images, labels=np.array([0, 0, 1, 1, 2]),
                      class_ids=(7, 8, 9), split="test")
    net = FixedPredictor([0, 1, 1, 1, 0])
    report = evaluate(net, ds, batch_size=2)
    npt.assert_array_equal(report.confusion,
                           [[1, 1, 0], [0, 2, 0], [1, 0, 0]])
    assert report.per_class_fdr == {7: 0.5, 8: 1.0, 9: 0.0}
    assert report.mean_fdr == pytest.approx(0.5)
    assert report.sample_count == 5
    assert report.class_ids == (7, 8, 9)


def test_evaluate_skips_absent_classes_in_the_mean():
    images = Tensor(np.zeros((2, 1, 4, 6), dtype=np.float32))
    ds = ImageDataset(images=images, labels=np.array([0, 0]),
                      class_ids=(1, 2), split="test")
    report = evaluate(FixedPredictor([0, 0]), ds)
    assert report.per_class_fdr == {1: 1.0}
    assert report.mean_fdr == 1.0


def test_evaluate_real_network_rows_sum_to_counts():
    net = build(parse_model_spec(TOY_SPEC), seed=0)
    ds = toy_dataset(n_per_class=7, split="test")
    report = evaluate(net, ds, batch_size=4)
    assert report.confusion.sum() == len(ds)
    npt.assert_array_equal(report.confusion.sum(axis=1), [7, 7])


# ---- checkpoints -----------------------------------------------------------------


def trained_scaled_net(seed=3):
    spec = parse_model_spec(scaled_text("lgcnn-1", divisor=8, classes=2,
                                        height=4, width=6))
    net = build(spec, seed=seed)
    cfg = TrainConfig(epochs=1, batch_size=16, learning_rate=0.01,
                      optimizer="adam", seed=seed)
    train(net, toy_dataset(), cfg)
    return net


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = trained_scaled_net()
    path = tmp_path / "model.lgck"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.spec.spec_hash() == net.spec.spec_hash()
    a, b = net.state_tensors(), loaded.state_tensors()
    assert len(a) == len(b)
    for x, y in zip(a, b):
        npt.assert_array_equal(x.data, y.data)  # includes BN running stats


def test_checkpoint_scalar_count_matches_audit():
    from lgcnn.model import audit_parameters
    spec = load_preset("lgcnn-1")
    net = build(spec, seed=0)
    n_params = sum(p.size for p in net.params())
    assert n_params == audit_parameters(spec).total == 321668
    # state adds two running-stat vectors per batch-norm layer
    n_state = sum(t.size for t in net.state_tensors())
    assert n_state == 321668 + 2 * 16 + 2 * 16


def test_truncated_checkpoint_errors_and_leaves_model_alone(tmp_path):
    net = trained_scaled_net()
    path = tmp_path / "model.lgck"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    other = build(net.spec, seed=99)
    before = [t.data.copy() for t in other.state_tensors()]
    for cut in (2, 6, 40, len(blob) // 2, len(blob) - 3):
        short = tmp_path / "short.lgck"
        short.write_bytes(blob[:cut])
        with pytest.raises(ValueError, match="truncated"):
            restore_checkpoint(other, short)
        for t, b in zip(other.state_tensors(), before):
            npt.assert_array_equal(t.data, b)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.lgck"
    path.write_bytes(b"NOPE" + b"\x00" * 100)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    net = trained_scaled_net()
    path = tmp_path / "model.lgck"
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_spec_hash_mismatch_rejected(tmp_path):
    net = trained_scaled_net()
    path = tmp_path / "model.lgck"
    save_checkpoint(net, path)
    other_spec = parse_model_spec(TOY_SPEC)
    other = build(other_spec, seed=0)
    before = [t.data.copy() for t in other.state_tensors()]
    with pytest.raises(ValueError, match="was built for model"):
        restore_checkpoint(other, path)
    for t, b in zip(other.state_tensors(), before):
        npt.assert_array_equal(t.data, b)


def test_save_is_deterministic(tmp_path):
    net = trained_scaled_net()
    p1, p2 = tmp_path / "a.lgck", tmp_path / "b.lgck"
    save_checkpoint(net, p1)
    save_checkpoint(net, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_checkpoint_predicts_identically(tmp_path):
    net = trained_scaled_net()
    path = tmp_path / "model.lgck"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    x = toy_dataset(n_per_class=5, seed=8).images
    npt.assert_array_equal(net.forward(x).data, loaded.forward(x).data)
