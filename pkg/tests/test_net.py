import math

import numpy as np
import pytest

from jmap.data import Sample
from jmap.net import (
    CheckpointError,
    ConvBlock,
    Metrics,
    Model,
    ModelConfig,
    Tensor,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    softmax,
    train,
    train_fold,
)
from jmap.net.tensor import batch_norm3d, conv3d, cross_entropy, max_pool3d

MICRO = ModelConfig(in_channels=2, input_shape=(8, 8, 8),
                    conv_blocks=[ConvBlock(3, pool=True), ConvBlock(4, pool=True)], fc=[5, 4], dropout_p=0.3)


def tiny_config(**kw):
    base = dict(input_shape=(8, 8, 8), conv_blocks=[ConvBlock(4, pool=True), ConvBlock(4, pool=True)], fc=[16, 4])
    base.update(kw)
    return ModelConfig(**base)


def tiny_samples(n, seed=0, shape=(1, 8, 8, 8)):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 4
        x = r.normal(size=shape)
        x[:, label * 2 : label * 2 + 2] += 2.0
        out.append(Sample(x, label, f"s{i}"))
    return out


def test_default_shapes_by_hand():
    m = Model(ModelConfig.default())
    # 32 -> pool 16 -> pool 8 -> pool 4, then two shape-preserving blocks: 10 * 4^3 features
    assert [m.shapes[f"block{i}"] for i in range(1, 6)] == [(16,) * 3, (8,) * 3, (4,) * 3, (4,) * 3, (4,) * 3]
    assert m.params["fc1.weight"].shape == (360, 640)
    assert m.params["fc2.weight"].shape == (4, 360)
    x = np.random.default_rng(0).normal(size=(2, 1, 32, 32, 32))
    logits, cache = m.forward(x)
    assert logits.shape == (2, 4) and np.all(np.isfinite(logits.data))
    assert cache["block1"].shape == (2, 10, 32, 32, 32)
    assert cache["block5"].shape == (2, 10, 4, 4, 4)


def test_multimodal_adds_two_blocks():
    cfg = ModelConfig.default(in_channels=2)
    assert len(cfg.conv_blocks) == 7
    assert Model(cfg).forward(np.zeros((1, 2, 32, 32, 32)))[0].shape == (1, 4)


def test_zero_input_zero_logits():
    m = Model(ModelConfig.default(), seed=5)
    logits, _ = m.forward(np.zeros((1, 1, 32, 32, 32)))
    assert np.array_equal(logits.data, np.zeros((1, 4)))


def test_duplicate_rows_identical():
    m = Model(tiny_config(), seed=1)
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8, 8))
    logits, _ = m.forward(np.concatenate([x, x]))
    assert np.array_equal(logits.data[0], logits.data[1])


def test_uniform_logits_loss_is_ln4():
    m = Model(tiny_config(), seed=2)
    m.params["fc2.weight"].data[:] = 0
    loss, grads = m.loss_and_backward(np.random.default_rng(0).normal(size=(3, 1, 8, 8, 8)), [0, 1, 2],
                                      rng=np.random.default_rng(0))
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert set(grads) == set(m.params)
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads.values())


def test_saturated_loss():
    logits = Tensor(np.array([[50.0, 0, 0, 0], [0, 0, 0, 40.0]]))
    assert float(cross_entropy(logits, [0, 3]).data) <= 1e-3


def test_label_out_of_range():
    m = Model(tiny_config())
    with pytest.raises(ValueError, match="labels"):
        m.loss_and_backward(np.zeros((1, 1, 8, 8, 8)), [4], rng=np.random.default_rng(0))


def test_softmax(rng):
    z = rng.normal(scale=30, size=(20, 4))
    p = softmax(z)
    assert np.all(p > 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12


def test_shape_error_names_layer():
    with pytest.raises(ValueError, match="input"):
        Model(tiny_config()).forward(np.zeros((1, 1, 8, 8, 9)))
    with pytest.raises(ValueError, match="block4"):
        Model(ModelConfig(input_shape=(8, 8, 8), conv_blocks=[ConvBlock(pool=True)] * 4))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(conv_blocks=[])
    with pytest.raises(ValueError, match="num_classes"):
        ModelConfig(fc=[360, 3])
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_gradient_check_micro_net():
    m = Model(MICRO, seed=3)
    x = np.random.default_rng(2).normal(size=(2, 2, 8, 8, 8))
    y = np.array([1, 3])

    def loss(xx):
        logits, _ = m.forward(Tensor(xx), training=True, rng=np.random.default_rng(5))
        return float(cross_entropy(logits, y).data)

    m.zero_grad()
    xt = Tensor(x, requires_grad=True)
    logits, _ = m.forward(xt, training=True, rng=np.random.default_rng(5))
    cross_entropy(logits, y).backward()
    # the running buffers drift with every training-mode pass but do not
    # enter the training-mode output, so finite differences stay valid
    h = 1e-5
    worst = 0.0
    for name, p in m.params.items():
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            lp = loss(x)
            p.data[idx] = orig - h
            lm = loss(x)
            p.data[idx] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - p.grad[idx]) / max(abs(fd), abs(p.grad[idx]), 1e-6))
    assert worst <= 1e-4
    r = np.random.default_rng(7)
    for _ in range(40):
        idx = tuple(int(r.integers(n)) for n in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (loss(xp) - loss(xm)) / (2 * h)
        assert abs(fd - xt.grad[idx]) / max(abs(fd), abs(xt.grad[idx]), 1e-6) <= 1e-4


def test_conv_shape_preserving_and_linear(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 6, 7)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3, 3)))
    out = conv3d(x, w)
    assert out.shape == (2, 4, 5, 6, 7)
    # a centred delta kernel copies the input channel
    delta = np.zeros((1, 3, 3, 3, 3))
    delta[0, 1, 1, 1, 1] = 1
    assert np.allclose(conv3d(x, Tensor(delta)).data[:, 0], x.data[:, 1])


def test_batch_norm_eval_is_affine(rng):
    c = 3
    gamma, beta = Tensor(rng.normal(size=c)), Tensor(rng.normal(size=c))
    mean, var = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
    x1, x2 = rng.normal(size=(2, c, 2, 3, 4)), rng.normal(size=(2, c, 2, 3, 4))

    def f(x):
        return batch_norm3d(Tensor(x), gamma, beta, mean.copy(), var.copy(), training=False).data

    a = 0.3
    assert np.allclose(f(a * x1 + (1 - a) * x2), a * f(x1) + (1 - a) * f(x2), atol=1e-12)


def test_batch_norm_training_statistics(rng):
    x = Tensor(rng.normal(3, 2, size=(4, 2, 3, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    out = batch_norm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)
    assert np.all(rm != 0)


@pytest.mark.parametrize("n, expected", [(8, 4), (9, 4), (5, 2)])
def test_pooling_floor(n, expected):
    out = max_pool3d(Tensor(np.arange(n**3, dtype=float).reshape(1, 1, n, n, n)))
    assert out.shape == (1, 1, expected, expected, expected)


def test_pooling_picks_max_and_routes_gradient():
    x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2), requires_grad=True)
    out = max_pool3d(x)
    assert out.data.item() == 7
    out.backward()
    assert x.grad.ravel().tolist() == [0] * 7 + [1]


def test_early_stopping_with_frozen_weights():
    cfg = TrainConfig(batch_size=4, learning_rate=0.0, max_epochs=20, patience=1)
    data = tiny_samples(8)
    # without batch norm nothing moves at lr 0 (running statistics would)
    blocks = [ConvBlock(4, batch_norm=False, pool=True), ConvBlock(4, batch_norm=False, pool=True)]
    res = train_fold(Model(tiny_config(conv_blocks=blocks), seed=0), data, data[:4], cfg)
    assert res.curve[0]["val_loss"] == res.curve[1]["val_loss"]
    assert res.stopped_epoch == 2
    assert res.best_epoch == 1
    assert [r["epoch"] for r in res.curve] == [1, 2]


def test_training_deterministic():
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_epochs=3, patience=5, seed=4)
    data = tiny_samples(8)
    a = train(tiny_config(), [(data, data[:4])], cfg)[0]
    b = train(tiny_config(), [(data, data[:4])], cfg)[0]
    assert a.curve == b.curve
    assert all(np.array_equal(a.model.state()[k], b.model.state()[k]) for k in a.model.state())


def test_training_reduces_loss():
    cfg = TrainConfig(batch_size=4, learning_rate=3e-3, max_epochs=15, patience=15)
    res = train_fold(Model(tiny_config(dropout_p=0.0), seed=0), tiny_samples(8), [], cfg)
    assert res.curve[-1]["train_loss"] < res.curve[0]["train_loss"]


def test_train_writes_checkpoints_and_curves(tmp_path):
    cfg = TrainConfig(batch_size=4, max_epochs=2)
    data = tiny_samples(8)
    results = train(tiny_config(), [(data[:4], data[4:]), (data[4:], data[:4])], cfg, tmp_path)
    assert (tmp_path / "fold0.ckpt").is_file() and (tmp_path / "fold1.ckpt").is_file()
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,fold,train_acc,val_acc,train_loss,val_loss"
    assert len(lines) == 1 + sum(len(r.curve) for r in results)
    with pytest.raises(ValueError):
        train(tiny_config(), [], cfg)
    with pytest.raises(ValueError, match="empty"):
        train(tiny_config(), [([], data)], cfg)


def test_metrics_perfect():
    labels = [0, 1, 2, 3, 0, 1, 2, 3]
    m = Metrics.from_predictions(labels, labels)
    assert np.array_equal(m.confusion, 2 * np.eye(4, dtype=int))
    assert m.per_class_accuracy.tolist() == [1.0] * 4
    assert m.accuracy == 1.0


def test_metrics_hand_counted():
    cm = np.zeros((4, 4), dtype=int)
    cm[:2, :2] = [[2, 1], [0, 3]]
    m = Metrics(cm)
    assert m.precision[0] == 1.0
    assert m.recall[0] == pytest.approx(2 / 3)
    assert m.precision[1] == pytest.approx(3 / 4)
    assert m.recall[1] == 1.0
    assert m.recall[2] == 0.0 and m.precision[3] == 0.0
    assert "recall[2]" in m.undefined and "precision[3]" in m.undefined
    assert m.confusion.sum(axis=1).tolist() == [3, 3, 0, 0]
    assert m.per_class_accuracy[0] == pytest.approx(5 / 6)


def test_checkpoint_round_trip(tmp_path):
    model = Model(tiny_config(), seed=9)
    data = tiny_samples(8)
    train_fold(model, data, data[:4], TrainConfig(batch_size=4, max_epochs=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"fold": 0})
    assert path.read_bytes()[:7] == b"JMNET1\0"
    loaded, extra = load_checkpoint(path)
    assert extra == {"fold": 0}
    assert loaded.config == model.config
    for k, v in model.state().items():
        assert v.tobytes() == loaded.state()[k].tobytes()
    a, b = evaluate(model, data), evaluate(path, data)
    assert np.array_equal(a.confusion, b.confusion)
    assert a.to_dict() == b.to_dict()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Model(tiny_config()), path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXX\0" + raw[7:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_evaluate_rejects_mismatched_samples(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Model(tiny_config()), path)
    with pytest.raises(ValueError, match="do not fit"):
        evaluate(path, tiny_samples(2, shape=(1, 8, 8, 4)))
