import hashlib
import json

import numpy as np
import pytest

from breaknet import ops
from breaknet.model import BreakNet, ModelConfig, load_checkpoint
from breaknet.synth import SynthSpec, generate_dataset
from breaknet.tensor import Tensor, backward
from breaknet.training import (NonFiniteLossError, TrainConfig, TrainLog, adam_init, adam_step, batch_seed,
                               deep_supervision_loss, dice_loss, lr_at, one_hot, train)

TINY = dict(encoder_channels=(4, 4, 8, 8), stem_channels=4, decoder_width=4, dropout=0.0)


def direct_dice_loss(p, g, eps=1e-6):
    terms = []
    for c in range(p.shape[1]):
        gs = g[:, c].sum()
        if gs == 0:
            continue
        inter = sum(float(a) * float(b) for a, b in zip(p[:, c].ravel(), g[:, c].ravel()))
        terms.append((2 * inter + eps) / (p[:, c].sum() + gs + eps))
    return 1 - sum(terms) / len(terms)


def rand_probs(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- config ---------------------------------------------------------------------

def test_default_config():
    c = TrainConfig()
    assert (c.lr0, c.decay_factor, c.decay_every, c.batch_size, c.max_epochs) == (1e-2, 0.8, 5, 8, 60)
    assert (c.beta1, c.beta2, c.adam_eps) == (0.9, 0.999, 1e-8)
    assert c.aux_loss_weights == (0.25,) * 4


@pytest.mark.parametrize("kw", [dict(lr0=0), dict(decay_factor=0), dict(decay_factor=1.2),
                                dict(aux_loss_weights=(0.5, 0.5, 0.5, 0.5)), dict(aux_loss_weights=(1.0,)),
                                dict(augment=("rotate",)), dict(batch_size=0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    c = TrainConfig(lr0=3e-3, augment=("hflip",), seed=4)
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))).to_dict() == c.to_dict()


# -- losses ---------------------------------------------------------------------

def test_one_hot():
    oh = one_hot(np.array([[[0, 2], [1, 2]]]), 3)
    assert oh.shape == (1, 3, 2, 2)
    assert oh[0, :, 0, 1].tolist() == [0, 0, 1]
    np.testing.assert_array_equal(oh.sum(axis=1), 1)


def test_perfect_prediction_loss():
    lab = np.random.default_rng(0).integers(0, 4, (2, 5, 5))
    oh = one_hot(lab, 4, np.float64)
    assert float(dice_loss(Tensor(oh, dtype=np.float64), oh).data) <= 1e-5


def test_complementary_prediction_loss():
    lab = np.random.default_rng(0).integers(0, 2, (2, 6, 6))
    oh = one_hot(lab, 2, np.float64)
    assert float(dice_loss(Tensor(oh[:, ::-1].copy(), dtype=np.float64), oh).data) >= 1 - 1e-5


def test_uniform_half_balanced_is_exactly_half():
    lab = np.zeros((1, 4, 4), int)
    lab[:, :, 2:] = 1
    oh = one_hot(lab, 2, np.float64)
    p = np.full_like(oh, 0.5)
    got = float(dice_loss(Tensor(p, dtype=np.float64), oh).data)
    assert got == pytest.approx(direct_dice_loss(p, oh), abs=1e-15)
    assert got == pytest.approx(0.5, abs=1e-7)


def test_dice_loss_direct_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        c = int(rng.integers(2, 6))
        lab = rng.integers(0, c - 1, (2, 4, 3))      # last class absent -> excluded
        p = rand_probs(rng, (2, c, 4, 3))
        oh = one_hot(lab, c, np.float64)
        got = float(dice_loss(Tensor(p, dtype=np.float64), oh).data)
        assert got == pytest.approx(direct_dice_loss(p, oh), rel=1e-12)
        assert 0 <= got <= 1 + 1e-6


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3, 3)))


def test_deep_supervision_examples():
    rng = np.random.default_rng(2)
    lab = rng.integers(0, 3, (2, 4, 4))
    oh = one_hot(lab, 3, np.float64)
    perfect = [Tensor(oh, dtype=np.float64) for _ in range(4)]
    assert float(deep_supervision_loss(perfect[0], perfect[1:], oh).data) <= 1e-5
    outs = [Tensor(rand_probs(rng, oh.shape), dtype=np.float64) for _ in range(4)]
    alone = float(dice_loss(outs[0], oh).data)
    assert float(deep_supervision_loss(outs[0], outs[1:], oh, (1, 0, 0, 0)).data) == pytest.approx(alone, abs=1e-15)
    four = [float(dice_loss(o, oh).data) for o in outs]
    assert float(deep_supervision_loss(outs[0], outs[1:], oh).data) == pytest.approx(np.mean(four), rel=1e-12)


def test_deep_supervision_weight_count():
    t = Tensor(np.ones((1, 2, 2, 2)) / 2)
    with pytest.raises(ValueError):
        deep_supervision_loss(t, [t, t], one_hot(np.zeros((1, 2, 2), int), 2))


# -- optimisation ---------------------------------------------------------------

@pytest.mark.parametrize("epoch,lr", [(0, 1e-2), (4, 1e-2), (5, 8e-3), (9, 8e-3), (10, 6.4e-3), (15, 5.12e-3)])
def test_lr_schedule(epoch, lr):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_non_increasing():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_adam_zero_gradient_no_change():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = adam_init([p])
    adam_step([p], [np.zeros(2)], st, 0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sign():
    g = np.array([3.0, -0.02, 1e-3], dtype=np.float64)
    p = Tensor(np.zeros(3), dtype=np.float64, requires_grad=True)
    adam_step([p], [g], adam_init([p]), 0.05)
    np.testing.assert_allclose(p.data, -0.05 * np.sign(g), rtol=1e-4)
    assert np.all(np.abs(p.data) <= 0.05)


def test_adam_scalar_quadratic_converges():
    x = Tensor(np.array([1.0]), dtype=np.float64, requires_grad=True)
    st = adam_init([x])
    for _ in range(100):
        x.grad = None
        loss = ops.sum(ops.mul(x, x))
        backward(loss)
        adam_step([x], [x.grad], st, 0.1)
    assert abs(x.data[0]) < 0.1


def test_adam_shape_check():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], adam_init([p]), 0.1)


def test_train_log_consecutive():
    tl = TrainLog()
    tl.append({"epoch": 0, "wall_time": 1.0})
    with pytest.raises(ValueError):
        tl.append({"epoch": 2})
    assert tl.without_timing() == [{"epoch": 0}]


# -- training loop --------------------------------------------------------------

def small_data(n, seed, size=32, regimes=("none",)):
    spec = SynthSpec(height=size, width=size, top=4.0, layer_thickness=(3, 3, 3, 3, 3, 3, 3),
                     shape_amplitude=1.0, thickness_amplitude=0.5, harmonics=2, noise_std=0.03)
    return generate_dataset(spec, n, regimes, seed=seed)


def checksum(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()


def test_one_epoch_one_step(tmp_path):
    data = small_data(8, 0)
    res = train(BreakNet(ModelConfig(**TINY), seed=0), data, data[:2], TrainConfig(max_epochs=1), tmp_path)
    assert res.log.epochs[0]["steps"] == 1
    assert [json.loads(l)["epoch"] for l in (tmp_path / "log.jsonl").read_text().splitlines()] == [0]
    best = json.loads((tmp_path / "best.json").read_text())
    assert best["checkpoint"] == "best_model.json" and best["epoch"] == 0
    load_checkpoint(tmp_path / best["checkpoint"])


def test_same_seed_same_log():
    data = small_data(12, 1)
    cfg = TrainConfig(max_epochs=2, batch_size=4, seed=3)
    a = train(BreakNet(ModelConfig(**{**TINY, "dropout": 0.1}), seed=0), data, data[:4], cfg)
    b = train(BreakNet(ModelConfig(**{**TINY, "dropout": 0.1}), seed=0), data, data[:4], cfg)
    assert a.log.without_timing() == b.log.without_timing()
    for x, y in zip(a.model.parameters(), b.model.parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_validation_set_untouched():
    data = small_data(8, 2)
    val = small_data(4, 3)
    before = checksum(val)
    train(BreakNet(ModelConfig(**TINY), seed=0), data, val, TrainConfig(max_epochs=1, batch_size=4))
    assert checksum(val) == before


def test_best_model_restored():
    data = small_data(8, 4)
    res = train(BreakNet(ModelConfig(**TINY), seed=0), data, data[:4], TrainConfig(max_epochs=3, batch_size=4))
    dices = [e["val_dice"] for e in res.log.epochs]
    assert res.best_epoch == int(np.argmax(dices)) and res.best_dice == max(dices)


def test_non_finite_loss_names_batch_seed():
    data = small_data(8, 5)
    model = BreakNet(ModelConfig(**TINY), seed=0)
    model.stem.conv1.weight.data[...] = np.nan
    cfg = TrainConfig(max_epochs=1, seed=9)
    with pytest.raises(NonFiniteLossError, match=str(batch_seed(9, 0, 0))):
        train(model, data, data[:2], cfg)


def test_empty_sets_rejected():
    data = small_data(2, 6)
    model = BreakNet(ModelConfig(**TINY))
    with pytest.raises(ValueError):
        train(model, [], data, TrainConfig(max_epochs=1))
    with pytest.raises(ValueError):
        train(model, data, [], TrainConfig(max_epochs=1))


@pytest.mark.slow
def test_easy_synthetic_convergence():
    # 16 Adam steps per epoch; with 4 steps per epoch 30 epochs are too few updates
    train_set, val_set = small_data(64, 10), small_data(8, 11)
    cfg = TrainConfig(max_epochs=30, batch_size=4, seed=0)
    model_cfg = ModelConfig(encoder_channels=(8, 8, 16, 16), stem_channels=8, decoder_width=8, dropout=0.0)
    res = train(BreakNet(model_cfg, seed=0), train_set, val_set, cfg)
    assert res.best_dice >= 0.95
