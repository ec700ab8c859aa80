import math

import numpy as np
import pytest
from gradcheck import check_batches, random_batch

from dfbpath.model import (
    ArchSpec,
    FusionMode,
    PatchSet,
    TrainConfig,
    adam_step,
    build_batch,
    build_input,
    cross_entropy,
    forward,
    init_network,
    load_checkpoint,
    logits,
    loss_and_grads,
    save_checkpoint,
    softmax,
    train,
    transfer_init,
)

TINY = ArchSpec(conv_channels=(4, 8), fc_widths=(8,))


def test_mode_aliases():
    assert FusionMode.parse("method1") is FusionMode.DFB_CHANNEL
    assert FusionMode.parse("Method2") is FusionMode.DFB_FEATURE
    assert FusionMode.parse("baseline") is FusionMode.BASELINE
    with pytest.raises(ValueError):
        FusionMode.parse("resnet")


def test_build_input_modes():
    tile = np.full((4, 4, 3), 255, dtype=np.uint8)
    x, aux = build_input("baseline", tile, 70.0, 140.0)
    assert x.shape == (4, 4, 3) and aux is None and x.max() == 1.0
    x, aux = build_input("dfb_cnn", tile, 70.0, 140.0)
    assert x.shape == (4, 4, 4) and aux is None and np.all(x[..., 3] == 0.5)
    x, aux = build_input("dfb_fc", tile, 0.0, 140.0)
    assert x.shape == (4, 4, 3) and aux == 0.0
    with pytest.raises(ValueError):
        build_input("dfb_fc", tile, 1.0, 0.0)


def test_layer_shapes():
    for mode, c_in, fc_in in [("baseline", 3, 64), ("dfb_cnn", 4, 64), ("dfb_fc", 3, 65)]:
        net = init_network(mode)
        assert net.params["conv0.W"].shape[1] == c_in
        assert net.params["fc0.W"].shape == (32, fc_in)
        assert net.params["fc1.W"].shape == (3, 32)
        assert not net.params["conv0.b"].any()


def test_softmax_examples():
    assert np.allclose(softmax(np.array([math.log(2), 0.0, 0.0])), [0.5, 0.25, 0.25])
    net = init_network("baseline", TINY)
    for p in net.params.values():
        p[:] = 0.0
    probs = forward(net, np.random.default_rng(0).random((5, 8, 8, 3)))
    assert np.allclose(probs, 1 / 3)


def test_softmax_is_simplex():
    net = init_network("baseline", TINY, seed=3)
    probs = forward(net, np.random.default_rng(1).random((20, 8, 8, 3)) * 50)
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    big = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(big))


def test_cross_entropy_examples():
    assert cross_entropy([1.0, 0.0, 0.0], 0) == 0.0
    assert cross_entropy([1 / 3] * 3, 2) == pytest.approx(math.log(3))
    assert cross_entropy([0.5, 0.25, 0.25], 1) == pytest.approx(math.log(4))
    assert cross_entropy([1.0, 0.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


def test_shape_contract():
    rgb = np.zeros((2, 8, 8, 3))
    with pytest.raises(ValueError):
        logits(init_network("dfb_cnn", TINY), rgb)
    with pytest.raises(ValueError):
        logits(init_network("baseline", TINY), np.zeros((2, 8, 8, 4)))
    with pytest.raises(ValueError):
        logits(init_network("dfb_fc", TINY), rgb)
    with pytest.raises(ValueError):
        logits(init_network("baseline", TINY), rgb, aux=np.zeros(2))


def test_output_gradient_identity():
    net = init_network("baseline", TINY, seed=0)
    x = np.random.default_rng(0).random((3, 8, 8, 3))
    y = np.array([0, 1, 2])
    _, grads = loss_and_grads(net, x, None, y)
    # last layer bias gradient is mean(probs - onehot)
    probs = forward(net, x)
    probs[np.arange(3), y] -= 1
    assert np.allclose(grads["fc1.b"], probs.mean(axis=0))


def test_zero_input_zero_conv_grads():
    net = init_network("baseline", TINY, seed=0)
    for p in net.params.values():
        p[:] = 0.0
    _, grads = loss_and_grads(net, np.zeros((2, 8, 8, 3)), None, [0, 1])
    for name, g in grads.items():
        if name.startswith("conv") and name.endswith(".W"):
            assert not g.any()


@pytest.mark.parametrize("mode", ["baseline", "dfb_cnn", "dfb_fc"])
def test_gradient_check(mode):
    errors, _ = check_batches(mode, seed=1, n_batches=1)
    assert max(errors) < 1e-4


def test_descent_at_small_lr():
    net = init_network("dfb_fc", TINY, seed=4)
    x, aux, y = random_batch("dfb_fc", np.random.default_rng(5), n=8)
    before, grads = loss_and_grads(net, x, aux, y)
    adam_step(net, grads, lr=1e-5)
    assert loss_and_grads(net, x, aux, y)[0] <= before


def test_adam_first_step():
    net = init_network("baseline", TINY)
    net.params = {"w": np.array([1.0])}
    net.reset_optimizer()
    adam_step(net, {"w": np.array([0.1])}, lr=1e-3)
    assert net.params["w"][0] == pytest.approx(0.999, abs=1e-9)
    assert net.t == 1


def test_adam_zero_gradient():
    net = init_network("baseline", TINY, seed=2)
    before = {k: v.copy() for k, v in net.params.items()}
    adam_step(net, {k: np.zeros_like(v) for k, v in net.params.items()})
    assert net.t == 1
    assert all(np.array_equal(before[k], net.params[k]) for k in before)
    with pytest.raises(ValueError):
        adam_step(net, {"fc0.b": np.zeros(3)})


def test_adam_deterministic():
    def run():
        net = init_network("dfb_cnn", TINY, seed=9)
        x, aux, y = random_batch("dfb_cnn", np.random.default_rng(10))
        for _ in range(3):
            adam_step(net, loss_and_grads(net, x, aux, y)[1])
        return net.params

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("target", ["dfb_cnn", "dfb_fc"])
def test_transfer_preserves_logits(target):
    base = init_network("baseline", TINY, seed=6, dfb_norm=40.0)
    for p in base.params.values():
        p += np.random.default_rng(7).normal(0, 0.05, p.shape)
    net = transfer_init(target, base)
    rng = np.random.default_rng(8)
    tiles = rng.integers(0, 256, (10, 8, 8, 3))
    dfb = rng.random(10) * 40
    xb, _ = build_batch("baseline", tiles, dfb, 40.0)
    xt, aux = build_batch(target, tiles, dfb, 40.0)
    assert np.array_equal(logits(base, xb), logits(net, xt, aux))
    assert net.t == 0 and not any(m.any() for m in net.m.values())


@pytest.mark.parametrize("target,name", [("dfb_cnn", "conv0.W"), ("dfb_fc", "fc0.W")])
def test_transfer_extra_weights_learn(target, name):
    base = init_network("baseline", TINY, seed=6)
    net = transfer_init(target, base)
    extra = (slice(None), 3) if target == "dfb_cnn" else (slice(None), -1)
    assert not net.params[name][extra].any()
    x, aux, y = random_batch(target, np.random.default_rng(11))
    adam_step(net, loss_and_grads(net, x, aux, y)[1])
    assert net.params[name][extra].any()


def test_transfer_errors():
    base = init_network("baseline", TINY)
    with pytest.raises(ValueError):
        transfer_init("baseline", base)
    with pytest.raises(ValueError):
        transfer_init("dfb_fc", init_network("dfb_cnn", TINY))


def _toy_set(n_per_class, seed):
    """Solid red, green and blue tiles: separable by colour alone."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(3):
        tile = np.zeros((n_per_class, 8, 8, 3), dtype=np.uint8)
        tile[..., c] = rng.integers(180, 256, (n_per_class, 1, 1))
        images.append(tile)
        labels += [c] * n_per_class
    images = np.concatenate(images)
    return PatchSet(images, rng.random(len(labels)) * 10, labels)


def test_train_separable_toy():
    cfg = TrainConfig(learning_rate=1e-2, patience=3, max_epochs=40, batch_size=8, seed=0)
    net, log = train("baseline", _toy_set(12, 0), _toy_set(5, 1), cfg, TINY)
    scores = [r["val_mrecall"] for r in log]
    assert max(scores) == 1.0
    first = scores.index(1.0) + 1
    assert len(log) <= first + cfg.patience
    pred = forward(net, _toy_set(5, 2).images / 255.0).argmax(axis=1)
    assert np.array_equal(pred, _toy_set(5, 2).labels)


def test_patience_zero_stops_at_first_miss():
    cfg = TrainConfig(learning_rate=1e-2, patience=0, max_epochs=40, batch_size=8, seed=0)
    _, log = train("baseline", _toy_set(6, 0), _toy_set(3, 1), cfg, TINY)
    flags = [r["best_flag"] for r in log]
    assert flags[-1] == 0 or len(log) == cfg.max_epochs
    assert all(flags[:-1])


def test_train_deterministic_and_returns_best():
    cfg = TrainConfig(learning_rate=1e-2, patience=2, max_epochs=6, batch_size=8, seed=3)
    a_net, a_log = train("dfb_fc", _toy_set(6, 0), _toy_set(3, 1), cfg, TINY)
    b_net, b_log = train("dfb_fc", _toy_set(6, 0), _toy_set(3, 1), cfg, TINY)
    assert a_log == b_log
    assert all(np.array_equal(a_net.params[k], b_net.params[k]) for k in a_net.params)
    val = _toy_set(3, 1)
    from dfbpath.model import evaluate_mrecall

    assert evaluate_mrecall(a_net, val) == max(r["val_mrecall"] for r in a_log)


def test_train_empty_class_rejected():
    s = _toy_set(4, 0)
    keep = s.labels != 2
    with pytest.raises(ValueError):
        train("baseline", PatchSet(s.images[keep], s.dfb[keep], s.labels[keep]), s, TrainConfig(max_epochs=1), TINY)


def test_checkpoint_round_trip(tmp_path):
    net = init_network("dfb_fc", TINY, seed=12, dfb_norm=77.0)
    x, aux, y = random_batch("dfb_fc", np.random.default_rng(13))
    adam_step(net, loss_and_grads(net, x, aux, y)[1])
    save_checkpoint(tmp_path / "m.ckpt", net)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.mode is FusionMode.DFB_FEATURE and back.spec == TINY
    assert back.dfb_norm == 77.0 and back.t == 1
    for k in net.params:
        assert np.array_equal(back.params[k], net.params[k])
        assert np.array_equal(back.m[k], net.m[k])
    assert np.array_equal(logits(back, x, aux), logits(net, x, aux))
    (tmp_path / "bad").write_bytes(b"garbage!" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=-1)
