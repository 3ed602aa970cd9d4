import numpy as np
import pytest

from mvcells.semdeconv import (TargetSpec, TrainConfig, forward, init_net, load_net, loss,
                               loss_and_gradient, loss_gradient, make_target, mask_views,
                               predict_volume, save_net, sd_pipelines, train)
from mvcells.volume import MarkerList, Volume


def test_target_blob_shape():
    t = make_target(MarkerList([[5.2, 5.0, 4.8]]), (11, 11, 11), TargetSpec(3.0))
    d = t.data
    assert d[5, 5, 5] == 1.0
    # radius 2 sigma / 3 = 2: the 33-voxel digital ball
    assert (d > 0).sum() == 33
    assert d[7, 5, 5] == pytest.approx(np.exp(-4 / 18))
    assert d[7, 1, 5] == 0


def test_target_overlap_takes_max_and_bounds():
    t = make_target(MarkerList([[3, 3, 3], [4, 3, 3]]), (8, 8, 8))
    assert t.data.max() == 1.0 and t.data[3, 3, 3] == 1.0 and t.data[4, 3, 3] == 1.0
    with pytest.raises(ValueError):
        make_target(MarkerList([[9, 0, 0]]), (8, 8, 8))
    edge = make_target(MarkerList([[0, 0, 0]]), (8, 8, 8))
    assert edge.data[0, 0, 0] == 1.0


def numeric_grad(net, x, y, k, idx, eps=1e-6):
    w = net.weights[k]
    old = w[idx]
    w[idx] = old + eps
    ep, _, _ = loss_and_gradient(net, x, y)
    w[idx] = old - eps
    em, _, _ = loss_and_gradient(net, x, y)
    w[idx] = old
    return (ep - em) / (2 * eps)


@pytest.mark.parametrize("arch,arity", [("flat", 1), ("flat", 2), ("columnar", 2)])
def test_gradient_matches_finite_differences(arch, arity):
    rng = np.random.default_rng(0)
    net = init_net(arch, 1, arity, layer_sizes=[6, 5], seed=1)
    x = rng.random((4, arity * 27))
    y = (rng.random((4, 27)) > 0.7).astype(float)
    _, gw, gb = loss_and_gradient(net, x, y)
    for k in range(net.n_layers):
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in net.weights[k].shape)
            if net.masks[k] is not None and not net.masks[k][idx]:
                assert gw[k][idx] == 0
                continue
            assert gw[k][idx] == pytest.approx(numeric_grad(net, x, y, k, idx), rel=1e-5, abs=1e-7)
    # bias of the output layer: dE/db = sum(F - y)
    f = forward(net, x[:, :27], x[:, 27:] if arity == 2 else None)
    assert np.allclose(gb[-1], (f - y).sum(axis=0))


def test_logistic_regression_oracle():
    net = init_net("flat", 1, 1, layer_sizes=[], seed=2)
    x = np.random.default_rng(3).random((3, 27))
    z = x @ net.weights[0] + net.biases[0]
    assert np.allclose(forward(net, x), 1 / (1 + np.exp(-z)))
    y = np.zeros((3, 27))
    f = forward(net, x)
    assert loss(f, y) == pytest.approx(-np.log(1 - f).sum())


def test_loss_clamped():
    assert np.isfinite(loss([0.0, 1.0], [1.0, 0.0]))


def test_loss_gradient_batch_api():
    net = init_net("flat", 1, 2, layer_sizes=[4, 4])
    pa = np.ones((2, 3, 3, 3))
    gw, gb = loss_gradient(net, (pa, pa, np.zeros((2, 27))))
    assert [g.shape for g in gw] == [w.shape for w in net.weights]
    with pytest.raises(ValueError):
        loss_gradient(net, (pa, None, np.zeros((2, 27))))


def test_mask_views_rate():
    rng = np.random.default_rng(4)
    xa, xb = np.ones((20000, 3)), np.ones((20000, 3))
    code = mask_views(xa, xb, 0.2, rng)
    assert abs((code > 0).mean() - 0.2) < 0.015
    assert abs((code == 1).mean() - 0.1) < 0.01
    assert np.all(xa[code == 1] == 0) and np.all(xb[code == 1] == 1)
    assert np.all(xb[code == 2] == 0)


def blob_substack(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(3, 17, (4, 3))
    target = make_target(MarkerList(pts), (20, 20, 20))
    g = np.stack(np.meshgrid(*[np.arange(20)] * 3, indexing="ij"), -1)
    img = sum(np.exp(-np.sum((g - p) ** 2, -1) / 4.0) for p in pts)
    img = img + rng.normal(0, 0.05, img.shape)
    return Volume(np.clip(img, 0, 1)), target


def test_training_decreases_loss_and_keeps_columns():
    va, target = blob_substack(5)
    net = init_net("columnar", 1, 2, layer_sizes=[8, 16], seed=0)
    cfg = TrainConfig(epochs=8, patches_per_epoch=1024, batch_size=64, learning_rate=3e-3,
                      dtype="float64")
    trained, curve = train(net, [(va, va, target)], cfg)
    assert curve[-1] < 0.6 * curve[0]
    assert np.all(trained.weights[0][~trained.masks[0]] == 0)


def test_training_deterministic():
    va, target = blob_substack(6)
    cfg = TrainConfig(epochs=2, patches_per_epoch=256, batch_size=64)
    a, ca = train(init_net("flat", 1, 1, [8, 8]), [(va, None, target)], cfg)
    b, cb = train(init_net("flat", 1, 1, [8, 8]), [(va, None, target)], cfg)
    assert ca == cb
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(p_mask=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def constant_net(value, arity=1):
    net = init_net("flat", 1, arity, layer_sizes=[4])
    for w in net.weights:
        w[:] = 0
    net.biases[-1][:] = np.log(value / (1 - value))
    return net


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_predict_constant_net_covers_every_voxel(stride):
    vol = Volume(np.random.default_rng(7).random((9, 10, 11)))
    out = predict_volume(constant_net(0.3), vol, stride=stride)
    assert out.dims == vol.dims
    assert np.allclose(out.data, 0.3, atol=1e-6)


def test_predict_matches_single_patch_forward():
    rng = np.random.default_rng(8)
    net = init_net("flat", 1, 1, [6, 6], seed=3)
    vol = Volume(rng.random((3, 3, 3)))
    out = predict_volume(net, vol, dtype="float64")
    x = vol.data / vol.data.max()
    assert np.allclose(out.data.ravel(), forward(net, x.ravel()))


def test_predict_argument_checks():
    vol = Volume.zeros((5, 5, 5))
    with pytest.raises(ValueError):
        predict_volume(constant_net(0.5, 2), vol)
    with pytest.raises(ValueError):
        predict_volume(constant_net(0.5), vol, vol)
    with pytest.raises(ValueError):
        predict_volume(constant_net(0.5), Volume.zeros((2, 5, 5)))


def test_sd_pipelines_shapes_and_arity():
    vol = Volume(np.random.default_rng(9).random((8, 8, 8)))
    nets = {"single": constant_net(0.2), "msd": constant_net(0.4, 2)}
    a, b = sd_pipelines("svim", vol, vol, nets)
    assert a.dims == b.dims == vol.dims
    assert np.allclose(sd_pipelines("ifi", vol, vol, nets).data, 0.2, atol=1e-6)
    assert np.allclose(sd_pipelines("msd", vol, vol, nets).data, 0.4, atol=1e-6)
    with pytest.raises(ValueError):
        sd_pipelines("msd", vol, vol, {"msd": constant_net(0.4)})
    with pytest.raises(ValueError):
        sd_pipelines("nope", vol, vol, nets)


def test_net_roundtrip(tmp_path):
    net = init_net("columnar", 1, 2, [5, 7], seed=4)
    save_net(net, str(tmp_path / "n.npz"))
    back = load_net(str(tmp_path / "n.npz"))
    assert back.architecture == "columnar" and back.arity == 2
    x = np.random.default_rng(0).random((2, 54))
    assert np.array_equal(forward(net, x[:, :27], x[:, 27:]), forward(back, x[:, :27], x[:, 27:]))
