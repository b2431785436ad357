import numpy as np
import pytest

from ecgda import autodiff as ad
from ecgda.net import BiClassifierNet, NetConfig, Normalizer, combine, combine_probs


def batch(rng, b=3, length=41):
    return rng.normal(size=(b, length)).astype(np.float32), rng.uniform(0.5, 1.2, size=(b, 3)).astype(np.float32)


def test_shapes_and_parameter_names():
    model = BiClassifierNet(NetConfig(), seed=0)
    x, tf = batch(np.random.default_rng(0), 4, 193)
    feats, l1, l2 = model.forward(x, tf)
    assert feats.shape == (4, 64) and l1.shape == l2.shape == (4, 4)
    names = set(model.params)
    for b in range(3):
        for conv in ("deep1", "deep2", "shortcut"):
            assert f"F.block{b}.{conv}.w" in names
    assert model.params["F.block0.deep1.w"].shape == (16, 1, 5)
    assert model.params["F.block2.shortcut.w"].shape == (64, 32, 1)
    assert model.params["C1.out.w"].shape == (32 + 3, 4)


def test_same_seed_same_weights_and_heads_differ():
    a, b = BiClassifierNet(seed=4), BiClassifierNet(seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["C1.out.w"].data, a.params["C2.out.w"].data)
    c = BiClassifierNet(seed=5)
    assert not np.array_equal(a.params["F.block0.deep1.w"].data, c.params["F.block0.deep1.w"].data)


def test_pooling_underflow_and_bad_shapes():
    model = BiClassifierNet(seed=0)
    with pytest.raises(ad.ShapeError, match="underflow"):
        model.extract(np.zeros((2, 7), np.float32))
    with pytest.raises(ad.ShapeError):
        model.extract(np.zeros((2, 3, 40), np.float32))
    feats = model.extract(np.zeros((2, 40), np.float32))
    with pytest.raises(ad.ShapeError, match="time features"):
        model.classify(feats, np.zeros((3, 3), np.float32))


def test_minimum_length_passes():
    model = BiClassifierNet(seed=0)
    assert model.extract(np.zeros((1, 8), np.float32)).shape == (1, 64)


def test_whole_network_gradient():
    """Finite differences through a tiny network in float64 on a few parameters."""
    cfg = NetConfig(channels=(2, 3, 2), kernel=3, hidden=(3,))
    model = BiClassifierNet(cfg, seed=1)
    rng = np.random.default_rng(2)
    x, tf = batch(rng, 2, 12)
    y = np.array([0, 2])
    for name in ("F.block0.deep1.w", "F.block1.shortcut.w", "F.block2.deep2.b", "C1.fc0.w", "C2.out.w"):
        base = {k: v.data.astype(np.float64) for k, v in model.params.items()}

        def fn(p, name=name, base=base):
            for k, v in base.items():
                model.params[k] = ad.Tensor(v, requires_grad=False)
            model.params[name] = p
            f = model.extract(ad.Tensor(x.astype(np.float64)))
            l1, l2 = model.classify(f, ad.Tensor(tf.astype(np.float64)))
            return ad.sum(ad.pick(ad.log_softmax(l1), y)) + ad.sum(ad.pick(ad.log_softmax(l2), y)) * 0.5

        assert ad.gradcheck(fn, [base[name]], h=1e-4) <= 1e-3, name


def test_predict_is_batched_consistently():
    model = BiClassifierNet(seed=0)
    x, tf = batch(np.random.default_rng(3), 7, 33)
    a = model.predict(x, tf, batch_size=2)
    b = model.predict(x, tf, batch_size=100)
    np.testing.assert_allclose(a["probs"], b["probs"], rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(a["pred"], np.argmax((a["probs1"] + a["probs2"]) / 2, axis=1))


def test_combine_averages_heads_and_breaks_ties_low():
    p1 = np.array([[0.5, 0.5, 0, 0]])
    p2 = np.array([[0.5, 0.5, 0, 0]])
    probs, pred = combine_probs(p1, p2)
    assert pred.tolist() == [0]
    probs, pred = combine(np.array([[0.0, 2.0, 0, 0]]), np.array([[0.0, 0.0, 3.0, 0]]))
    assert probs.sum() == pytest.approx(1.0) and pred.tolist() == [2]


def test_normalizer_fit_and_constant_column():
    feats = np.array([[1.0, 2.0, 5.0], [3.0, 2.0, 7.0]])
    norm = Normalizer.fit(feats)
    z = norm(feats)
    np.testing.assert_allclose(z[:, 0], [-1, 1])
    np.testing.assert_allclose(z[:, 1], [0, 0])


def test_save_load_roundtrip(tmp_path):
    model = BiClassifierNet(NetConfig(channels=(4, 4, 8), hidden=(6,)), seed=3)
    model.normalizer = Normalizer(np.array([0.8, 0.8, 0.7], np.float32), np.array([0.1, 0.2, 0.3], np.float32))
    model.save(tmp_path / "m.ckpt", length=65, extra={"stage": 2})
    back, meta = BiClassifierNet.load(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg and meta["L"] == 65 and meta["stage"] == 2
    assert meta["architecture"] == model.cfg.architecture_hash()
    x, tf = batch(np.random.default_rng(0), 3, 65)
    np.testing.assert_array_equal(back.predict(x, tf)["probs"], model.predict(x, tf)["probs"])


def test_load_rejects_mismatched_parameters(tmp_path):
    model = BiClassifierNet(seed=0)
    arrays = model.named_arrays()
    arrays.pop("C2.out.b")
    ad.save_checkpoint(tmp_path / "bad.ckpt", arrays, meta=model.manifest())
    with pytest.raises(ad.CheckpointError, match="do not match"):
        BiClassifierNet.load(tmp_path / "bad.ckpt")


def test_copy_head():
    model = BiClassifierNet(seed=0)
    model.copy_head("C1", "C2")
    for k, v in model.head_params("C1").items():
        np.testing.assert_array_equal(v.data, model.params["C2" + k[2:]].data)
