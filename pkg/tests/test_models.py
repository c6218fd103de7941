import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatsurr import data, models, ndgrad as nd, optim


def _resnet(seed=0, blocks=2):
    return models.build_model(models.ArchSpec("miniresnet", (1, 8, 8), 3, widths=(4,),
                                              blocks=blocks), seed)


def test_build_is_deterministic():
    spec = models.ArchSpec("mlp", (4,), 2, widths=(8,))
    _, a = models.build_model(spec, 7)
    _, b = models.build_model(spec, 7)
    assert a.equal(b) and a.digest() == b.digest()
    _, c = models.build_model(spec, 8)
    assert not a.equal(c)


def test_spec_validation():
    with pytest.raises(models.SpecError):
        models.ArchSpec("miniresnet", (1, 8, 8), 3, widths=(4,), blocks=0)
    with pytest.raises(models.SpecError):
        models.ArchSpec("mlp", (4,), 1)
    with pytest.raises(models.SpecError):
        models.ArchSpec("vgg", (4,), 2)
    with pytest.raises(models.SpecError):
        models.ArchSpec("smallcnn", (1, 6, 6), 2, widths=(2, 2))
    with pytest.raises(models.SpecError):
        models.ArchSpec("smallcnn", (1, 8, 8), 2, widths=(2,))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(2, 10))
def test_mlp_parameter_count(D, H, C):
    _, p = models.build_model(models.ArchSpec("mlp", (D,), C, widths=(H,)), 0)
    assert p.count() == D * H + H + H * C + C


def test_init_scheme():
    g, p = _resnet()
    for name, shape, kind, fan_in in g.layout():
        t = p[name]
        assert t.shape == shape and t.dtype == np.float32
        if kind == "he":
            assert np.abs(t).max() <= np.sqrt(6.0 / fan_in)
        elif kind == "one":
            np.testing.assert_array_equal(t, 1.0)
        elif kind == "zero":
            np.testing.assert_array_equal(t, 0.0)


def test_eval_predict_is_pure_and_batch_independent():
    g, p = _resnet()
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8)).astype(np.float32)
    before = p.digest()
    a = models.predict(g, p, x)
    b = models.predict(g, p, x)
    assert p.digest() == before
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 3)
    np.testing.assert_allclose(models.predict(g, p, x[1:2])[0], a[1], rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(models.predict(g, p, x, chunk=2), a, rtol=1e-6, atol=1e-7)
    with pytest.raises(nd.ShapeError):
        models.predict(g, p, x[:, :, :4])


def test_trained_model_separates_blobs():
    ds = data.gen_synthetic("blobs", 300, 3, noise=0.05, seed=0)
    g, p = models.build_model(models.ArchSpec("mlp", (2,), 3, widths=(16,)), 0)
    tr = optim.train(g, p, ds.pair, optim.preset("sgd", lr0=0.05), 20, 0)
    te = data.gen_synthetic("blobs", 300, 3, noise=0.05, seed=1)
    assert models.accuracy(g, tr.final, *te.pair) > 0.9


def test_refresh_bn_stats():
    g, p = models.build_model(models.ArchSpec("mlp", (3,), 2, widths=(4,)), 0)
    assert models.refresh_bn_stats(g, p, np.zeros((4, 3))).equal(p)
    g, p = _resnet()
    zeros = np.zeros((5, 1, 8, 8), np.float32)
    r = models.refresh_bn_stats(g, p, zeros)
    np.testing.assert_array_equal(r["stem_bn.running_mean"], 0.0)
    np.testing.assert_array_equal(r["stem_bn.running_var"], 0.0)
    x = data.gen_synthetic("patterned-images", 64, 3, seed=0, image_shape=(1, 8, 8)).inputs
    y = np.zeros(64, int)
    r = models.refresh_bn_stats(g, p, x)
    for k in p.trainable():
        np.testing.assert_array_equal(r[k], p[k])
    l0 = nd.forward_backward(g, p, x, y, mode="eval").loss
    l1 = nd.forward_backward(g, r, x, y, mode="eval").loss
    assert l0 != l1
    half = models.refresh_bn_stats(g, p, x, fraction=0.1)
    assert not half.equal(r)
    with pytest.raises(ValueError):
        models.refresh_bn_stats(g, p, x, fraction=0.0)
    with pytest.raises(ValueError):
        models.refresh_bn_stats(g, p, x[:0])


def test_refresh_matches_train_mode_statistics():
    g, p = _resnet(blocks=1)
    x = np.random.default_rng(1).uniform(size=(16, 1, 8, 8)).astype(np.float32)
    r = models.refresh_bn_stats(g, p, x)
    _, stats = g.forward(p, nd.Node(x), mode="train")
    m, v = stats["stem_bn"]
    np.testing.assert_allclose(r["stem_bn.running_mean"], m, rtol=1e-6)
    np.testing.assert_allclose(r["stem_bn.running_var"], v, rtol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    g, p = _resnet()
    ck = models.Checkpoint(p, epoch=12, seed=3, optimizer="sam", config_hash="abc",
                           arch=g.spec, extra={"note": 1})
    models.save_checkpoint(tmp_path / "a" / "c.fskp", ck)
    back = models.load_checkpoint(tmp_path / "a" / "c.fskp", g.spec)
    assert back.params.equal(p) and back.epoch == 12 and back.optimizer == "sam"
    assert back.extra == {"note": 1} and back.arch == g.spec
    models.save_checkpoint(tmp_path / "d.fskp", back)
    assert (tmp_path / "d.fskp").read_bytes() == (tmp_path / "a" / "c.fskp").read_bytes()
    raw = (tmp_path / "d.fskp").read_bytes()
    assert raw[:4] == b"FSKP" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_errors(tmp_path):
    g, p = _resnet()
    buf = models.checkpoint_bytes(models.Checkpoint(p, 1, 0, "sgd", arch=g.spec))
    other = models.ArchSpec("miniresnet", (1, 8, 8), 3, widths=(4,), blocks=1)
    with pytest.raises(models.FingerprintMismatch):
        models.parse_checkpoint(buf, other)
    with pytest.raises(models.CheckpointFormatError):
        models.parse_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(models.CheckpointFormatError):
        models.parse_checkpoint(buf[:-3])
    with pytest.raises(models.CheckpointFormatError):
        models.parse_checkpoint(buf + b"\0")


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(models.FAMILIES), st.integers(1, 3), st.integers(2, 5), st.integers(0, 99))
def test_fingerprint_mismatch_always_detected(family, w, C, seed):
    shape = (6,) if family == "mlp" else (1, 8, 8)
    widths = {"mlp": (w,), "smallcnn": (w, w), "miniresnet": (w,)}[family]
    spec = models.ArchSpec(family, shape, C, widths=widths)
    _, p = models.build_model(spec, seed)
    buf = models.checkpoint_bytes(models.Checkpoint(p, 1, seed, "sgd", arch=spec))
    assert models.parse_checkpoint(buf, spec).params.equal(p)
    wrong = models.replace_spec(spec, num_classes=C + 1)
    with pytest.raises(models.FingerprintMismatch):
        models.parse_checkpoint(buf, wrong)


def test_check_params_detects_wrong_shapes():
    g, p = _resnet()
    with pytest.raises(models.FingerprintMismatch):
        g.check_params(p.replace({"out.bias": np.zeros(5, np.float32)}))
