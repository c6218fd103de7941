import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatsurr import data, models, optim


def test_same_seed_same_dataset():
    for kind in data.KINDS:
        a = data.gen_synthetic(kind, 50, 5, seed=3, image_shape=(1, 8, 8))
        b = data.gen_synthetic(kind, 50, 5, seed=3, image_shape=(1, 8, 8))
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.provenance == b.provenance
    with pytest.raises(ValueError):
        data.gen_synthetic("faces", 10, 2)
    with pytest.raises(ValueError):
        data.gen_synthetic("blobs", 3, 5)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(data.KINDS), st.integers(2, 12), st.integers(0, 200), st.integers(0, 999))
def test_balanced_and_in_range(kind, classes, extra, seed):
    n = classes + extra
    ds = data.gen_synthetic(kind, n, classes, noise=0.3, seed=seed, image_shape=(1, 4, 4),
                            texture=0.05)
    counts = np.bincount(ds.labels, minlength=classes)
    assert counts.max() - counts.min() <= 1
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1
    assert ds.provenance["generator"] == kind


def test_noiseless_blobs_are_linearly_separable():
    ds = data.gen_synthetic("blobs", 300, 3, noise=0.0, seed=0)
    g, p = models.build_model(models.ArchSpec("mlp", (2,), 3, widths=()), 0)
    tr = optim.train(g, p, ds.pair, optim.preset("sgd", lr0=0.5, weight_decay=0.0), 40, 0)
    assert models.accuracy(g, tr.final, *ds.pair) == 1.0


def test_label_noise_only_in_train_split():
    splits = data.gen_splits("blobs", {"train": 400, "test": 100}, 4, 0.05, 1, label_noise=0.5)
    assert splits["train"].provenance["flipped"] > 100
    assert "label_noise" not in splits["test"].provenance


def test_dataset_validation():
    with pytest.raises(data.LabelOutOfRange):
        data.Dataset(np.zeros((2, 1), np.float32), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        data.Dataset(np.full((2, 1), 1.5, np.float32), np.array([0, 1]), 3)


# -- readers --------------------------------------------------------------------------


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (7, 5, 4), dtype=np.uint8)
    img[0, 0, 0] = 255
    lab = rng.integers(0, 10, 7).astype(np.uint8)
    data.write_idx(tmp_path / "i", tmp_path / "l", img, lab)
    raw = (tmp_path / "i").read_bytes()
    assert raw[2] == 0x08 and raw[3] == 0x03
    ds = data.load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.inputs.shape == (7, 1, 5, 4)
    assert ds.inputs[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(ds.inputs[:, 0], img.astype(np.float32) / 255.0)
    np.testing.assert_array_equal(ds.labels, lab)


def test_idx_errors(tmp_path):
    img = np.zeros((2, 2, 2), np.uint8)
    data.write_idx(tmp_path / "i", tmp_path / "l", img, np.array([0, 12], np.uint8))
    with pytest.raises(data.LabelOutOfRange):
        data.load_idx(tmp_path / "i", tmp_path / "l")
    good = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x03" + good[4:])
    with pytest.raises(data.BadMagic):
        data.load_idx(tmp_path / "bad", tmp_path / "l", num_classes=20)
    (tmp_path / "short").write_bytes(good[:-1])
    with pytest.raises(data.Truncated):
        data.load_idx(tmp_path / "short", tmp_path / "l", num_classes=20)


def test_cifar_roundtrip_and_truncation(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (3, 3, 32, 32), dtype=np.uint8)
    lab = np.array([0, 9, 4])
    data.write_cifar_binary(tmp_path / "b.bin", img, lab)
    assert (tmp_path / "b.bin").stat().st_size == 3 * 3073
    ds = data.load_cifar_binary([tmp_path / "b.bin", tmp_path / "b.bin"])
    assert len(ds) == 6
    np.testing.assert_array_equal(ds.inputs[:3], img.astype(np.float32) / 255.0)
    np.testing.assert_array_equal(ds.labels[3:], lab)
    (tmp_path / "t.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-10])
    with pytest.raises(data.Truncated):
        data.load_cifar_binary([tmp_path / "t.bin"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 999))
def test_byte_formats_roundtrip_after_quantization(tmp_path_factory, seed):
    d = tmp_path_factory.mktemp("rt")
    ds = data.gen_synthetic("patterned-images", 12, 3, seed=seed, image_shape=(1, 8, 8))
    q = np.round(ds.inputs * 255).astype(np.uint8)
    data.write_idx(d / "i", d / "l", q[:, 0], ds.labels.astype(np.uint8))
    back = data.load_idx(d / "i", d / "l", num_classes=3)
    np.testing.assert_array_equal(back.inputs, q.astype(np.float32) / 255.0)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_fsds_roundtrip(tmp_path):
    ds = data.gen_synthetic("patterned-images", 20, 4, seed=2, image_shape=(1, 8, 8),
                            label_noise=0.1)
    data.save_dataset(tmp_path / "d.fsds", ds)
    back = data.load_dataset(tmp_path / "d.fsds")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.provenance == ds.provenance and back.split == ds.split
    buf = (tmp_path / "d.fsds").read_bytes()
    (tmp_path / "x").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(data.BadMagic):
        data.load_dataset(tmp_path / "x")
    (tmp_path / "y").write_bytes(buf[:-4])
    with pytest.raises(data.Truncated):
        data.load_dataset(tmp_path / "y")


# -- evaluation set ------------------------------------------------------------------


class _Fixed:
    """Stand-in target whose predictions are a fixed label vector."""

    def __init__(self, preds):
        self.preds = np.asarray(preds)


def _fake_targets(monkeypatch, pred_sets, C):
    def fake_predict(graph, params, x, **kw):
        return np.eye(C)[graph.preds[np.asarray(x[:, 0], dtype=int)]]
    monkeypatch.setattr(models, "predict", fake_predict)
    return [(_Fixed(p), None) for p in pred_sets]


def test_eval_set_excludes_misclassified(monkeypatch):
    y = np.arange(10) % 3
    preds = y.copy()
    preds[4] = (y[4] + 1) % 3
    # the fake predictor reads the example index from the single input feature
    x_idx = data.Dataset(np.zeros((10, 1), np.float32), y, 3)
    x_idx.inputs = np.arange(10, dtype=np.float64)[:, None]
    targets = _fake_targets(monkeypatch, [y, preds], 3)
    for seed in range(5):
        idx = data.select_eval_set(targets, x_idx, 9, seed)
        assert 4 not in idx and len(idx) == 9
    a = data.select_eval_set(targets, x_idx, 5, 11)
    np.testing.assert_array_equal(a, data.select_eval_set(targets, x_idx, 5, 11))
    with pytest.raises(data.InsufficientCorrect) as e:
        data.select_eval_set(targets, x_idx, 10, 0)
    assert e.value.count == 9


def test_shifted_targets():
    assert data.shifted_targets(np.array([9]), 10)[0] == 0
    y = np.arange(20) % 7
    assert np.all(data.shifted_targets(y, 7) != y)


def _trained_toy():
    ds = data.gen_synthetic("blobs", 300, 3, noise=0.05, seed=0)
    g, p = models.build_model(models.ArchSpec("mlp", (2,), 3, widths=(16,)), 0)
    tr = optim.train(g, p, ds.pair, optim.preset("sgd", lr0=0.05), 20, 0)
    return g, tr.final, ds


def test_nonrobust_construction_det():
    g, p, ds = _trained_toy()
    out, frac = data.build_nonrobust_dataset(g, p, ds, "det", epsilon=0.5, steps=50)
    assert frac >= 0.9
    assert out.inputs.min() >= 0 and out.inputs.max() <= 1
    assert out.provenance["mode"] == "det"
    assert len(out) == round(frac * len(ds))


def test_nonrobust_construction_zero_epsilon_is_weak():
    g, p, ds = _trained_toy()
    with pytest.raises(data.ConstructionWeak) as e:
        data.build_nonrobust_dataset(g, p, ds, "det", epsilon=0.0)
    assert e.value.fraction < 0.1
    out, _ = data.build_nonrobust_dataset(g, p, ds, "rand", epsilon=0.5, steps=50, min_kept=0.0)
    assert out.split == "train-rand"
