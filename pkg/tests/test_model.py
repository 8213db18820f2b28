import numpy as np
import pytest

from coxcnn import model as M
from coxcnn import tensor_nn as nn
from coxcnn.cox import SurvivalRecord
from coxcnn.errors import FormatError, InvalidArgumentError
from coxcnn.gradcheck import SETTINGS, check_model
from coxcnn.simdata import Image2D, SimulatedSample
from coxcnn.spp import BoundingBox

SMALL = dict(conv_filters=(3, 4, 5), fc_sizes=(12, 6))


def blob_image(x0, y0, size=28, seed=0):
    px = np.zeros((1, size, size), dtype=np.float32)
    px[0, y0 : y0 + 7, x0 : x0 + 6] = np.random.default_rng(seed).uniform(0.1, 1.0, (7, 6))
    return Image2D(px, BoundingBox(x0, y0, 6, 7))


def toy_samples(n=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = blob_image(int(rng.integers(6, 14)), int(rng.integers(6, 14)), seed=seed * 100 + i)
        out.append(SimulatedSample(i, img, SurvivalRecord(float(i + 1), i % 4 != 3)))
    return out


def test_default_shapes():
    m = M.build(M.CoxCnnConfig(), 1, seed=0)
    kinds = [layer.kind for layer in m.layers]
    assert [k.out_ch for k in kinds[:3]] == [16, 36, 64]
    assert kinds[3].in_dim == 64 * 8 * 8 == 4096
    assert (kinds[3].out_dim, kinds[4].out_dim, kinds[5].out_dim) == (500, 100, 1)


def test_multichannel_first_layer_only():
    a = M.build(M.CoxCnnConfig(**SMALL), 1)
    b = M.build(M.CoxCnnConfig(**SMALL), 2)
    assert b.layers[0].kind.in_ch == 2
    assert [l.kind for l in a.layers[1:]] == [l.kind for l in b.layers[1:]]


def test_build_deterministic():
    a = M.build(M.CoxCnnConfig(**SMALL), 1, seed=7)
    b = M.build(M.CoxCnnConfig(**SMALL), 1, seed=7)
    c = M.build(M.CoxCnnConfig(**SMALL), 1, seed=8)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.tensors(), b.tensors()))
    assert not np.array_equal(a.tensors()[0].values, c.tensors()[0].values)


def test_invalid_configs():
    for kw in ({"conv_filters": (1, 2)}, {"fc_sizes": (3,)}, {"conv_kernels": ((2, 2), (3, 3), (3, 3))},
               {"dropout_rate": 1.0}, {"dropout_on": "first"}):
        with pytest.raises(InvalidArgumentError):
            M.CoxCnnConfig(**kw)
    with pytest.raises(InvalidArgumentError):
        M.build(M.CoxCnnConfig(**SMALL), 0)


def test_zero_image_hand_trace():
    with nn.precision(64):
        m = M.build(M.CoxCnnConfig(**SMALL), 1, seed=3)
        rng = np.random.default_rng(3)
        for layer in m.layers:
            layer.bias.values[:] = rng.normal(size=layer.bias.shape)
        # zero the deeper conv weights so every feature map is a constant
        m.layers[1].weights.values[:] = 0
        m.layers[2].weights.values[:] = 0
        img = Image2D(np.zeros((1, 20, 20), np.float32), BoundingBox(4, 5, 9, 6))
        got = M.predict_risk(m, img)
        b = [layer.bias.values for layer in m.layers]
        pooled = np.repeat(np.maximum(b[2], 0), 64)
        h1 = np.maximum(m.layers[3].weights.values @ pooled + b[3], 0)
        h2 = np.maximum(m.layers[4].weights.values @ h1 + b[4], 0)
        expected = float((m.layers[5].weights.values @ h2 + b[5])[0])
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_zero_bias_zero_image_gives_zero():
    m = M.build(M.CoxCnnConfig(**SMALL), 1)
    img = Image2D(np.zeros((1, 12, 12), np.float32), BoundingBox(0, 0, 12, 12))
    assert M.predict_risk(m, img) == 0.0


def test_identical_images_and_batch_independence():
    m = M.build(M.CoxCnnConfig(**SMALL), 1, seed=1)
    imgs = [s.image for s in toy_samples(6)]
    r = M.predict_risks(m, imgs)
    assert M.predict_risk(m, imgs[2]) == pytest.approx(r[2], rel=1e-6)
    assert np.allclose(M.predict_risks(m, imgs[::-1], batch_size=2)[::-1], r, rtol=1e-6)
    assert M.predict_risks(m, [imgs[0], imgs[0]])[0] == M.predict_risks(m, [imgs[0], imgs[0]])[1]


def test_interior_translation_keeps_risk():
    m = M.build(M.CoxCnnConfig(), 1, seed=2)
    a = M.predict_risk(m, blob_image(7, 8))
    b = M.predict_risk(m, blob_image(14, 12))
    assert abs(a - b) <= 1e-4


def test_zero_learning_rate_leaves_parameters():
    m = M.build(M.CoxCnnConfig(**SMALL), 1)
    before = [t.values.copy() for t in m.tensors()]
    M.train(m, toy_samples(), nn.SgdConfig(learning_rate=0.0, epochs=3, batch_size=4))
    assert all(np.array_equal(a, t.values) for a, t in zip(before, m.tensors()))


def test_overfits_tiny_set():
    with nn.precision(64):
        cfg = M.CoxCnnConfig(conv_filters=(4, 4, 4), fc_sizes=(16, 8), dropout_rate=0.0)
        m = M.build(cfg, 1, seed=0)
        res = M.train(m, toy_samples(8), nn.SgdConfig(learning_rate=1e-3, epochs=200, batch_size=8))
    assert res.loss_history[-1] <= 0.5 * res.loss_history[0]


def test_training_is_deterministic():
    def run():
        m = M.build(M.CoxCnnConfig(**SMALL), 1, seed=4)
        return M.train(m, toy_samples(), nn.SgdConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=9))

    a, b = run(), run()
    assert a.loss_history == b.loss_history
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.model.tensors(), b.model.tensors()))


def test_batches_without_events_are_skipped():
    samples = toy_samples(4)
    samples = [SimulatedSample(s.id, s.image, SurvivalRecord(s.record.time, False)) for s in samples]
    samples[0] = SimulatedSample(0, samples[0].image, SurvivalRecord(1.0, True))
    m = M.build(M.CoxCnnConfig(**SMALL), 1)
    res = M.train(m, samples, nn.SgdConfig(epochs=2, batch_size=2))
    assert res.skipped_batches == 2


def test_stratified_batches_spread_events():
    events = np.zeros(100, dtype=bool)
    events[:10] = True
    batches = M.make_batches(events, 20, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))
    assert all(events[b].sum() == 2 for b in batches)


@pytest.mark.parametrize("bits", [64, 32])
def test_end_to_end_gradient(bits):
    with nn.precision(bits):
        for seed in range(3):
            rep = check_model(seed, SETTINGS[bits])
            assert rep.passed, rep


def test_save_load_bit_identical(tmp_path):
    m = M.build(M.CoxCnnConfig(**SMALL), 1, seed=5)
    M.train(m, toy_samples(), nn.SgdConfig(learning_rate=1e-3, epochs=1, batch_size=4))
    path = tmp_path / "m.cxnn"
    M.save_model(m, path)
    back = M.load_model(path)
    imgs = [s.image for s in toy_samples(5, seed=1)]
    assert np.array_equal(M.predict_risks(m, imgs), M.predict_risks(back, imgs))
    assert back.config == m.config and back.metadata["epochs_run"] == 1
    M.save_model(back, tmp_path / "again.cxnn")
    assert (tmp_path / "again.cxnn").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:4] == b"CXNN"


def test_corrupt_container(tmp_path):
    m = M.build(M.CoxCnnConfig(**SMALL), 1)
    path = tmp_path / "m.cxnn"
    M.save_model(m, path)
    data = path.read_bytes()
    bad = tmp_path / "bad.cxnn"
    for blob in (b"XXXX" + data[4:], data[:-3], data + b"\0", data[:4] + b"\x09\x00" + data[6:]):
        bad.write_bytes(blob)
        with pytest.raises(FormatError):
            M.load_model(bad)


def test_channel_mismatch():
    m = M.build(M.CoxCnnConfig(**SMALL), 2)
    with pytest.raises(InvalidArgumentError):
        M.predict_risk(m, blob_image(3, 3))
