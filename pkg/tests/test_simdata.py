import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from coxcnn import simdata as sd
from coxcnn.cox import SurvivalRecord
from coxcnn.errors import CorruptionError, FormatError, InvalidArgumentError
from coxcnn.spp import BoundingBox


def sample_with_time(i, t):
    img = sd.Image2D(np.ones((1, 2, 2), np.float32), BoundingBox(0, 0, 2, 2))
    return sd.SimulatedSample(i, img, SurvivalRecord(t, True), None)


def test_mask_reproducible_and_in_range():
    a = sd.generate_mask(28, 28, seed=11)
    b = sd.generate_mask(28, 28, seed=11)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.size == 784 and a.shape == (28, 28)
    assert a.values.min() >= 0 and a.values.max() < 1
    other = sd.generate_mask(28, 28, seed=12)
    assert np.mean(a.values != other.values) > 0.9


def test_mask_errors_and_gaussian():
    with pytest.raises(InvalidArgumentError):
        sd.generate_mask(0, 3, 0)
    with pytest.raises(InvalidArgumentError):
        sd.generate_mask(3, 3, 0, distribution="laplace")
    g = sd.generate_mask(50, 50, 0, distribution="gaussian", sigma=2.0)
    assert abs(g.values.std() - 2.0) < 0.15


def test_risk_examples():
    assert sd.risk_of(np.zeros((5, 5)), np.ones((5, 5))) == 1.0
    assert sd.risk_of(np.ones((2, 2)), np.ones((2, 2))) == pytest.approx(math.exp(-4), abs=1e-12)
    assert sd.risk_of(np.ones((2, 2)), np.ones((2, 2))) == pytest.approx(0.0183, abs=1e-4)
    with pytest.raises(InvalidArgumentError):
        sd.risk_of(np.ones((2, 3)), np.ones((2, 2)))


@given(st.integers(0, 2**32 - 1))
def test_risk_matches_summation_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((6, 7)).astype(np.float32)
    mask = rng.random((6, 7)).astype(np.float32)
    total = math.fsum((float(img[i, j]) * float(mask[i, j])) ** 2 for i in range(6) for j in range(7))
    assert sd.risk_of(img, mask) == pytest.approx(math.exp(-total), abs=1e-7)


def test_risk_rejects_standardized():
    img = sd.Image2D(np.random.default_rng(0).random((1, 4, 4)), BoundingBox(0, 0, 4, 4))
    with pytest.raises(InvalidArgumentError):
        sd.risk_of(sd.standardize(img), np.ones((4, 4)))


def test_survival_time():
    assert sd.survival_time(1.0) == pytest.approx(5 * math.exp(-1), abs=1e-12)
    assert sd.survival_time(1.0) == pytest.approx(1.8394, abs=1e-4)
    assert sd.survival_time(1e-12) == pytest.approx(5.0)
    grid = np.linspace(0.01, 1, 50)
    assert np.all(np.diff([sd.survival_time(r) for r in grid]) < 0)


def test_censoring_counts_and_times():
    samples = [sample_with_time(i, 1.0 + i) for i in range(100)]
    out = sd.apply_censoring(samples, 0.5, seed=3)
    assert sum(s.record.event for s in out) == 50
    for before, after in zip(samples, out):
        if after.record.event:
            assert after.record.time == before.record.time
        else:
            assert 0.1 * before.record.time <= after.record.time < before.record.time
    full = sd.apply_censoring(samples, 1.0, seed=3)
    assert all(s.record.event and s.record.time == b.record.time for s, b in zip(full, samples))
    with pytest.raises(InvalidArgumentError):
        sd.apply_censoring([], 0.5)
    with pytest.raises(InvalidArgumentError):
        sd.apply_censoring(samples, 0.0)


def test_simulated_dataset_invariants():
    images = sd.synth_digits(200, seed=4)
    ds = sd.simulate(images, seed=5)
    assert sum(ds.events()) == 100
    for s in ds.samples:
        assert 0 < s.true_risk <= 1
        assert sd.risk_of(s.image, ds.mask) == pytest.approx(s.true_risk, abs=1e-6)
        if s.record.event:
            assert s.record.time == pytest.approx(5 * math.exp(-s.true_risk), abs=1e-6)
    ev = ds.events()
    risk = np.array([s.true_risk for s in ds.samples])
    rho, _ = spearmanr(risk[ev], ds.times()[ev])
    assert rho == pytest.approx(-1.0)
    again = sd.simulate(sd.synth_digits(200, seed=4), seed=5)
    assert [s.record for s in again.samples] == [s.record for s in ds.samples]


def test_censoring_only_removes_comparable_pairs():
    ds = sd.simulate(sd.synth_digits(60, seed=1), seed=2)
    t_true = np.array([sd.survival_time(s.true_risk) for s in ds.samples])
    t_obs, ev = ds.times(), ds.events()
    for i in range(60):
        if not ev[i]:
            continue
        for j in range(60):
            # every censored-era comparable pair keeps its uncensored ordering
            if t_obs[i] < t_obs[j]:
                assert t_true[i] < t_true[j]


def test_standardize():
    img = sd.Image2D(np.random.default_rng(0).random((2, 9, 9)) * 3 + 1, BoundingBox(1, 1, 3, 3))
    s = sd.standardize(img)
    assert s.standardized and s.bbox == img.bbox
    assert np.all(np.abs(s.pixels.mean(axis=(1, 2))) < 1e-4)
    assert np.all(np.abs(s.pixels.var(axis=(1, 2)) - 1) < 1e-4)


def test_tight_bbox():
    px = np.zeros((10, 12))
    px[2:5, 3:9] = 0.5
    assert sd.tight_bbox(px) == BoundingBox(3, 2, 6, 3)
    assert sd.tight_bbox(np.zeros((4, 4))) is None


def write_mnist_like(tmp_path, labels, blank=()):
    rng = np.random.default_rng(0)
    imgs = np.zeros((len(labels), 28, 28), np.uint8)
    for i in range(len(labels)):
        if i not in blank:
            y, x = rng.integers(2, 16, size=2)
            imgs[i, y : y + 10, x : x + 8] = rng.integers(1, 256, size=(10, 8))
    ip, lp = tmp_path / "images.idx", tmp_path / "labels.idx"
    sd.write_idx(ip, imgs)
    sd.write_idx(lp, np.asarray(labels, np.uint8))
    return ip, lp, imgs


def label_count_oracle(path, keep):
    data = path.read_bytes()
    n = struct.unpack(">I", data[4:8])[0]
    return sum(1 for b in data[8 : 8 + n] if b in keep)


def test_load_idx_filters_labels(tmp_path):
    labels = [0, 1, 6, 6, 3, 0, 9, 6, 0, 2]
    ip, lp, raw = write_mnist_like(tmp_path, labels)
    images, kept = sd.load_idx(ip, lp, {0, 6}, return_labels=True)
    assert len(images) == label_count_oracle(lp, {0, 6}) == 6
    assert set(kept) == {0, 6}
    assert all(im.width == im.height == 28 for im in images)
    first = images[0]
    assert first.pixels.max() <= 1.0
    np.testing.assert_allclose(first.pixels[0], raw[0] / 255.0, atol=1e-7)
    assert first.bbox == sd.tight_bbox(raw[0])


def test_load_idx_gzip(tmp_path):
    import gzip

    ip, lp, _ = write_mnist_like(tmp_path, [0, 6, 1])
    gz = tmp_path / "images.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert len(sd.load_idx(gz, lp)) == 2


def test_load_idx_skips_blank(tmp_path, caplog):
    ip, lp, _ = write_mnist_like(tmp_path, [0, 6, 0], blank={1})
    with caplog.at_level("WARNING"):
        images = sd.load_idx(ip, lp)
    assert len(images) == 2
    assert "skipped 1" in caplog.text


def test_load_idx_format_errors(tmp_path):
    ip, lp, _ = write_mnist_like(tmp_path, [0, 6])
    with pytest.raises(FormatError):
        sd.load_idx(lp, lp)
    truncated = tmp_path / "trunc.idx"
    truncated.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(FormatError):
        sd.load_idx(truncated, lp)
    short = tmp_path / "short.idx"
    short.write_bytes(b"\0\0")
    with pytest.raises(FormatError):
        sd.read_idx_images(short)


def test_synth_digits_contract():
    a, labels = sd.synth_digits(10, seed=3, return_labels=True)
    b = sd.synth_digits(10, seed=3)
    assert all(x.pixels.tobytes() == y.pixels.tobytes() and x.bbox == y.bbox for x, y in zip(a, b))
    assert labels.count(0) == labels.count(6) == 5
    for img, lab in zip(a, labels):
        assert (img.width, img.height) == (28, 28)
        assert img.bbox == sd.tight_bbox(img.pixels)
        if lab == 0:
            cx = img.bbox.x0 + img.bbox.width / 2
            cy = img.bbox.y0 + img.bbox.height / 2
            assert img.bbox.area > 0 and abs(cx - 14) <= 4 and abs(cy - 14) <= 4
    with pytest.raises(InvalidArgumentError):
        sd.synth_digits(0)
    with pytest.raises(InvalidArgumentError):
        sd.synth_digits(4, classes={3})


def test_synthetic_risk_non_degenerate():
    ds = sd.simulate(sd.synth_digits(400, seed=0), seed=0)
    assert np.std([s.true_risk for s in ds.samples]) > 0.01


def test_dataset_round_trip(tmp_path):
    ds = sd.simulate(sd.synth_digits(12, seed=1), seed=9)
    ds.extra = {"source": "synthetic"}
    sd.write_dataset(ds, tmp_path / "d")
    back = sd.read_dataset(tmp_path / "d")
    assert back.mask.values.tobytes() == ds.mask.values.tobytes()
    assert (back.lambda0, back.seed, back.extra) == (ds.lambda0, ds.seed, ds.extra)
    for a, b in zip(ds.samples, back.samples):
        assert a.id == b.id and a.record == b.record and a.true_risk == b.true_risk
        assert a.image.bbox == b.image.bbox
        assert a.image.pixels.tobytes() == b.image.pixels.tobytes()


def test_dataset_missing_file_names_sample(tmp_path):
    ds = sd.simulate(sd.synth_digits(4, seed=1), seed=9)
    d = sd.write_dataset(ds, tmp_path / "d")
    (d / "img_000002.bin").unlink()
    with pytest.raises(CorruptionError, match="sample 2"):
        sd.read_dataset(d)


def test_dataset_checksum_and_version(tmp_path):
    ds = sd.simulate(sd.synth_digits(4, seed=1), seed=9)
    d = sd.write_dataset(ds, tmp_path / "d")
    f = d / "img_000001.bin"
    data = bytearray(f.read_bytes())
    data[0] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        sd.read_dataset(d)
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        sd.read_dataset(d)
    with pytest.raises(FormatError):
        sd.read_dataset(tmp_path / "nowhere")


def test_empty_dataset(tmp_path):
    d = sd.write_dataset(sd.SimulatedDataset([]), tmp_path / "empty")
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["n"] == 0 and manifest["samples"] == []
    assert len(sd.read_dataset(d)) == 0


def test_derive_seed_stable():
    assert sd.derive_seed(1, 2) == sd.derive_seed(1, 2)
    assert sd.derive_seed(1, 2) != sd.derive_seed(1, 3)
    assert 0 <= sd.derive_seed(0) < 2**64
