"""Netpbm I/O, synthetic rendering, manifests and batching."""

import json

import numpy as np
import pytest

from aseg import (
    ConfigError,
    InMemoryDataset,
    NetpbmError,
    batch_iterator,
    generate_synthetic,
    load_manifest,
    load_pgm_labels,
    load_ppm,
    load_sample,
    save_pgm_labels,
    save_ppm,
)
from aseg.netpbm import parse_netpbm


# ======================================================
# Netpbm
# ======================================================

@pytest.mark.unit
def test_ppm_keeps_uint8_pixels(tmp_path, rng):
    image = rng.integers(0, 256, (3, 5, 7)).astype(np.uint8)
    path = str(tmp_path / "img.ppm")
    save_ppm(image, path)
    np.testing.assert_array_equal(load_ppm(path), image)


@pytest.mark.unit
def test_ppm_rounds_float_images(tmp_path):
    image = np.array([0.0, 0.5, 1.0, 1.2, -0.1, 0.2]).reshape(3, 1, 2)
    path = str(tmp_path / "img.ppm")
    save_ppm(image, path)
    assert load_ppm(path).reshape(-1).tolist() == [0, 128, 255, 255, 0, 51]


@pytest.mark.unit
def test_pgm_labels_keep_ignore_value(tmp_path):
    mask = np.array([[0, 1, 255], [2, 2, 0]])
    path = str(tmp_path / "label.pgm")
    save_pgm_labels(mask, path)
    out = load_pgm_labels(path)
    assert out.dtype == np.int64
    np.testing.assert_array_equal(out, mask)


@pytest.mark.unit
def test_header_comments_are_skipped():
    buf = b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x09"
    magic, data = parse_netpbm(buf)
    assert magic == "P5"
    assert data.tolist() == [[7, 9]]


@pytest.mark.unit
@pytest.mark.parametrize("buf,offset", [
    (b"P3\n1 1\n255\n\x00", 0),
    (b"P5\n1 1\n65535\n\x00\x00", 12),
    (b"P5\n2 2\n255\n\x00", 12),
    (b"P5\nx 2\n255\n", 3),
])
def test_malformed_files_report_offset(buf, offset):
    with pytest.raises(NetpbmError) as info:
        parse_netpbm(buf, "bad.pgm")
    assert info.value.offset == offset
    assert "bad.pgm" in info.value.detail


@pytest.mark.unit
def test_wrong_kind_is_rejected(tmp_path):
    path = str(tmp_path / "label.pgm")
    save_pgm_labels(np.zeros((2, 2), dtype=np.uint8), path)
    with pytest.raises(NetpbmError):
        load_ppm(path)


# ======================================================
# Synthetic rendering
# ======================================================

@pytest.mark.unit
def test_rendering_is_deterministic(dataset_factory):
    first, second = dataset_factory(n_samples=3), dataset_factory(n_samples=3)
    for i in range(3):
        np.testing.assert_array_equal(first.sample(i).modality_a, second.sample(i).modality_a)
        np.testing.assert_array_equal(first.sample(i).label, second.sample(i).label)


@pytest.mark.unit
def test_samples_are_well_formed(dataset_factory):
    data = dataset_factory(n_samples=4)
    for i in range(4):
        s = data.sample(i)
        assert s.modality_a.shape == (3, 32, 32) and s.modality_b.shape == (3, 32, 32)
        assert s.label.shape == (32, 32)
        assert s.label.min() >= 0 and s.label.max() < 3
        for img in (s.modality_a, s.modality_b):
            assert img.min() >= 0.0 and img.max() <= 1.0


@pytest.mark.unit
def test_corruption_leaves_labels_and_other_modality(dataset_factory):
    clean = dataset_factory(n_samples=6, corruption_probability=0.0)
    dirty = dataset_factory(n_samples=6, corruption_probability=1.0)
    for i in range(6):
        c, d = clean.sample(i), dirty.sample(i)
        assert c.corruption is None
        hit = d.corruption["modality"]
        assert d.corruption["regime"] in ("overexposure", "noise", "blackout")
        np.testing.assert_array_equal(c.label, d.label)
        other = "b" if hit == "a" else "a"
        np.testing.assert_array_equal(c.modality(other), d.modality(other))


@pytest.mark.unit
def test_regimes_can_be_restricted(dataset_factory):
    data = dataset_factory(n_samples=5, corruption_probability=1.0, regimes_a=[], regimes_b=["blackout"])
    for i in range(5):
        assert data.sample(i).corruption["modality"] == "b"
        assert data.sample(i).corruption["regime"] == "blackout"


@pytest.mark.unit
def test_spec_validation(spec_factory):
    with pytest.raises(ConfigError):
        spec_factory(height=40)
    with pytest.raises(ConfigError):
        spec_factory(regimes_a=["fog"])
    with pytest.raises(ConfigError):
        spec_factory(instances=(3, 2))


# ======================================================
# Manifests
# ======================================================

@pytest.mark.integration
def test_generated_dataset_matches_in_memory(tmp_path, spec_factory):
    spec = spec_factory(corruption_probability=0.5)
    manifest = generate_synthetic(spec, 6, str(tmp_path))
    memory = InMemoryDataset.synthesize(spec, 6)
    loaded = load_manifest(str(tmp_path))
    assert loaded.indices("train") == memory.indices("train")
    assert loaded.indices("val") == memory.indices("val")
    for i in range(6):
        a, b = loaded.sample(i), memory.sample(i)
        np.testing.assert_array_equal(a.modality_a, b.modality_a)
        np.testing.assert_array_equal(a.modality_b, b.modality_b)
        np.testing.assert_array_equal(a.label, b.label)
        assert a.corruption == b.corruption
    np.testing.assert_array_equal(load_sample(manifest, 5).label, memory.sample(5).label)
    assert len(manifest.samples) == 6


@pytest.mark.integration
def test_manifest_is_write_once_and_checked(tmp_path, spec_factory):
    generate_synthetic(spec_factory(), 4, str(tmp_path))
    with pytest.raises(ConfigError):
        generate_synthetic(spec_factory(), 4, str(tmp_path))

    data = json.loads((tmp_path / "manifest.json").read_text())
    assert set(data) == {"seed", "spec", "samples"}
    (tmp_path / data["samples"][0]["a"]).unlink()
    with pytest.raises(ConfigError, match="not found"):
        load_manifest(str(tmp_path / "manifest.json"))


@pytest.mark.unit
def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_manifest(str(tmp_path))


# ======================================================
# Batching
# ======================================================

@pytest.mark.unit
def test_batches_in_order(dataset_factory):
    data = dataset_factory()
    batches = list(batch_iterator(data, "train", 4))
    assert [b.indices for b in batches] == [[0, 1, 2, 3], [4, 5]]
    assert batches[0].a.shape == (4, 3, 32, 32)
    assert batches[0].labels.shape == (4, 32, 32)
    assert len(list(batch_iterator(data, "train", 4, drop_last=True))) == 1


@pytest.mark.unit
def test_shuffle_is_seeded(dataset_factory):
    data = dataset_factory()

    def order(seed, epoch):
        return [i for b in batch_iterator(data, "train", 2, shuffle_seed=seed, epoch=epoch)
                for i in b.indices]

    assert order(3, 0) == order(3, 0)
    assert sorted(order(3, 1)) == data.indices("train")


@pytest.mark.unit
def test_unknown_split(dataset_factory):
    with pytest.raises(ConfigError):
        list(batch_iterator(dataset_factory(), "test", 2))
    with pytest.raises(ConfigError):
        dataset_factory().indices("test")[0]
