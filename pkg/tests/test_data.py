import numpy as np
import pytest
from PIL import Image

from faceprotect.data import (DatasetError, DatasetManifest, ManifestEntry, add_split, build_splits,
                              denormalize_u8, load_dataset, make_synthetic_identities, normalize_u8,
                              read_image, select, stack, write_dataset)


@pytest.fixture(scope="module")
def faces():
    return make_synthetic_identities(4, 6, 16, seed=0)


def test_normalization_roundtrip():
    u8 = np.arange(256, dtype=np.uint8)
    x = normalize_u8(u8)
    assert x.min() == -1 and x.max() == 1
    np.testing.assert_array_equal(denormalize_u8(x), u8)


def test_synthetic_shape_range_and_determinism(faces):
    x = stack(faces)
    assert x.shape == (24, 3, 16, 16) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1
    again = stack(make_synthetic_identities(4, 6, 16, seed=0))
    np.testing.assert_array_equal(x, again)
    assert not np.array_equal(x, stack(make_synthetic_identities(4, 6, 16, seed=1)))


def test_identity_prefix_does_not_change_pixels(faces):
    other = make_synthetic_identities(4, 6, 16, seed=0, prefix="tg")
    assert other[0].identity_id == "tg0000"
    np.testing.assert_array_equal(stack(other), stack(faces))


def test_splits_cover_each_identity(faces):
    m = build_splits(faces, 0.5, seed=0)
    for split in ("gallery", "probe"):
        ids = {e.identity_id for e in m.split(split)}
        assert ids == {f.identity_id for f in faces}
    assert len(m.split("gallery")) == 12 and len(m.split("probe")) == 12
    assert not set(m.sample_ids("gallery")) & set(m.sample_ids("probe"))


def test_split_clamps_to_one_each(faces):
    m = build_splits(faces, 0.01, seed=0)
    assert len(m.split("gallery")) == 4
    with pytest.raises(ValueError):
        build_splits(faces, 1.0, seed=0)


def test_single_sample_identity_rejected():
    with pytest.raises(DatasetError, match="single sample"):
        build_splits(make_synthetic_identities(2, 1, 8, 0), 0.5, 0)


def test_target_overlap_rejected(faces):
    m = build_splits(faces, 0.5, 0)
    with pytest.raises(DatasetError, match="overlap"):
        add_split(m, [type(faces[0])(faces[0].image, faces[0].identity_id, "dup_x")], "target")


def test_write_and_load_roundtrip(tmp_path, faces):
    m = build_splits(faces, 0.5, 0)
    path = write_dataset(tmp_path, faces, m)
    loaded = load_dataset(path, 16)
    assert [f.sample_id for f in loaded] == [f.sample_id for f in faces]
    np.testing.assert_array_equal(stack(loaded), stack(faces))
    probes = load_dataset(path, 16, splits=("probe",))
    assert [f.sample_id for f in probes] == [f.sample_id for f in select(faces, m, "probe")]


def test_load_collects_every_failure(tmp_path, faces):
    m = build_splits(faces, 0.5, 0)
    path = write_dataset(tmp_path, faces, m)
    (tmp_path / m.entries[0].path).unlink()
    (tmp_path / m.entries[1].path).write_bytes(b"not an image")
    with pytest.raises(DatasetError) as exc:
        load_dataset(path, 16)
    assert [sid for sid, _ in exc.value.items] == [m.entries[0].sample_id, m.entries[1].sample_id]


def test_manifest_validation(tmp_path):
    p = tmp_path / "manifest.tsv"
    p.write_text("a\tid0\ta.png\tgallery\na\tid0\tb.png\tprobe\n")
    with pytest.raises(DatasetError, match="duplicate"):
        DatasetManifest.read(p)
    p.write_text("a\tid0\ta.png\tholdout\n")
    with pytest.raises(DatasetError, match="unknown split"):
        DatasetManifest.read(p)
    p.write_text("a\tid0\n")
    with pytest.raises(DatasetError, match="4 tab-separated"):
        DatasetManifest.read(p)
    m = DatasetManifest([ManifestEntry("a", "x", "a.png", "probe")])
    m.write(p)
    assert DatasetManifest.read(p).entries == m.entries


def test_read_image_resizes_and_rejects_non_square(tmp_path):
    Image.new("RGB", (32, 32), (255, 0, 0)).save(tmp_path / "a.png")
    x = read_image(tmp_path / "a.png", 16)
    assert x.shape == (3, 16, 16) and x[0].min() == 1 and x[1].max() == -1
    Image.new("RGB", (32, 16)).save(tmp_path / "b.png")
    with pytest.raises(ValueError, match="non-square"):
        read_image(tmp_path / "b.png", 16)


@pytest.mark.parametrize("r", [0, 6, -4])
def test_bad_resolution(r):
    with pytest.raises(ValueError, match="multiple of 4"):
        make_synthetic_identities(1, 2, r, 0)
