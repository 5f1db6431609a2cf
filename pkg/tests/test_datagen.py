import numpy as np
import pytest
from PIL import Image

from proad.datagen import (
    DEFECT_TYPES,
    DatasetSpec,
    batch_iterator,
    check_sample,
    dataset_hash,
    generate_dataset,
    load_mvtec_layout,
    render_normal,
    render_sample,
    write_mvtec_layout,
)
from proad.errors import IngestionError, SpecError, UsageError

SMALL = DatasetSpec(num_classes=2, images_per_class_train=8, images_per_class_test_normal=3,
                    images_per_class_test_anomalous=3, image_size=32)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SMALL)


def test_split_contract(small):
    train = [s for s in small if s.split == "train"]
    assert len(train) == 16
    assert all(s.label == "normal" and not s.mask.any() for s in train)
    for s in small:
        check_sample(s)
        assert (s.label == "normal") == (not s.mask.any())


def test_counts_and_ids(small):
    test = [s for s in small if s.split == "test"]
    assert len(test) == 2 * (3 + 3)
    assert len({s.sample_id for s in small}) == len(small)
    assert {s.defect for s in test if s.is_anomalous} == set(SMALL.defect_types)


def test_deterministic():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    assert dataset_hash(a) == dataset_hash(b)


def test_seed_changes_data():
    other = DatasetSpec(**{**SMALL.__dict__, "seed": 1})
    assert dataset_hash(generate_dataset(SMALL)) != dataset_hash(generate_dataset(other))


@pytest.mark.parametrize("defect", DEFECT_TYPES)
def test_mask_marks_exactly_the_altered_pixels(defect):
    clean = render_normal(SMALL, 1, "test", 4)
    img, mask = render_sample(SMALL, 1, "test", 4, defect)
    altered = np.any(img != clean, axis=-1)
    assert mask.any()
    assert int(mask.sum()) == int(altered.sum())
    np.testing.assert_array_equal(mask.astype(bool), altered)


def test_pixels_in_unit_range(small):
    for s in small:
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        assert s.pixels.shape == (32, 32, 3)


def test_indivisible_size_rejected():
    with pytest.raises(SpecError):
        generate_dataset(DatasetSpec(image_size=30), patch_size=8)


@pytest.mark.parametrize("field", ["num_classes", "images_per_class_train", "images_per_class_test_anomalous"])
def test_zero_counts_rejected(field):
    with pytest.raises(SpecError):
        generate_dataset(DatasetSpec(**{field: 0}))


def test_unknown_defect_rejected():
    with pytest.raises(SpecError):
        generate_dataset(DatasetSpec(defect_types=("dent",)))


class TestLoader:
    def test_round_trip(self, small, tmp_path):
        write_mvtec_layout(small, tmp_path)
        loaded = load_mvtec_layout(tmp_path, 32, 32)
        assert len(loaded) == len(small)
        by_id = {s.sample_id: s for s in loaded}
        for s in small:
            got = by_id[s.sample_id]
            check_sample(got)
            assert got.split == s.split and got.label == s.label
            np.testing.assert_array_equal(got.mask, s.mask)
            assert np.abs(got.pixels - s.pixels).max() <= 0.5 / 255 + 1e-12

    def test_layout(self, small, tmp_path):
        write_mvtec_layout(small, tmp_path)
        cat = tmp_path / "class00"
        assert (cat / "train" / "good").is_dir() and (cat / "test" / "good").is_dir()
        for d in SMALL.defect_types:
            assert (cat / "test" / d).is_dir() and (cat / "ground_truth" / d).is_dir()

    def test_train_only(self, tmp_path):
        d = tmp_path / "widget" / "train" / "good"
        d.mkdir(parents=True)
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(d / "000.png")
        out = load_mvtec_layout(tmp_path, 16, 16)
        assert len(out) == 1 and out[0].split == "train" and out[0].label == "normal"

    def test_resize_then_crop(self, tmp_path):
        d = tmp_path / "big" / "train" / "good"
        d.mkdir(parents=True)
        Image.fromarray(np.full((500, 460, 3), 90, np.uint8)).save(d / "000.png")
        (s,) = load_mvtec_layout(tmp_path, 448, 392)
        assert s.pixels.shape == (392, 392, 3)

    def test_constant_mask_survives_downsizing(self, tmp_path):
        cat = tmp_path / "c"
        (cat / "test" / "dent").mkdir(parents=True)
        (cat / "ground_truth" / "dent").mkdir(parents=True)
        Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(cat / "test" / "dent" / "000.png")
        Image.fromarray(np.full((10, 10), 255, np.uint8)).save(cat / "ground_truth" / "dent" / "000_mask.png")
        (s,) = load_mvtec_layout(tmp_path, 5, 5)
        np.testing.assert_array_equal(s.mask, np.ones((5, 5)))

    def test_missing_mask_names_file(self, tmp_path):
        cat = tmp_path / "c"
        (cat / "test" / "dent").mkdir(parents=True)
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(cat / "test" / "dent" / "007.png")
        with pytest.raises(IngestionError, match="007_mask.png"):
            load_mvtec_layout(tmp_path, 8, 8)

    def test_unreadable_image(self, tmp_path):
        d = tmp_path / "c" / "train" / "good"
        d.mkdir(parents=True)
        (d / "000.png").write_bytes(b"not a png")
        with pytest.raises(IngestionError):
            load_mvtec_layout(tmp_path, 8, 8)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batch_iterator(list(range(10)), 4, 0)] == [4, 4, 2]

    def test_covers_every_sample_once(self):
        seen = [x for b in batch_iterator(list(range(10)), 3, 7) for x in b]
        assert sorted(seen) == list(range(10))

    def test_same_seed_same_order(self):
        a = list(batch_iterator(list(range(20)), 4, 5, epoch=2))
        assert a == list(batch_iterator(list(range(20)), 4, 5, epoch=2))

    def test_epochs_permute_differently(self):
        orders = [tuple(x for b in batch_iterator(list(range(50)), 8, 0, epoch=e) for x in b) for e in range(5)]
        assert len(set(orders)) == 5

    def test_empty(self):
        with pytest.raises(UsageError):
            list(batch_iterator([], 4, 0))
