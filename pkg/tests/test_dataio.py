import numpy as np
import pytest
from PIL import Image

from exudet.dataio import (
    EXUDATE,
    NORMAL,
    LabeledImage,
    batch_iter,
    binarize_grade,
    decode_image,
    load_dataset,
    read_labels_csv,
    read_split_manifest,
    stratified_split,
    write_split_manifest,
)
from exudet.errors import ConfigError, DataError, FormatError

from synthimages import make_items, write_corpus


def fake_items(n_normal, n_exudate):
    items = [LabeledImage(path=f"n{i}", chw=np.zeros((3, 2, 2), np.float32), label=NORMAL)
             for i in range(n_normal)]
    items += [LabeledImage(path=f"e{i}", chw=np.zeros((3, 2, 2), np.float32), label=EXUDATE)
              for i in range(n_exudate)]
    return items


class TestLabels:
    def test_binarize(self):
        assert binarize_grade(0) == NORMAL
        assert [binarize_grade(g) for g in (1, 2, 3, 4)] == [EXUDATE] * 4

    def test_binarize_range(self):
        for bad in (-1, 5):
            with pytest.raises(DataError):
                binarize_grade(bad)

    def test_graded_header(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("image,grade\na.png,0\nb.png,3\n")
        assert read_labels_csv(str(csv_path)) == [("a.png", 0), ("b.png", 1)]

    def test_binary_header(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("image,label\na.png,1\nb.png,0\n")
        assert read_labels_csv(str(csv_path)) == [("a.png", 1), ("b.png", 0)]

    def test_bad_header(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("file,grade\na.png,0\n")
        with pytest.raises(FormatError, match=":1"):
            read_labels_csv(str(csv_path))

    def test_bad_label_names_line(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("image,label\na.png,1\nb.png,7\n")
        with pytest.raises(FormatError, match=":3"):
            read_labels_csv(str(csv_path))

    def test_non_integer_label(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("image,grade\na.png,mild\n")
        with pytest.raises(FormatError, match="non-integer"):
            read_labels_csv(str(csv_path))

    def test_empty_file(self, tmp_path):
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("")
        with pytest.raises(FormatError, match="empty"):
            read_labels_csv(str(csv_path))


class TestDecode:
    def test_decode_resizes_and_scales(self, tmp_path):
        path = tmp_path / "img.png"
        Image.fromarray(np.full((64, 48, 3), 128, np.uint8), "RGB").save(path)
        chw = decode_image(str(path), size=(32, 32))
        assert chw.shape == (3, 32, 32) and chw.dtype == np.float32
        np.testing.assert_allclose(chw, 128 / 255, atol=1e-6)

    def test_decode_error_names_path(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_text("not an image")
        with pytest.raises(DataError, match="junk.png"):
            decode_image(str(path))

    def test_load_dataset(self, tmp_path):
        csv_path = write_corpus(tmp_path, 6, size=32)
        items = load_dataset(csv_path, str(tmp_path), size=(32, 32))
        assert len(items) == 6
        assert [it.label for it in items] == [0, 1, 0, 1, 0, 1]
        assert all(it.chw.shape == (3, 32, 32) for it in items)
        assert all(0.0 <= it.chw.min() and it.chw.max() <= 1.0 for it in items)

    def test_load_dataset_standardize(self, tmp_path):
        csv_path = write_corpus(tmp_path, 2, size=32)
        items = load_dataset(csv_path, str(tmp_path), size=(32, 32), standardize=True)
        means = items[0].chw.mean(axis=(1, 2))
        np.testing.assert_allclose(means, 0.0, atol=1e-5)


class TestStratifiedSplit:
    def test_balanced_500_image_arithmetic(self):
        split = stratified_split(fake_items(250, 250), fractions=(0.7, 0.2, 0.1), seed=0)
        assert split.counts() == (350, 100, 50)
        for part in (split.train, split.val, split.test):
            labels = [it.label for it in part]
            assert labels.count(NORMAL) == labels.count(EXUDATE)
        assert [it.label for it in split.train].count(NORMAL) == 175

    def test_uneven_class_sizes(self):
        split = stratified_split(fake_items(10, 20), fractions=(0.5, 0.3, 0.2), seed=1)
        train_labels = [it.label for it in split.train]
        assert train_labels.count(NORMAL) == 5 and train_labels.count(EXUDATE) == 10

    def test_partition_is_exact(self):
        items = fake_items(33, 17)
        split = stratified_split(items, seed=2)
        recombined = {it.path for it in split.train + split.val + split.test}
        assert recombined == {it.path for it in items}
        assert sum(split.counts()) == len(items)

    def test_deterministic(self):
        a = stratified_split(fake_items(20, 20), seed=3)
        b = stratified_split(fake_items(20, 20), seed=3)
        assert [it.path for it in a.train] == [it.path for it in b.train]

    def test_seed_reshuffles(self):
        a = stratified_split(fake_items(40, 40), seed=3)
        b = stratified_split(fake_items(40, 40), seed=4)
        assert [it.path for it in a.train] != [it.path for it in b.train]

    def test_small_class_rejected(self):
        with pytest.raises(ConfigError, match="allow_empty"):
            stratified_split(fake_items(2, 2), fractions=(0.7, 0.2, 0.1), seed=0)

    def test_allow_empty(self):
        split = stratified_split(fake_items(4, 4), fractions=(1.0, 0.0, 0.0),
                                 seed=0, allow_empty=True)
        assert split.counts() == (8, 0, 0)

    def test_fraction_validation(self):
        with pytest.raises(ConfigError):
            stratified_split(fake_items(4, 4), fractions=(0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            stratified_split(fake_items(4, 4), fractions=(0.9, 0.1))

    def test_unstratified_pool(self):
        split = stratified_split(fake_items(30, 10), seed=5, stratify=False,
                                 allow_empty=True)
        assert split.counts() == (28, 8, 4)


class TestManifests:
    def test_roundtrip(self, tmp_path):
        split = stratified_split(fake_items(10, 10), seed=6)
        dest = tmp_path / "split.csv"
        write_split_manifest(split, str(dest))
        parts = read_split_manifest(str(dest))
        assert sorted(parts) == ["test", "train", "val"]
        assert len(parts["train"]) == 14 and len(parts["val"]) == 4
        assert parts["train"][0] == (split.train[0].path, split.train[0].label)

    def test_write_deterministic(self, tmp_path):
        split = stratified_split(fake_items(10, 10), seed=6)
        write_split_manifest(split, str(tmp_path / "a.csv"))
        write_split_manifest(split, str(tmp_path / "b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_read_rejects_bad_header(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("a,b,c\nx.png,0,train\n")
        with pytest.raises(FormatError, match=":1"):
            read_split_manifest(str(path))

    def test_read_rejects_bad_split_name(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("path,label,split\nx.png,0,holdout\n")
        with pytest.raises(FormatError, match=":2"):
            read_split_manifest(str(path))


class TestBatchIter:
    def test_batch_arithmetic(self):
        items = make_items(350, size=8)
        sizes = [len(y) for _, y in batch_iter(items, batch_size=32)]
        assert len(sizes) == 11
        assert sizes == [32] * 10 + [30]

    def test_every_item_once(self):
        items = make_items(50, size=8)
        seen = []
        for x, y in batch_iter(items, batch_size=16, seed=1, epoch=3):
            assert x.shape[1:] == (3, 8, 8)
            seen.extend(y.tolist())
        assert len(seen) == 50
        assert seen.count(0) == 25 and seen.count(1) == 25

    def test_epoch_changes_order(self):
        items = make_items(64, size=8)
        first = np.concatenate([y for _, y in batch_iter(items, 16, seed=0, epoch=0)])
        second = np.concatenate([y for _, y in batch_iter(items, 16, seed=0, epoch=1)])
        assert not np.array_equal(first, second)

    def test_same_epoch_same_order(self):
        items = make_items(64, size=8)
        first = np.concatenate([x.sum(axis=(1, 2, 3))
                                for x, _ in batch_iter(items, 16, seed=2, epoch=5)])
        second = np.concatenate([x.sum(axis=(1, 2, 3))
                                 for x, _ in batch_iter(items, 16, seed=2, epoch=5)])
        np.testing.assert_array_equal(first, second)

    def test_batch_size_one(self):
        items = make_items(3, size=8)
        batches = list(batch_iter(items, batch_size=1))
        assert len(batches) == 3 and all(x.shape[0] == 1 for x, _ in batches)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            next(batch_iter([], batch_size=4))

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            next(batch_iter(make_items(4, size=8), batch_size=0))

    def test_dtype_override(self):
        items = make_items(4, size=8)
        x, _ = next(batch_iter(items, batch_size=4, dtype=np.float64))
        assert x.dtype == np.float64
