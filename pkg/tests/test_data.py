"""Synthetic dataset generation, binary records, batching."""

import numpy as np
import pytest

from quest import data as D
from quest.errors import ConfigurationError, FormatError


class TestSynthGenerate:
    def test_shapes_and_ranges(self):
        tr, te = D.synth_generate(0, num_classes=8, n_train=64, n_test=32,
                                  size=16)
        assert tr.images.shape == (64, 3, 16, 16)
        assert te.images.shape == (32, 3, 16, 16)
        assert tr.images.dtype == np.float32
        assert tr.labels.dtype == np.int64
        assert tr.images.min() >= 0.0 and tr.images.max() <= 1.0
        assert tr.split == "train" and te.split == "test"

    def test_label_balance(self):
        tr, _ = D.synth_generate(1, num_classes=4, n_train=40, n_test=8,
                                 size=8)
        counts = np.bincount(tr.labels, minlength=4)
        assert np.all(counts == 10)
        assert set(np.unique(tr.labels)) == {0, 1, 2, 3}

    def test_bit_identical_reruns(self):
        a_tr, a_te = D.synth_generate(7, num_classes=8, n_train=32, n_test=16,
                                      size=16)
        b_tr, b_te = D.synth_generate(7, num_classes=8, n_train=32, n_test=16,
                                      size=16)
        assert np.array_equal(a_tr.images, b_tr.images)
        assert np.array_equal(a_te.images, b_te.images)
        assert np.array_equal(a_tr.labels, b_tr.labels)

    def test_seed_changes_data(self):
        a, _ = D.synth_generate(0, num_classes=8, n_train=16, n_test=8, size=16)
        b, _ = D.synth_generate(1, num_classes=8, n_train=16, n_test=8, size=16)
        assert not np.array_equal(a.images, b.images)

    def test_train_test_disjoint_streams(self):
        tr, te = D.synth_generate(3, num_classes=2, n_train=8, n_test=8,
                                  size=16)
        assert not np.array_equal(tr.images[:8], te.images[:8])

    def test_class_count_bounds(self):
        with pytest.raises(ConfigurationError):
            D.synth_generate(0, num_classes=1)
        with pytest.raises(ConfigurationError):
            D.synth_generate(0, num_classes=9)
        with pytest.raises(ConfigurationError):
            D.synth_generate(0, num_classes=8, n_train=4, n_test=1)


class TestBinaryRecords:
    def _tiny(self, n=6):
        rng = np.random.default_rng(0)
        images = rng.uniform(0, 1, size=(n, 3, 32, 32)).astype(np.float32)
        labels = (np.arange(n) % 3).astype(np.int64)
        return D.Dataset(images=images, labels=labels, split="train", seed=0,
                         num_classes=10)

    def test_round_trip(self, tmp_path):
        ds = self._tiny()
        p = tmp_path / "batch.bin"
        D.save_records(ds, p)
        assert p.stat().st_size == 6 * D.RECORD_BYTES
        back = D.load_cifar_binary(p, normalize=False)
        assert np.array_equal(back.labels, ds.labels)
        # quantization to bytes is the only loss
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255.0 + 1e-6
        assert back.num_classes == 10

    def test_normalization_applied(self, tmp_path):
        ds = self._tiny()
        p = tmp_path / "batch.bin"
        D.save_records(ds, p)
        raw = D.load_cifar_binary(p, normalize=False)
        norm = D.load_cifar_binary(p, normalize=True)
        m = np.asarray(D.CIFAR10_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
        s = np.asarray(D.CIFAR10_STD, dtype=np.float32).reshape(1, 3, 1, 1)
        assert np.allclose(norm.images, (raw.images - m) / s, atol=1e-6)

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * (D.RECORD_BYTES + 17))
        with pytest.raises(FormatError):
            D.load_cifar_binary(p)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        with pytest.raises(FormatError):
            D.load_cifar_binary(p)

    def test_out_of_range_label_rejected(self, tmp_path):
        rec = bytearray(D.RECORD_BYTES)
        rec[0] = 11
        p = tmp_path / "label.bin"
        p.write_bytes(bytes(rec))
        with pytest.raises(FormatError):
            D.load_cifar_binary(p)

    def test_save_rejects_bad_shapes(self, tmp_path):
        ds = self._tiny()
        ds.images = ds.images[:, :, :16, :16]
        with pytest.raises(FormatError):
            D.save_records(ds, tmp_path / "x.bin")


class TestBatchIter:
    def _ds(self, n=11):
        rng = np.random.default_rng(3)
        images = rng.uniform(0, 1, size=(n, 3, 4, 4)).astype(np.float32)
        labels = (np.arange(n) % 2).astype(np.int64)
        return D.Dataset(images=images, labels=labels, split="train", seed=0,
                         num_classes=2)

    def test_covers_every_sample_once(self):
        ds = self._ds(11)
        seen = []
        for idx, images, labels in D.batch_iter(ds, 4, shuffle_seed=0,
                                                with_indices=True):
            seen.extend(idx.tolist())
            assert len(images) == len(labels) == len(idx)
        assert sorted(seen) == list(range(11))

    def test_last_batch_short(self):
        ds = self._ds(10)
        sizes = [len(l) for _, l in D.batch_iter(ds, 4, shuffle_seed=0)]
        assert sizes == [4, 4, 2]

    def test_order_deterministic_per_epoch(self):
        ds = self._ds(16)
        run = lambda e: [i.tolist() for i, _, _ in
                         D.batch_iter(ds, 4, 5, epoch=e, with_indices=True)]
        assert run(0) == run(0)
        assert run(0) != run(1)

    def test_images_match_indices(self):
        ds = self._ds(8)
        for idx, images, labels in D.batch_iter(ds, 3, 1, with_indices=True):
            assert np.array_equal(images, ds.images[idx])
            assert np.array_equal(labels, ds.labels[idx])

    def test_flip_augment_changes_some_images(self):
        ds = self._ds(32)
        plain = np.concatenate([b for b, _ in D.batch_iter(ds, 8, 2)])
        flipped = np.concatenate(
            [b for b, _ in D.batch_iter(ds, 8, 2, augment="flip")])
        assert plain.shape == flipped.shape
        changed = np.any(plain != flipped, axis=(1, 2, 3))
        assert changed.any() and not changed.all()
        # every changed image is exactly the horizontal flip
        assert np.array_equal(flipped[changed], D.hflip(plain[changed]))

    def test_flip_independent_of_batch_size(self):
        ds = self._ds(16)
        a = np.concatenate([b for b, _ in D.batch_iter(ds, 4, 9, augment="flip")])
        b = np.concatenate([b for b, _ in D.batch_iter(ds, 16, 9, augment="flip")])
        assert np.array_equal(a, b)

    def test_bad_args(self):
        ds = self._ds(4)
        with pytest.raises(ConfigurationError):
            list(D.batch_iter(ds, 0, 0))
        with pytest.raises(ConfigurationError):
            list(D.batch_iter(ds, 2, 0, augment="rotate"))


class TestHflip:
    def test_involution(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        assert np.array_equal(D.hflip(D.hflip(x)), x)

    def test_reverses_columns(self):
        x = np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3)
        f = D.hflip(x)
        assert np.array_equal(f[0, 0], [[2, 1, 0], [5, 4, 3]])
