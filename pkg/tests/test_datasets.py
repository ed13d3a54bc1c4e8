import numpy as np
import pytest

from gator.datasets import (DatasetError, augment, encode_idx, iterate_batches, load_dataset, parse_idx,
                            parse_synthetic_spec)


def write_split(d, tx, ty, ex, ey):
    for name, arr in (("train-images", tx), ("train-labels", ty), ("eval-images", ex), ("eval-labels", ey)):
        (d / f"{name}.idx").write_bytes(encode_idx(arr))


class TestIdx:
    def test_round_trip(self):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        out = parse_idx(encode_idx(arr))
        np.testing.assert_array_equal(out, arr)

    def test_big_endian_floats(self):
        arr = np.array([1.5, -2.25], dtype=np.float32)
        data = encode_idx(arr)
        assert data[:4] == b"\x00\x00\x0d\x01" and data[8:12] == b"\x3f\xc0\x00\x00"
        np.testing.assert_array_equal(parse_idx(data), arr)

    def test_bad_magic_names_offset(self):
        data = bytearray(encode_idx(np.zeros(3, np.uint8)))
        data[1] = 7
        with pytest.raises(DatasetError, match="offset 1"):
            parse_idx(bytes(data))

    def test_unknown_type(self):
        with pytest.raises(DatasetError, match="offset 2"):
            parse_idx(b"\x00\x00\x07\x01\x00\x00\x00\x01\x00")

    def test_truncated(self):
        data = encode_idx(np.zeros((4, 4), np.uint8))
        with pytest.raises(DatasetError, match="truncated data at offset 24, expected 28"):
            parse_idx(data[:-4])

    def test_trailing(self):
        with pytest.raises(DatasetError, match="trailing"):
            parse_idx(encode_idx(np.zeros(2, np.uint8)) + b"\x00")

    def test_directory(self, tmp_path):
        r = np.random.default_rng(0)
        tx = r.integers(0, 256, (10, 6, 6)).astype(np.uint8)
        ex = r.integers(0, 256, (4, 6, 6)).astype(np.uint8)
        write_split(tmp_path, tx, np.arange(10, dtype=np.uint8) % 3, ex, np.array([0, 1, 2, 0], np.uint8))
        ds = load_dataset(str(tmp_path))
        assert ds.image_shape == (1, 6, 6) and ds.classes == 3
        np.testing.assert_allclose(ds.train_x.mean(), 0.0, atol=1e-12)

    def test_eval_label_out_of_range(self, tmp_path):
        z = np.zeros((2, 4, 4), np.uint8)
        write_split(tmp_path, z, np.array([0, 1], np.uint8), z, np.array([0, 5], np.uint8))
        with pytest.raises(DatasetError, match="label 5 out of range"):
            load_dataset(str(tmp_path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="missing"):
            load_dataset(str(tmp_path))


class TestSynthetic:
    def test_deterministic(self):
        a = load_dataset("synthetic:n=64,hw=8,seed=5")
        b = load_dataset("synthetic:n=64,hw=8,seed=5")
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.eval_y, b.eval_y)
        c = load_dataset("synthetic:n=64,hw=8,seed=6")
        assert not np.array_equal(a.train_x, c.train_x)

    def test_shapes_and_labels(self):
        ds = load_dataset("synthetic:classes=4,n=80,hw=8,eval=12,channels=2")
        assert ds.train_x.shape == (80, 2, 8, 8) and ds.eval_x.shape == (12, 2, 8, 8)
        assert ds.train_y.min() >= 0 and ds.train_y.max() < 4

    def test_normalized_train_split(self):
        ds = load_dataset("synthetic:n=256,hw=8")
        np.testing.assert_allclose(ds.train_x.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(ds.train_x.std(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_default_eval_size(self):
        assert parse_synthetic_spec("synthetic:n=100")["eval"] == 25

    @pytest.mark.parametrize("spec", ["synthetic:size=3", "synthetic:classes=1", "synthetic:n"])
    def test_bad_spec(self, spec):
        with pytest.raises(DatasetError):
            parse_synthetic_spec(spec)

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(str(tmp_path / "absent"))


class TestIteration:
    def test_augment_shape_and_content(self):
        r = np.random.default_rng(0)
        x = r.standard_normal((5, 3, 8, 8))
        out = augment(x, np.random.default_rng(1), pad=2)
        assert out.shape == x.shape
        # every output pixel is an input pixel or padding
        assert np.isin(out[out != 0], x).all()

    def test_zero_pad_is_identity_or_flip(self):
        x = np.random.default_rng(0).standard_normal((6, 1, 4, 4))
        out = augment(x, np.random.default_rng(2), pad=0)
        for a, b in zip(x, out):
            assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)

    def test_batches_cover_once(self):
        x = np.arange(10)[:, None].astype(float)
        y = np.arange(10)
        seen = np.concatenate([yb for _, yb in iterate_batches(x, y, 4, np.random.default_rng(0))])
        assert sorted(seen) == list(range(10))
