import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncadapt.data import (
    DataError,
    DomainSpec,
    default_benchmark,
    gen_domain,
    load_split,
    rti_read,
    rti_write,
    split_dataset,
    write_dataset,
)
from ncadapt.tensor import Rng


class TestGeneration:
    def test_bitwise_deterministic(self):
        spec = DomainSpec(name="x", n_cases=6, seed=99)
        a = gen_domain(spec)
        b = gen_domain(spec)
        for (ia, la), (ib, lb) in zip(a, b):
            assert ia.tobytes() == ib.tobytes()
            assert la.tobytes() == lb.tobytes()

    def test_clean_domain_label_matches_field(self):
        spec = DomainSpec(name="clean", n_cases=4, noise_sigma=0.0,
                          intensity_scale=1.0, intensity_shift=0.0, seed=3)
        for img, lbl in gen_domain(spec):
            assert set(np.unique(lbl)) <= {0.0, 1.0}
            assert lbl.any()
            # with no transforms the image is the soft field: thresholding it
            # at 0.5 recovers the label exactly
            np.testing.assert_array_equal((img > 0.5).astype(np.float32), lbl)

    def test_intensity_shift_moves_mean(self):
        # transforms chosen so the clamp never bites: values stay within [0, 1]
        a = DomainSpec(name="lo", n_cases=12, intensity_scale=0.4,
                       intensity_shift=0.05, noise_sigma=0.01, seed=7)
        b = DomainSpec(name="lo", n_cases=12, intensity_scale=0.4,
                       intensity_shift=0.35, noise_sigma=0.01, seed=7)
        mean_a = np.mean([img.mean() for img, _ in gen_domain(a)])
        mean_b = np.mean([img.mean() for img, _ in gen_domain(b)])
        assert mean_b - mean_a == pytest.approx(0.3, abs=0.01)

    def test_every_case_has_foreground(self):
        for spec in default_benchmark(123):
            for _, lbl in gen_domain(spec):
                assert lbl.sum() >= 1

    def test_resolution_validation(self):
        with pytest.raises(ValueError):
            DomainSpec(name="tiny", resolution=(8, 8))


class TestSplit:
    def test_fifty_cases_gives_forty_ten(self):
        train, test = split_dataset(list(range(50)), 0.2, seed=1)
        assert len(train) == 40 and len(test) == 10

    def test_same_seed_same_split(self):
        assert split_dataset(list(range(20)), 0.2, 5) == split_dataset(list(range(20)), 0.2, 5)

    def test_disjoint_and_exhaustive(self):
        train, test = split_dataset(list(range(23)), 0.25, seed=9)
        assert set(train) & set(test) == set()
        assert sorted(train + test) == list(range(23))

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(list(range(10)), 1.2)

    def test_too_few_cases(self):
        with pytest.raises(ValueError):
            split_dataset([1, 2, 3], 0.2)


class TestRti:
    def test_roundtrip_bitwise(self, tmp_path):
        arr = Rng(1).uniform((16, 16)).astype(np.float32)
        path = tmp_path / "t.rti"
        rti_write(path, arr)
        back = rti_read(path)
        assert back.tobytes() == arr.tobytes()
        assert back.shape == arr.shape

    @given(st.integers(1, 3), st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_random_shapes(self, rank, seed):
        import tempfile

        rng = Rng(seed)
        shape = tuple(int(2 + rng.uniform((1,), 0, 6)[0]) for _ in range(rank))
        arr = rng.uniform(shape, -5, 5).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/x.rti"
            rti_write(path, arr)
            assert rti_read(path).tobytes() == arr.tobytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "h.rti"
        rti_write(path, np.zeros((3, 4), dtype=np.float32))
        blob = path.read_bytes()
        assert blob[:4] == b"RTI1"
        assert blob[4] == 2
        assert blob[5:9] == bytes([3, 0, 0, 0])
        assert blob[9:13] == bytes([4, 0, 0, 0])
        assert len(blob) == 13 + 48

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rti"
        path.write_bytes(b"RTI2" + bytes(20))
        with pytest.raises(DataError):
            rti_read(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.rti"
        rti_write(path, np.zeros((3, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(DataError):
            rti_read(path)

    def test_nan_write_rejected(self, tmp_path):
        with pytest.raises(DataError):
            rti_write(tmp_path / "nan.rti", np.array([np.nan], dtype=np.float32))


class TestDatasetDir:
    def test_write_and_load(self, tmp_path):
        specs = [DomainSpec(name="a", n_cases=6, seed=1),
                 DomainSpec(name="b", n_cases=8, seed=2)]
        manifest = write_dataset(tmp_path, specs, seed=11)
        assert [d["name"] for d in manifest["domains"]] == ["a", "b"]
        train = load_split(tmp_path, "a", "train")
        test = load_split(tmp_path, "a", "test")
        assert len(train) + len(test) == 6
        img, lbl = train[0]
        assert img.shape == (32, 32)
        assert set(np.unique(lbl)) <= {0.0, 1.0}

    def test_rewrite_is_identical(self, tmp_path):
        specs = [DomainSpec(name="a", n_cases=6, seed=1)]
        write_dataset(tmp_path / "one", specs, seed=4)
        write_dataset(tmp_path / "two", specs, seed=4)
        a = (tmp_path / "one" / "a" / "case_000_img.rti").read_bytes()
        b = (tmp_path / "two" / "a" / "case_000_img.rti").read_bytes()
        assert a == b
        ma = (tmp_path / "one" / "manifest.json").read_text()
        mb = (tmp_path / "two" / "manifest.json").read_text()
        assert ma == mb

    def test_missing_domain(self, tmp_path):
        write_dataset(tmp_path, [DomainSpec(name="a", n_cases=6, seed=1)], seed=0)
        with pytest.raises(DataError):
            load_split(tmp_path, "zz", "train")


class TestPolarity:
    def test_dark_blobs_sit_below_background(self):
        spec = DomainSpec(name="dk", n_cases=4, polarity="dark", noise_sigma=0.0,
                          intensity_scale=0.8, intensity_shift=0.1, seed=5)
        for img, lbl in gen_domain(spec):
            fg = img[lbl == 1].mean()
            bg = img[lbl == 0].mean()
            assert fg < bg

    def test_mixed_produces_both_polarities(self):
        spec = DomainSpec(name="mx", n_cases=16, polarity="mixed", noise_sigma=0.0,
                          intensity_scale=0.8, intensity_shift=0.1, seed=6)
        sides = set()
        for img, lbl in gen_domain(spec):
            sides.add(img[lbl == 1].mean() > img[lbl == 0].mean())
        assert sides == {True, False}

    def test_label_marks_blob_for_any_polarity(self):
        # same name + seed -> same ellipse field, so labels must agree even
        # though the dark variant inverts the image
        dark = DomainSpec(name="p", n_cases=3, polarity="dark", noise_sigma=0.0, seed=7)
        bright = DomainSpec(name="p", n_cases=3, polarity="bright", noise_sigma=0.0, seed=7)
        for (img_d, lbl_d), (img_b, lbl_b) in zip(gen_domain(dark), gen_domain(bright)):
            np.testing.assert_array_equal(lbl_d, lbl_b)
            assert not np.array_equal(img_d, img_b)

    def test_bad_polarity(self):
        with pytest.raises(ValueError):
            DomainSpec(name="x", polarity="sideways")
