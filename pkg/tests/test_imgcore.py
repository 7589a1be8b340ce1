import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispcam.imgcore import (
    ImagePlane,
    UfiFormatError,
    UncertainImage,
    coord_to_storage,
    read_ufi,
    storage_to_coord,
    write_ufi,
)


class TestCoordConvention:
    def test_center_maps_to_middle(self):
        assert coord_to_storage((0, 0), (3, 3)) == (1, 1)

    def test_y_up_flips_to_top_row(self):
        assert coord_to_storage((1, 1), (3, 3)) == (0, 2)

    def test_symmetric_corner(self):
        assert coord_to_storage((-1, -1), (3, 3)) == (2, 0)

    def test_out_of_bounds_raises(self):
        with pytest.raises(ValueError):
            coord_to_storage((2.1, 0), (3, 3))

    def test_half_rounding_rules(self):
        # x: half rounds up (rightwards); y: half rounds down after flip
        assert coord_to_storage((0.5, 0), (4, 3)) == (1, 2)
        assert coord_to_storage((0, 0.5), (3, 4)) == (1, 1)

    @pytest.mark.parametrize("w,h", [(1, 1), (2, 3), (3, 2), (4, 4), (5, 7)])
    def test_bijection_exhaustive(self, w, h):
        seen = set()
        for row in range(h):
            for col in range(w):
                c = storage_to_coord((row, col), (w, h))
                assert coord_to_storage(c, (w, h)) == (row, col)
                seen.add(c)
        assert len(seen) == w * h


class TestImagePlane:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ImagePlane([[np.nan]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            ImagePlane(np.zeros((0, 3)))


class TestUncertainImage:
    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            UncertainImage(np.zeros((1, 2, 2)), -np.ones((1, 2, 2)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            UncertainImage(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))

    def test_cov_mode_needs_three_channels(self):
        with pytest.raises(ValueError):
            UncertainImage(np.zeros((1, 2, 2)), np.zeros((9, 2, 2)), "cov")

    def test_cov_symmetry_enforced(self):
        cov = np.zeros((9, 1, 1))
        cov[[0, 4, 8]] = 1.0
        cov[1] = 0.5  # xy without yx
        with pytest.raises(ValueError):
            UncertainImage(np.zeros((3, 1, 1)), cov, "cov")

    def test_cov_roundtrip_access(self):
        cov = np.zeros((9, 1, 1))
        cov[0], cov[4], cov[8] = 1.0, 2.0, 3.0
        cov[1] = cov[3] = 0.25
        img = UncertainImage(np.zeros((3, 1, 1)), cov, "cov")
        m = img.cov_at(0, 0)
        assert np.allclose(m, m.T)
        assert m[0, 1] == 0.25


class TestUfiFormat:
    def test_minimal_file_layout(self, tmp_path):
        img = UncertainImage(np.full((1, 1, 1), 2.0), np.ones((1, 1, 1)))
        path = tmp_path / "one.ufi"
        write_ufi(img, path)
        raw = path.read_bytes()
        assert len(raw) == 24 + 8
        assert raw[:24].decode("ascii").split() == ["UFI1", "1", "1", "1", "diag"]
        assert raw[23:24] == b"\n"
        back = read_ufi(path)
        assert back == img

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ufi"
        path.write_bytes(b"NOPE 1 1 1 diag".ljust(23) + b"\n" + b"\x00" * 8)
        with pytest.raises(UfiFormatError):
            read_ufi(path)

    def test_rejects_truncated_payload(self, tmp_path):
        img = UncertainImage(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
        path = tmp_path / "trunc.ufi"
        write_ufi(img, path)
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(UfiFormatError):
            read_ufi(path)

    def test_rejects_nan_payload(self, tmp_path):
        img = UncertainImage(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
        path = tmp_path / "nan.ufi"
        write_ufi(img, path)
        data = bytearray(path.read_bytes())
        data[24:28] = np.array([np.nan], "<f4").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(UfiFormatError):
            read_ufi(path)

    def test_rejects_negative_variance_payload(self, tmp_path):
        img = UncertainImage(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
        path = tmp_path / "negvar.ufi"
        write_ufi(img, path)
        data = bytearray(path.read_bytes())
        data[28:32] = np.array([-1.0], "<f4").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(UfiFormatError):
            read_ufi(path)

    def test_cov_mode_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 3, 4, 5)).astype(np.float32).astype(np.float64)
        cov = np.einsum("ikhw,jkhw->ijhw", a, a).reshape(9, 4, 5)
        cov = cov.astype(np.float32).astype(np.float64)
        cov = cov.reshape(3, 3, 4, 5)
        cov = 0.5 * (cov + cov.transpose(1, 0, 2, 3))
        img = UncertainImage(
            rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64),
            cov.reshape(9, 4, 5),
            "cov",
        )
        path = tmp_path / "cov.ufi"
        write_ufi(img, path)
        assert read_ufi(path) == img

    def test_refuses_invalid_pixels(self, tmp_path):
        img = UncertainImage(
            np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
            valid=np.array([[True, False], [True, True]]),
        )
        with pytest.raises(ValueError):
            write_ufi(img, tmp_path / "masked.ufi")

    @settings(max_examples=25, deadline=None)
    @given(
        w=st.integers(1, 6),
        h=st.integers(1, 6),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_roundtrip_property(self, tmp_path_factory, w, h, seed):
        rng = np.random.default_rng(seed)
        mean = rng.normal(scale=100, size=(1, h, w)).astype(np.float32)
        var = rng.exponential(scale=10, size=(1, h, w)).astype(np.float32)
        img = UncertainImage(mean.astype(np.float64), var.astype(np.float64))
        path = tmp_path_factory.mktemp("ufi") / "rt.ufi"
        write_ufi(img, path)
        back = read_ufi(path)
        assert np.array_equal(back.mean, img.mean)
        assert np.array_equal(back.uncertainty, img.uncertainty)
