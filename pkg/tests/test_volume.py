import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sfseg.errors import CorruptionError, FormatError, ShapeError, ValidationError
from sfseg.volume import (
    HEADER_SIZE,
    FeatureSet,
    FeatureVolume,
    Role,
    VolumeShape,
    export_pgm_sequence,
    import_pgm_sequence,
    load_stack,
    load_volume,
    read_pgm,
    save_stack,
    save_volume,
    write_pgm,
)

finite_f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False)
volumes = hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=5), elements=finite_f32)


class TestVolumeShape:
    def test_index_is_frame_major(self):
        shape = VolumeShape(2, 3, 4)
        assert shape.size == 24
        assert shape.index(1, 2, 3) == 1 * 12 + 2 * 4 + 3

    def test_index_matches_c_order(self):
        shape = VolumeShape(3, 5, 7)
        a = np.arange(shape.size).reshape(shape)
        for t, y, x in [(0, 0, 0), (2, 4, 6), (1, 3, 2)]:
            assert a[t, y, x] == shape.index(t, y, x)

    @pytest.mark.parametrize("dims", [(0, 1, 1), (1, 0, 1), (1, 1, -2)])
    def test_rejects_nonpositive(self, dims):
        with pytest.raises(ShapeError):
            VolumeShape(*dims).validate()


class TestFeatureVolume:
    def test_read_only_copy(self):
        src = np.zeros((1, 2, 2))
        v = FeatureVolume(src)
        src[0, 0, 0] = 5
        assert v.data[0, 0, 0] == 0
        assert v.data.dtype == np.float32
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            FeatureVolume(np.full((1, 1, 2), np.nan))

    @pytest.mark.parametrize("role", [Role.UNARY, Role.SOLUTION])
    def test_nonnegative_roles(self, role):
        with pytest.raises(ValidationError):
            FeatureVolume(-np.ones((1, 1, 1)), role)

    def test_pairwise_may_be_negative(self):
        assert FeatureVolume(-np.ones((1, 1, 1)), Role.PAIRWISE).data.min() == -1

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            FeatureVolume(np.zeros((2, 2)))


class TestFeatureSet:
    def test_needs_a_channel(self):
        with pytest.raises(ValidationError):
            FeatureSet(FeatureVolume(np.ones((1, 2, 2)), Role.UNARY), ())

    def test_shapes_must_agree(self):
        with pytest.raises(ShapeError):
            FeatureSet.from_arrays(np.ones((1, 2, 2)), np.ones((1, 2, 3)))

    def test_roles_are_assigned(self):
        fs = FeatureSet.from_arrays(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
        assert fs.unary.role is Role.UNARY
        assert all(p.role is Role.PAIRWISE for p in fs.pairwise)
        assert fs.shape == (1, 2, 2)


class TestSfsv:
    def test_round_trip_identical_bytes(self, tmp_path):
        v = FeatureVolume(np.full((2, 3, 4), 0.5))
        save_volume(v, tmp_path / "a.sfsv")
        back = load_volume(tmp_path / "a.sfsv")
        assert back.data.tobytes() == v.data.tobytes()
        assert back.shape == (2, 3, 4)

    def test_file_size(self, tmp_path):
        save_volume(FeatureVolume(np.zeros((2, 3, 4))), tmp_path / "a.sfsv")
        assert (tmp_path / "a.sfsv").stat().st_size == HEADER_SIZE + 24 * 4 == 128

    def test_header_layout(self, tmp_path):
        save_volume(FeatureVolume(np.zeros((2, 3, 4))), tmp_path / "a.sfsv")
        head = (tmp_path / "a.sfsv").read_bytes()[:HEADER_SIZE]
        assert head[:4] == b"SFSV"
        assert struct.unpack("<I4I", head[4:24]) == (1, 2, 3, 4, 1)
        assert head[24] == 0x01
        assert head[25:] == bytes(7)

    def test_single_voxel(self, tmp_path):
        save_volume(FeatureVolume(np.full((1, 1, 1), 7.25)), tmp_path / "one.sfsv")
        assert load_volume(tmp_path / "one.sfsv").data[0, 0, 0] == 7.25

    def test_deterministic_bytes(self, tmp_path):
        v = FeatureVolume(np.random.default_rng(0).random((2, 2, 2)))
        save_volume(v, tmp_path / "a.sfsv")
        save_volume(v, tmp_path / "b.sfsv")
        assert (tmp_path / "a.sfsv").read_bytes() == (tmp_path / "b.sfsv").read_bytes()

    def test_bad_magic(self, tmp_path):
        save_volume(FeatureVolume(np.zeros((1, 1, 1))), tmp_path / "a.sfsv")
        blob = bytearray((tmp_path / "a.sfsv").read_bytes())
        blob[:4] = b"XXXX"
        (tmp_path / "a.sfsv").write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_volume(tmp_path / "a.sfsv")

    @pytest.mark.parametrize("offset,value", [(4, 2), (24, 0x02), (27, 1)])
    def test_bad_header_fields(self, tmp_path, offset, value):
        save_volume(FeatureVolume(np.zeros((1, 1, 1))), tmp_path / "a.sfsv")
        blob = bytearray((tmp_path / "a.sfsv").read_bytes())
        blob[offset] = value
        (tmp_path / "a.sfsv").write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_volume(tmp_path / "a.sfsv")

    def test_truncated_payload(self, tmp_path):
        save_volume(FeatureVolume(np.zeros((2, 3, 4))), tmp_path / "a.sfsv")
        blob = (tmp_path / "a.sfsv").read_bytes()
        (tmp_path / "a.sfsv").write_bytes(blob[:-3])
        with pytest.raises(CorruptionError):
            load_volume(tmp_path / "a.sfsv")

    def test_nan_payload(self, tmp_path):
        save_volume(FeatureVolume(np.zeros((1, 1, 2))), tmp_path / "a.sfsv")
        blob = bytearray((tmp_path / "a.sfsv").read_bytes())
        blob[HEADER_SIZE:HEADER_SIZE + 4] = np.array([np.nan], dtype="<f4").tobytes()
        (tmp_path / "a.sfsv").write_bytes(bytes(blob))
        with pytest.raises(ValidationError):
            load_volume(tmp_path / "a.sfsv")

    def test_nan_volume_writes_nothing(self, tmp_path):
        arr = np.zeros((1, 1, 2), dtype=np.float32)
        arr[0, 0, 1] = np.nan
        with pytest.raises(ValidationError):
            save_stack([arr], tmp_path / "bad.sfsv")
        assert list(tmp_path.iterdir()) == []

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            save_volume(FeatureVolume(np.zeros((1, 1, 1))), tmp_path / "missing" / "a.sfsv")

    def test_multi_channel(self, tmp_path):
        a = FeatureVolume(np.zeros((1, 2, 2)))
        b = FeatureVolume(np.ones((1, 2, 2)))
        save_stack([a, b], tmp_path / "s.sfsv")
        assert load_stack(tmp_path / "s.sfsv") == [a, b]
        with pytest.raises(FormatError):
            load_volume(tmp_path / "s.sfsv")

    @given(volumes)
    def test_round_trip_property(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("rt") / "v.sfsv"
        save_volume(FeatureVolume(arr), path)
        back = load_volume(path)
        assert back.data.tobytes() == arr.tobytes()

    def test_sentinel_voxel_matches_flat_index(self, tmp_path):
        shape = VolumeShape(3, 4, 5)
        arr = np.zeros(shape, dtype=np.float32)
        arr[2, 1, 3] = 9.0
        save_volume(FeatureVolume(arr), tmp_path / "s.sfsv")
        payload = np.frombuffer((tmp_path / "s.sfsv").read_bytes()[HEADER_SIZE:], dtype="<f4")
        assert int(np.flatnonzero(payload)[0]) == shape.index(2, 1, 3)


class TestPgm:
    def test_white_frames(self, tmp_path):
        for i in range(3):
            write_pgm(tmp_path / f"f{i}.pgm", np.full((4, 4), 255), maxval=255)
        v = import_pgm_sequence(tmp_path)
        assert v.shape == (3, 4, 4)
        assert np.all(v.data == 1.0)

    def test_export_import_quantization(self, tmp_path):
        vals = np.array([0.0, 0.5, 1.0, 0.123456], dtype=np.float32).reshape(1, 2, 2)
        export_pgm_sequence(FeatureVolume(vals), tmp_path)
        back = import_pgm_sequence(tmp_path)
        assert np.max(np.abs(back.data - vals)) <= 1 / 65535

    def test_frame_order_is_lexicographic(self, tmp_path):
        vals = np.linspace(0, 1, 12, dtype=np.float32).reshape(12, 1, 1)
        paths = export_pgm_sequence(FeatureVolume(vals), tmp_path)
        assert [p.name for p in paths] == sorted(p.name for p in paths)
        assert np.allclose(import_pgm_sequence(tmp_path).data.ravel(), vals.ravel(), atol=1 / 65535)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ShapeError):
            import_pgm_sequence(tmp_path)

    def test_mixed_sizes(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((4, 4)), maxval=255)
        write_pgm(tmp_path / "b.pgm", np.zeros((4, 5)), maxval=255)
        with pytest.raises(ShapeError):
            import_pgm_sequence(tmp_path)

    def test_non_pgm(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(FormatError):
            import_pgm_sequence(tmp_path)

    def test_comments_and_16_bit(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n65535\n\x00\x01\xff\xff")
        img, maxval = read_pgm(tmp_path / "c.pgm")
        assert maxval == 65535
        assert img.tolist() == [[1, 65535]]

    def test_export_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError):
            export_pgm_sequence(FeatureVolume(np.full((1, 1, 1), 1.5)), tmp_path)
