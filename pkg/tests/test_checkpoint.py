import struct

import numpy as np
import pytest

from splat4d import checkpoint as ckpt
from splat4d import deform
from splat4d import scene as sc
from splat4d import rasterizer as ras

from conftest import orbit_camera, random_cloud


def small_cloud(rng, n=6):
    return random_cloud(rng, n, dtype=np.float32)


def small_field(seed=3, gate_mode=deform.GATE_START):
    f = deform.init_field(hidden=16, layers=4, seed=seed, gate_mode=gate_mode)
    # zero-init output carries no information; randomize so roundtrips
    # actually exercise the bytes
    g = np.random.default_rng(seed + 100)
    f.out_weight = g.normal(0, 0.05, f.out_weight.shape).astype(np.float32)
    f.out_bias = g.normal(0, 0.05, f.out_bias.shape).astype(np.float32)
    return f


def demo_meta():
    return ckpt.SequenceMeta(intervals=[(0.0, 1.0), (0.75, 1.75)],
                             overlaps=[(0.75, 1.0)], loop=False)


class TestRoundtrip:
    def test_cloud_arrays_bitwise(self, rng, tmp_path):
        cloud = small_cloud(rng)
        path = tmp_path / "a.ckpt"
        ckpt.save_checkpoint(path, cloud)
        back = ckpt.load_checkpoint(path).cloud
        assert back.positions.tobytes() == cloud.positions.tobytes()
        assert back.log_scales.tobytes() == cloud.log_scales.tobytes()
        assert back.opacities_raw.tobytes() == cloud.opacities_raw.tobytes()
        assert back.sh.tobytes() == cloud.sh.tobytes()
        assert back.positions.dtype == np.float32

    def test_save_of_load_is_file_identical(self, rng, tmp_path):
        cloud = small_cloud(rng)
        meta = demo_meta()
        fields = [small_field(1), small_field(2, deform.GATE_BOTH)]
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save_checkpoint(p1, cloud, fields, meta)
        b = ckpt.load_checkpoint(p1)
        ckpt.save_checkpoint(p2, b.cloud, b.fields, b.meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_field_architecture_and_weights(self, tmp_path):
        f = small_field(7, deform.GATE_BOTH)
        f.gate_exponent = 0.41
        f.clamp_half = 0.25
        cloud = sc.init_cloud(4, 0.3, seed=0)
        path = tmp_path / "f.ckpt"
        ckpt.save_checkpoint(path, cloud, [f])
        (g,) = ckpt.load_checkpoint(path).fields
        assert (g.hidden, g.layers, g.frequencies) == (16, 4, 4)
        assert g.gate_mode == deform.GATE_BOTH
        assert g.gate_exponent == 0.41
        assert g.clamp_half == 0.25
        for (name_a, a), (name_b, b) in zip(f.param_items(),
                                            g.param_items()):
            assert name_a == name_b
            assert a.tobytes() == b.tobytes()

    def test_field_displacements_bit_identical(self, rng, tmp_path):
        f = small_field(11)
        pos = rng.uniform(-0.4, 0.4, (20, 3))
        path = tmp_path / "f.ckpt"
        ckpt.save_checkpoint(path, sc.init_cloud(1, 0.3, seed=0), [f])
        (g,) = ckpt.load_checkpoint(path).fields
        for tau in (0.0, 0.37, 1.0):
            da, _ = deform.field_forward(f, pos, tau)
            db, _ = deform.field_forward(g, pos, tau)
            assert da.tobytes() == db.tobytes()

    def test_render_bit_identical(self, rng, tmp_path):
        cloud = small_cloud(rng, n=12)
        cam = orbit_camera(rng, width=24, height=24)
        path = tmp_path / "r.ckpt"
        ckpt.save_checkpoint(path, cloud)
        back = ckpt.load_checkpoint(path).cloud
        a = ras.render_forward(cloud, cam).image
        b = ras.render_forward(back, cam).image
        assert a.tobytes() == b.tobytes()

    def test_meta_roundtrip(self, rng, tmp_path):
        meta = ckpt.SequenceMeta(intervals=[(0.0, 1.0), (0.8, 1.8),
                                            (1.55, 2.55)],
                                 overlaps=[(0.8, 1.0), (1.55, 1.8)],
                                 loop=True)
        path = tmp_path / "m.ckpt"
        ckpt.save_checkpoint(path, small_cloud(rng), meta=meta)
        back = ckpt.load_checkpoint(path).meta
        assert back.intervals == meta.intervals
        assert back.overlaps == meta.overlaps
        assert back.loop is True

    def test_empty_cloud(self, tmp_path):
        cloud = sc.GaussianCloud(np.zeros((0, 3), np.float32),
                                 np.zeros(0, np.float32),
                                 np.zeros(0, np.float32),
                                 np.zeros((0, 3, 9), np.float32))
        path = tmp_path / "e.ckpt"
        ckpt.save_checkpoint(path, cloud)
        back = ckpt.load_checkpoint(path)
        assert back.cloud.n == 0
        assert back.fields == [] and back.meta is None

    def test_float64_state_saved_as_float32(self, rng, tmp_path):
        cloud = random_cloud(rng, 5, dtype=np.float64)
        path = tmp_path / "d.ckpt"
        ckpt.save_checkpoint(path, cloud)
        back = ckpt.load_checkpoint(path).cloud
        assert back.positions.dtype == np.float32
        np.testing.assert_array_equal(
            back.positions, cloud.positions.astype(np.float32))

    def test_loaded_arrays_writable(self, rng, tmp_path):
        path = tmp_path / "w.ckpt"
        ckpt.save_checkpoint(path, small_cloud(rng), [small_field()])
        b = ckpt.load_checkpoint(path)
        b.cloud.positions += 1.0
        b.fields[0].out_weight[:] = 0.0


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ckpt.FormatError, match="magic"):
            ckpt.load_checkpoint(path)

    def test_version_bump(self, rng, tmp_path):
        path = tmp_path / "v"
        ckpt.save_checkpoint(path, small_cloud(rng))
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(ckpt.UnsupportedVersionError):
            ckpt.load_checkpoint(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "t"
        ckpt.save_checkpoint(path, small_cloud(rng), [small_field()])
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(ckpt.FormatError, match="truncated"):
            ckpt.load_checkpoint(path)

    def test_trailing_garbage(self, rng, tmp_path):
        path = tmp_path / "g"
        ckpt.save_checkpoint(path, small_cloud(rng))
        path.write_bytes(path.read_bytes() + b"\x01\x02\x03\x04\x05")
        with pytest.raises(ckpt.FormatError):
            ckpt.load_checkpoint(path)

    def test_unknown_tag(self, rng, tmp_path):
        path = tmp_path / "u"
        ckpt.save_checkpoint(path, small_cloud(rng))
        path.write_bytes(path.read_bytes() + b"XTRA" + b"\x00" * 8)
        with pytest.raises(ckpt.FormatError, match="unknown section"):
            ckpt.load_checkpoint(path)

    def test_meta_overlap_count_checked_on_save(self, rng, tmp_path):
        meta = ckpt.SequenceMeta(intervals=[(0.0, 1.0), (0.8, 1.8)],
                                 overlaps=[])
        with pytest.raises(ValueError, match="overlap"):
            ckpt.save_checkpoint(tmp_path / "x", small_cloud(rng), meta=meta)

    def test_meta_needs_segments(self):
        with pytest.raises(ValueError, match="segment"):
            ckpt.SequenceMeta(intervals=[], overlaps=[]).validate()

    def test_duplicate_sequence_section(self, rng, tmp_path):
        path = tmp_path / "d"
        ckpt.save_checkpoint(path, small_cloud(rng), meta=demo_meta())
        raw = path.read_bytes()
        start = raw.index(ckpt.TAG_SEQUENCE)
        path.write_bytes(raw + raw[start:])
        with pytest.raises(ckpt.FormatError, match="duplicate"):
            ckpt.load_checkpoint(path)
