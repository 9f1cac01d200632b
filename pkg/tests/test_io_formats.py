import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereorefine.geometry import CameraRig, ScalarField
from stereorefine.imaging import Image
from stereorefine.io_formats import (FormatError, Manifest, ManifestEntry,
                                     ingest_external_disparity, load_checkpoint,
                                     read_checkpoint_tensors, read_manifest,
                                     read_pfm, read_pgm, read_ppm,
                                     save_checkpoint, write_checkpoint_tensors,
                                     write_manifest, write_pfm, write_pgm,
                                     write_ppm)
from stereorefine.refine import HeadMode, UNetConfig, build_unet


class TestPfm:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        f = ScalarField(rng.standard_normal((3, 4)).astype(np.float32))
        p = tmp_path / "a.pfm"
        write_pfm(f, p)
        g = read_pfm(p)
        np.testing.assert_array_equal(g.values, f.values)
        assert g.valid.all()
        # second write produces identical bytes
        b1 = p.read_bytes()
        write_pfm(g, p)
        assert p.read_bytes() == b1

    def test_header_layout(self, tmp_path):
        f = ScalarField(np.zeros((3, 4)))
        payload = write_pfm(f, tmp_path / "z.pfm")
        assert payload.startswith(b"Pf\n4 3\n-1.0\n")
        assert len(payload) == len(b"Pf\n4 3\n-1.0\n") + 4 * 3 * 4

    def test_invalid_pixels_survive_as_nan(self, tmp_path):
        valid = np.array([[True, False], [True, True]])
        f = ScalarField(np.array([[1.0, 0.0], [2.0, 3.0]]), valid)
        p = tmp_path / "m.pfm"
        write_pfm(f, p)
        g = read_pfm(p)
        np.testing.assert_array_equal(g.valid, valid)
        assert g.values[0, 1] == 0.0

    def test_rows_stored_bottom_to_top(self, tmp_path):
        f = ScalarField(np.array([[1.0, 2.0], [3.0, 4.0]]))
        payload = write_pfm(f, tmp_path / "r.pfm")
        data = np.frombuffer(payload[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
        np.testing.assert_array_equal(data, [3.0, 4.0, 1.0, 2.0])

    def test_big_endian_twin_reads_same(self, tmp_path):
        rng = np.random.default_rng(1)
        vals = rng.standard_normal((2, 3)).astype(np.float32)
        le = b"Pf\n3 2\n-1.0\n" + np.flipud(vals).astype("<f4").tobytes()
        be = b"Pf\n3 2\n1.0\n" + np.flipud(vals).astype(">f4").tobytes()
        (tmp_path / "le.pfm").write_bytes(le)
        (tmp_path / "be.pfm").write_bytes(be)
        a = read_pfm(tmp_path / "le.pfm")
        b = read_pfm(tmp_path / "be.pfm")
        np.testing.assert_array_equal(a.values, b.values)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pfm"
        p.write_bytes(b"Pf\n4 3\n-1.0\n" + b"\x00" * (4 * 4 * 3 - 1))
        with pytest.raises(FormatError, match="truncated"):
            read_pfm(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.pfm"
        p.write_bytes(b"P5\n1 1\n-1.0\n\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_pfm(p)

    def test_three_channel_rejected_for_fields(self, tmp_path):
        p = tmp_path / "c.pfm"
        p.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(FormatError, match="3-channel"):
            read_pfm(p)

    @given(st.integers(0, 2**31))
    @settings(max_examples=60)
    def test_arbitrary_float_bits_round_trip(self, bits):
        v = np.uint32(bits).view(np.float32)
        f = ScalarField(np.array([[np.float64(v)]]) if np.isfinite(v) else np.array([[0.0]]),
                        np.array([[np.isfinite(v)]]))
        path = Path("/tmp/_hyp_pfm.pfm")
        write_pfm(f, path)
        g = read_pfm(path)
        np.testing.assert_array_equal(g.values, f.values)
        np.testing.assert_array_equal(g.valid, f.valid)


class TestPnm:
    def test_pgm_quantization_round_half_up(self, tmp_path):
        p = tmp_path / "q.pgm"
        payload = write_pgm(np.array([[0.5, 0.0, 1.0]]), p)
        assert payload.endswith(bytes([128, 0, 255]))

    def test_pgm_round_trip_on_quantized(self, tmp_path):
        vals = np.arange(256).reshape(16, 16) / 255.0
        p = tmp_path / "g.pgm"
        write_pgm(vals, p)
        back = read_pgm(p)
        np.testing.assert_array_equal(back, vals)
        b1 = p.read_bytes()
        write_pgm(back, p)
        assert p.read_bytes() == b1

    def test_ppm_round_trip_on_quantized(self, tmp_path):
        rng = np.random.default_rng(2)
        img = Image(rng.integers(0, 256, (5, 7, 3)) / 255.0)
        p = tmp_path / "c.ppm"
        write_ppm(img, p)
        back = read_ppm(p)
        np.testing.assert_array_equal(back.values, img.values)

    def test_maxval_not_255_rejected(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 1\n65535\n\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="maxval"):
            read_pgm(p)

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
        back = read_pgm(p)
        np.testing.assert_allclose(back, np.array([[1, 2]]) / 255.0)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\x00")
        with pytest.raises(FormatError, match="truncated"):
            read_ppm(p)


class TestManifest:
    def test_round_trip(self, tmp_path):
        man = Manifest(CameraRig(0.54, 480.0),
                       [ManifestEntry("s0/left.ppm", "s0/right.ppm", "s0/z_gt.pfm",
                                      "s0/d_gt.pfm", "s0/valid.pgm")],
                       d_max=72)
        p = tmp_path / "manifest.tsv"
        write_manifest(man, p)
        back = read_manifest(p)
        assert back.rig == man.rig
        assert back.d_max == 72
        assert back.entries == man.entries
        b1 = p.read_bytes()
        write_manifest(back, p)
        assert p.read_bytes() == b1

    def test_optional_d_baseline_column(self, tmp_path):
        e = ManifestEntry("s0/left.ppm", "s0/right.ppm", "s0/z_gt.pfm",
                          "s0/d_gt.pfm", "s0/valid.pgm", "s0/d_baseline.pfm")
        p = tmp_path / "manifest.tsv"
        write_manifest(Manifest(CameraRig(0.5, 100.0), [e]), p)
        back = read_manifest(p)
        assert back.entries[0].d_baseline == "s0/d_baseline.pfm"
        assert back.d_max is None

    def test_missing_header_key(self, tmp_path):
        p = tmp_path / "manifest.tsv"
        p.write_text("baseline_m=0.5\n")
        with pytest.raises(FormatError):
            read_manifest(p)


class TestCheckpoint:
    def net(self):
        return build_unet(UNetConfig(levels=1, base_channels=4, in_channels=3),
                          seed=3, head=HeadMode.ADDITIVE)

    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        net = self.net()
        save_checkpoint(net, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.head is HeadMode.ADDITIVE
        assert loaded.cfg.levels == 1 and loaded.cfg.base_channels == 4

    def test_magic_and_version(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(self.net(), p)
        raw = p.read_bytes()
        assert raw[:4] == b"DRCK"
        assert struct.unpack("<I", raw[4:8])[0] == 1

    def test_crc_detects_payload_flip(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(self.net(), p)
        raw = bytearray(p.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="CRC"):
            load_checkpoint(p)

    def test_unknown_version_names_supported(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(self.net(), p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", 999)
        body = bytes(raw[:-4])
        p.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(FormatError, match="supported: 1"):
            load_checkpoint(p)

    def test_missing_tensor(self, tmp_path):
        p = tmp_path / "a.ckpt"
        write_checkpoint_tensors({"meta.arch": np.zeros(4)}, p)
        with pytest.raises(FormatError, match="missing tensor"):
            load_checkpoint(p)

    def test_duplicate_names_rejected_on_write(self, tmp_path):
        # dict keys are unique by construction; the reader still guards
        t = {"a": np.zeros(2), "b": np.ones(2)}
        p = tmp_path / "x.ckpt"
        write_checkpoint_tensors(t, p)
        assert set(read_checkpoint_tensors(p)) == {"a", "b"}

    def test_float32_at_rest(self, tmp_path):
        p = tmp_path / "a.ckpt"
        write_checkpoint_tensors({"w": np.array([0.1], dtype=np.float64)}, p)
        back = read_checkpoint_tensors(p)
        assert back["w"][0] == np.float64(np.float32(0.1))


def _tiny_dataset(tmp_path, n=2, w=16, h=8):
    from stereorefine import io_formats
    rig = CameraRig(0.5, 100.0)
    entries = []
    rng = np.random.default_rng(5)
    for i in range(n):
        left = Image(rng.random((h, w, 3)))
        right = Image(rng.random((h, w, 3)))
        z = ScalarField(np.full((h, w), 5.0))
        d = ScalarField(np.full((h, w), rig.bf / 5.0))
        entries.append(io_formats.write_sample_dir(
            tmp_path / f"sample_{i:05d}", left, right, z, d, np.ones((h, w), bool)))
    man = Manifest(rig, entries, d_max=12)
    write_manifest(man, tmp_path / "manifest.tsv")
    return tmp_path / "manifest.tsv", rig


class TestIngest:
    def test_ingest_registers_baseline(self, tmp_path):
        manifest_path, rig = _tiny_dataset(tmp_path)
        ext = tmp_path / "ext.pfm"
        write_pfm(ScalarField(np.full((8, 16), 20.0)), ext)
        entry = ingest_external_disparity(manifest_path, 0, ext)
        assert entry.d_baseline == "sample_00000/d_baseline.pfm"
        back = read_manifest(manifest_path)
        assert back.entries[0].d_baseline == entry.d_baseline
        assert back.entries[1].d_baseline is None
        got = read_pfm(tmp_path / entry.d_baseline)
        np.testing.assert_array_equal(got.values, 20.0)

    def test_dimension_mismatch(self, tmp_path):
        manifest_path, _ = _tiny_dataset(tmp_path)
        ext = tmp_path / "bad.pfm"
        write_pfm(ScalarField(np.zeros((4, 4))), ext)
        with pytest.raises(ValueError, match="4x4"):
            ingest_external_disparity(manifest_path, 0, ext)

    def test_index_out_of_range(self, tmp_path):
        manifest_path, _ = _tiny_dataset(tmp_path)
        ext = tmp_path / "ext.pfm"
        write_pfm(ScalarField(np.zeros((8, 16))), ext)
        with pytest.raises(IndexError):
            ingest_external_disparity(manifest_path, 7, ext)
