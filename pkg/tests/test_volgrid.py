import os
import struct
import tempfile
import unittest

import numpy as np
import pytest

from fusenet.exceptions import (
    BadConfig,
    BadMagic,
    HeaderMismatch,
    ShapeMismatch,
    TargetSmaller,
    UnsupportedDtype,
)
from fusenet.volgrid import (
    MaskVolume,
    MultiChannelVolume,
    ScalarVolume,
    binarize_mask,
    center_crop,
    concat_channels,
    pad_mask_to,
    pad_to,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)


def _rand_vol(shape: tuple, seed: int = 0, spacing: tuple = (1., 1.5, 2.)) -> ScalarVolume:
    return ScalarVolume(np.random.default_rng(seed).normal(size=shape), spacing)


class TestVolumeTypes (unittest.TestCase):

    def test_dims_are_xyz(self) -> None:
        v = ScalarVolume(np.zeros((4, 3, 2)))
        self.assertEqual(v.dims, (2, 3, 4))

    def test_from_values_x_fastest(self) -> None:
        v = ScalarVolume.from_values((2, 1, 1), (1, 1, 1), [5., 7.])
        self.assertEqual(v.array[0, 0, 0], 5.)
        self.assertEqual(v.array[0, 0, 1], 7.)

    def test_from_values_count_mismatch(self) -> None:
        self.assertRaises(ShapeMismatch, ScalarVolume.from_values,
                          (2, 2, 2), (1, 1, 1), [0.] * 7)

    def test_nan_rejected(self) -> None:
        a = np.zeros((2, 2, 2))
        a[0, 0, 0] = np.nan
        self.assertRaises(ValueError, ScalarVolume, a)

    def test_non_positive_spacing(self) -> None:
        self.assertRaises(BadConfig, ScalarVolume, np.zeros((2, 2, 2)), (1, 0, 1))

    def test_arrays_read_only(self) -> None:
        v = _rand_vol((2, 2, 2))
        with self.assertRaises(ValueError):
            v.array[0, 0, 0] = 1.

    def test_mask_label_set(self) -> None:
        m = MaskVolume(np.array([[[0, 2]]]), label_set=(1, 2))
        self.assertEqual(m.label_set, frozenset({0, 1, 2}))
        self.assertRaises(ValueError, MaskVolume, np.array([[[0, 3]]]), label_set=(1,))

    def test_multichannel_from_channels(self) -> None:
        a, b = _rand_vol((2, 3, 4), 0), _rand_vol((2, 3, 4), 1)
        mc = MultiChannelVolume.from_channels([a, b])
        self.assertEqual(mc.channels, 2)
        self.assertEqual(mc.channel(1), b)

    def test_multichannel_mismatch(self) -> None:
        a, b = _rand_vol((2, 3, 4)), _rand_vol((2, 3, 5))
        self.assertRaises(ShapeMismatch, MultiChannelVolume.from_channels, [a, b])


class TestContainerIO (unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_roundtrip_channel_counts(self) -> None:
        for c in (1, 2, 13, 60):
            arr = np.random.default_rng(c).normal(size=(c, 3, 4, 5)).astype(np.float32)
            v = MultiChannelVolume(arr, (0.5, 1., 2.))
            p = os.path.join(self.dir, "v{}.vgr".format(c))
            write_volume(v, p)
            self.assertEqual(read_volume(p), v)

    def test_write_is_deterministic(self) -> None:
        v = _rand_vol((3, 3, 3))
        p1, p2 = os.path.join(self.dir, "a.vgr"), os.path.join(self.dir, "b.vgr")
        write_volume(v, p1)
        write_volume(v, p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_header_layout(self) -> None:
        p = os.path.join(self.dir, "h.vgr")
        write_volume(ScalarVolume(np.zeros((1, 1, 2))), p)
        with open(p, "rb") as f:
            raw = f.read()
        self.assertEqual(raw[:4], b"VGR1")
        (h_len,) = struct.unpack("<I", raw[4:8])
        self.assertEqual(len(raw), 8 + h_len + 2 * 4)

    def test_bad_magic(self) -> None:
        p = os.path.join(self.dir, "bad.vgr")
        with open(p, "wb") as f:
            f.write(b"NOPE" + b"\0" * 16)
        self.assertRaises(BadMagic, read_volume, p)

    def test_truncated_payload(self) -> None:
        p = os.path.join(self.dir, "t.vgr")
        write_volume(_rand_vol((2, 2, 2)), p)
        with open(p, "rb") as f:
            raw = f.read()
        with open(p, "wb") as f:
            f.write(raw[:-1])
        self.assertRaises(HeaderMismatch, read_volume, p)

    def test_unsupported_dtype(self) -> None:
        p = os.path.join(self.dir, "d.vgr")
        header = b'{"channels":1,"dims":[1,1,1],"dtype":"f64","spacing_mm":[1,1,1]}'
        with open(p, "wb") as f:
            f.write(b"VGR1" + struct.pack("<I", len(header)) + header + b"\0" * 8)
        self.assertRaises(UnsupportedDtype, read_volume, p)

    def test_incomplete_header(self) -> None:
        p = os.path.join(self.dir, "h.vgr")
        for header in (b'{"channels":1,"dtype":"f32","spacing_mm":[1,1,1]}',
                       b'{"channels":1,"dims":[1,1],"dtype":"f32","spacing_mm":[1,1,1]}',
                       b'{"channels":"one","dims":[1,1,1],"dtype":"f32","spacing_mm":[1,1,1]}',
                       b'[1, 2, 3]'):
            with open(p, "wb") as f:
                f.write(b"VGR1" + struct.pack("<I", len(header)) + header + b"\0" * 4)
            self.assertRaises(HeaderMismatch, read_volume, p)

    def test_mask_roundtrip(self) -> None:
        m = MaskVolume(np.array([[[0, 1], [2, 3]]], dtype=np.uint8), (2., 2., 2.))
        p = os.path.join(self.dir, "m.mask.vgr")
        write_mask(m, p)
        self.assertEqual(read_mask(p), m)

    def test_read_mask_rejects_real(self) -> None:
        p = os.path.join(self.dir, "r.vgr")
        write_volume(_rand_vol((2, 2, 2)), p)
        self.assertRaises(UnsupportedDtype, read_mask, p)


class TestVolumeOps (unittest.TestCase):

    def test_concat_identity(self) -> None:
        v = MultiChannelVolume.from_channels([_rand_vol((2, 2, 2))])
        e = MultiChannelVolume.empty(v.dims, v.spacing_mm)
        self.assertEqual(concat_channels(v, e), v)
        self.assertEqual(concat_channels(e, v), v)

    def test_concat_order(self) -> None:
        a = MultiChannelVolume.from_channels([_rand_vol((2, 2, 2), 0)])
        b = MultiChannelVolume.from_channels([_rand_vol((2, 2, 2), 1)])
        ab = concat_channels(a, b)
        self.assertEqual(ab.channel(0), a.channel(0))
        self.assertEqual(ab.channel(1), b.channel(0))

    def test_concat_spacing_mismatch(self) -> None:
        a = MultiChannelVolume.from_channels([_rand_vol((2, 2, 2), spacing=(1, 1, 1))])
        b = MultiChannelVolume.from_channels([_rand_vol((2, 2, 2), spacing=(2, 2, 2))])
        self.assertRaises(ShapeMismatch, concat_channels, a, b)

    def test_pad_places_floor_half_low(self) -> None:
        v = ScalarVolume(np.ones((1, 1, 1)))
        p = pad_to(v, (4, 1, 1), fill=-1.)
        np.testing.assert_array_equal(p.array[0, 0], [-1., 1., -1., -1.])

    def test_pad_then_crop_identity(self) -> None:
        v = _rand_vol((3, 4, 5))
        self.assertEqual(center_crop(pad_to(v, (8, 9, 10)), v.dims), v)

    def test_pad_target_smaller(self) -> None:
        self.assertRaises(TargetSmaller, pad_to, _rand_vol((3, 3, 3)), (2, 3, 3))

    def test_pad_mask_keeps_labels(self) -> None:
        m = MaskVolume(np.full((2, 2, 2), 3), label_set=(1, 2, 3))
        p = pad_mask_to(m, (4, 4, 4))
        self.assertEqual(int((p.array == 3).sum()), 8)
        self.assertEqual(p.label_set, m.label_set)

    def test_binarize_lungs(self) -> None:
        m = MaskVolume(np.array([[[0, 1, 2, 3]]]))
        b = binarize_mask(m, (2, 3))
        np.testing.assert_array_equal(b.array[0, 0], [0, 0, 1, 1])

    def test_binarize_empty_labels(self) -> None:
        with pytest.raises(BadConfig):
            binarize_mask(MaskVolume(np.zeros((1, 1, 1))), ())
