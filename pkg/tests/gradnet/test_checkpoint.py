import os
import struct
import tempfile
import unittest

import numpy as np

from fusenet.exceptions import BadMagic, HeaderMismatch, IoFailure
from fusenet.gradnet import BatchNorm3d, Conv3d, Module, load_checkpoint, read_checkpoint, \
    save_checkpoint
from fusenet.gradnet.checkpoint import GNC_MAGIC, decode_checkpoint, encode_checkpoint


class _Pair (Module):

    def __init__(self, seed: int) -> None:
        super(_Pair, self).__init__()
        self.conv = Conv3d(2, 3, rng=np.random.default_rng(seed))
        self.norm = BatchNorm3d(3)


class TestCheckpoint (unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_save_load_roundtrip(self) -> None:
        src = _Pair(1)
        src.norm.running_mean[...] = [1., 2., 3.]
        src.conv.freeze()
        p = os.path.join(self.dir, "a.gnc")
        save_checkpoint(src, p, {"kind": "test", "epochs": 2})
        dst = _Pair(2)
        meta = load_checkpoint(dst, p)
        self.assertEqual(meta, {"kind": "test", "epochs": 2})
        for (_, a), (_, b) in zip(src.state_dict().items(), dst.state_dict().items()):
            np.testing.assert_array_equal(a, b)
        self.assertTrue(dst.conv.frozen)
        self.assertFalse(dst.norm.weight.frozen)

    def test_bytes_deterministic(self) -> None:
        p1, p2 = os.path.join(self.dir, "1.gnc"), os.path.join(self.dir, "2.gnc")
        save_checkpoint(_Pair(3), p1, {"b": 1, "a": 2})
        save_checkpoint(_Pair(3), p2, {"a": 2, "b": 1})
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_layout(self) -> None:
        raw = encode_checkpoint({"w": np.arange(3.)}, {"k": 1}, buffers=())
        self.assertEqual(raw[:4], GNC_MAGIC)
        (h_len,) = struct.unpack("<I", raw[4:8])
        self.assertEqual(len(raw), 8 + h_len + 3 * 4)
        np.testing.assert_array_equal(np.frombuffer(raw[-12:], "<f4"), [0., 1., 2.])

    def test_buffer_kind_recorded(self) -> None:
        raw = encode_checkpoint({"w": np.zeros(1), "rm": np.zeros(1)}, buffers=("rm",))
        self.assertIn(b'"kind":"buffer"', raw)
        tensors, meta, frozen = decode_checkpoint(raw)
        self.assertEqual(list(tensors), ["w", "rm"])
        self.assertEqual(meta, {})
        self.assertEqual(frozen, {"w": False, "rm": False})

    def test_bad_magic(self) -> None:
        self.assertRaises(BadMagic, decode_checkpoint, b"XXXX\0\0\0\0")

    def test_truncated_and_trailing(self) -> None:
        raw = encode_checkpoint({"w": np.zeros(4)})
        self.assertRaises(HeaderMismatch, decode_checkpoint, raw[:-2])
        self.assertRaises(HeaderMismatch, decode_checkpoint, raw + b"\0")

    def test_unreadable(self) -> None:
        self.assertRaises(IoFailure, read_checkpoint, os.path.join(self.dir, "nope.gnc"))
