"""
GNC1 checkpoint container: named tensors plus JSON metadata.

Layout: ``b"GNC1"``, unsigned 32-bit little-endian header length ``H``, ``H``
bytes of UTF-8 JSON header, then each tensor's little-endian f32 payload in
header table order. The header is ``{"tensors": [{"name", "shape", "kind",
"frozen"}, ...], "metadata": {...}}``.
"""
from collections import OrderedDict
import json
import logging
import os.path as osp
import struct
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from smqtk_dataprovider import from_uri
from smqtk_dataprovider.exceptions import InvalidUriError
from smqtk_dataprovider.utils.file import safe_create_dir

from fusenet.exceptions import BadMagic, HeaderMismatch, IoFailure
from fusenet.gradnet.module import Module


LOG = logging.getLogger(__name__)

GNC_MAGIC = b"GNC1"
_F32 = np.dtype("<f4")


def encode_checkpoint(tensors: Mapping[str, np.ndarray],
                      metadata: Optional[Mapping[str, Any]] = None,
                      frozen: Optional[Mapping[str, bool]] = None,
                      buffers: Tuple[str, ...] = ()) -> bytes:
    frozen = frozen or {}
    table = []
    payloads = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_F32)
        table.append({
            "name": name,
            "shape": list(a.shape),
            "kind": "buffer" if name in buffers else "parameter",
            "frozen": bool(frozen.get(name, False)),
        })
        payloads.append(a.tobytes())
    header = json.dumps({"tensors": table, "metadata": dict(metadata or {})},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([GNC_MAGIC, struct.pack("<I", len(header)), header] + payloads)


def decode_checkpoint(raw: bytes) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, Any], Dict[str, bool]]:
    """
    :return: Tensors by name in table order, metadata, and frozen flags.

    :raises BadMagic: Bytes do not begin with ``GNC1``.
    :raises HeaderMismatch: Header unparsable or payload length wrong.
    """
    if raw[:4] != GNC_MAGIC:
        raise BadMagic("Checkpoint does not begin with {!r} (found {!r})"
                       .format(GNC_MAGIC, raw[:4]))
    if len(raw) < 8:
        raise HeaderMismatch("Truncated checkpoint header")
    (h_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + h_len].decode("utf-8"))
    except ValueError as ex:
        raise HeaderMismatch("Unparsable checkpoint header: {}".format(ex))
    offset = 8 + h_len
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    frozen: Dict[str, bool] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if offset + n_bytes > len(raw):
            raise HeaderMismatch("Payload for '{}' truncated".format(entry["name"]))
        tensors[entry["name"]] = np.frombuffer(
            raw, dtype=_F32, count=n_bytes // _F32.itemsize, offset=offset
        ).reshape(shape).astype(np.float32)
        frozen[entry["name"]] = bool(entry.get("frozen", False))
        offset += n_bytes
    if offset != len(raw):
        raise HeaderMismatch("Checkpoint holds {} trailing bytes"
                             .format(len(raw) - offset))
    return tensors, header.get("metadata", {}), frozen


def module_entries(module: Module, prefix: str = "") -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, bool], Tuple[str, ...]]:
    """
    State, frozen flags and buffer names of a module, names prefixed.
    """
    state = OrderedDict((prefix + n, v) for n, v in module.state_dict().items())
    frozen = {prefix + n: p.frozen for n, p in module.named_parameters()}
    buffers = tuple(prefix + n for n, _ in module.named_buffers())
    return state, frozen, buffers


def write_checkpoint(path: str, tensors: Mapping[str, np.ndarray],
                     metadata: Optional[Mapping[str, Any]] = None,
                     frozen: Optional[Mapping[str, bool]] = None,
                     buffers: Tuple[str, ...] = ()) -> None:
    """
    :raises IoFailure: The file could not be written.
    """
    raw = encode_checkpoint(tensors, metadata, frozen, buffers)
    try:
        safe_create_dir(osp.dirname(osp.abspath(path)))
        with open(path, "wb") as f:
            f.write(raw)
    except OSError as ex:
        raise IoFailure("Failed to write checkpoint '{}': {}".format(path, ex))
    LOG.info("Wrote checkpoint '%s' (%d tensors, %d bytes)",
             path, len(tensors), len(raw))


def save_checkpoint(module: Module, path: str,
                    metadata: Optional[Mapping[str, Any]] = None) -> None:
    """
    Write a module's parameters and buffers with their frozen flags.

    Same module state and metadata always produce the same bytes.

    :raises IoFailure: The file could not be written.
    """
    state, frozen, buffers = module_entries(module)
    write_checkpoint(path, state, metadata, frozen, buffers)


def read_checkpoint(uri: str) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, Any], Dict[str, bool]]:
    """
    Read a checkpoint through a data element URI (plain paths included).
    """
    if osp.exists(uri):
        uri = osp.abspath(uri)
    try:
        raw = from_uri(uri).get_bytes()
    except (InvalidUriError, OSError, ValueError) as ex:
        raise IoFailure("Failed to read checkpoint '{}': {}".format(uri, ex))
    return decode_checkpoint(raw)


def load_checkpoint(module: Module, uri: str) -> Dict[str, Any]:
    """
    Load a checkpoint into ``module`` in place, restoring frozen flags.

    :return: The checkpoint metadata.
    """
    tensors, metadata, frozen = read_checkpoint(uri)
    module.load_state_dict(tensors)
    for n, p in module.named_parameters():
        p.frozen = frozen.get(n, False)
    return metadata
