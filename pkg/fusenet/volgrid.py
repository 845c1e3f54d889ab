"""
Volume data model and the VGR binary container.

Voxel arrays are held in ``[channel][z][y][x]`` order (x fastest) while the
public ``dims`` triples are reported as ``(x, y, z)`` voxel counts, matching
the container header.
"""
import json
import logging
import os.path as osp
import struct
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from smqtk_dataprovider.utils.file import safe_create_dir

from fusenet.exceptions import (
    BadConfig,
    BadMagic,
    HeaderMismatch,
    IoFailure,
    ShapeMismatch,
    TargetSmaller,
    UnsupportedDtype,
)


LOG = logging.getLogger(__name__)

VGR_MAGIC = b"VGR1"
DIMS_T = Tuple[int, int, int]
SPACING_T = Tuple[float, float, float]
# Header dtype token to on-disk numpy dtype. Always little-endian.
VGR_DTYPES: Dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}
#: Keys every container header carries.
VGR_HEADER_KEYS = ("channels", "dims", "dtype", "spacing_mm")


def _as_spacing(spacing_mm: Iterable[float]) -> SPACING_T:
    s = tuple(float(v) for v in spacing_mm)
    if len(s) != 3 or not all(v > 0 for v in s):
        raise BadConfig("Spacing must be three positive values, given {}"
                        .format(s))
    return s  # type: ignore


def _as_dims(dims: Iterable[int]) -> DIMS_T:
    d = tuple(int(v) for v in dims)
    if len(d) != 3 or not all(v >= 1 for v in d):
        raise BadConfig("Dims must be three positive integers, given {}"
                        .format(d))
    return d  # type: ignore


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


class ScalarVolume (object):
    """
    Single channel 32-bit real voxel grid with physical spacing.

    :param array: 3D array in ``(z, y, x)`` order.
    :param spacing_mm: Millimeters per voxel along ``(x, y, z)``.

    :raises ShapeMismatch: Array is not 3-dimensional or is empty.
    :raises ValueError: Array contains NaN values.
    """

    __slots__ = ('_array', 'spacing_mm')

    def __init__(self, array: np.ndarray, spacing_mm: Iterable[float] = (1., 1., 1.)):
        a = np.asarray(array, dtype=np.float32)
        if a.ndim != 3 or a.size == 0:
            raise ShapeMismatch("Scalar volume requires a non-empty 3D "
                                "array, given shape {}".format(a.shape))
        if np.isnan(a).any():
            raise ValueError("Scalar volume values may not contain NaN")
        self._array = _frozen(a)
        self.spacing_mm = _as_spacing(spacing_mm)

    @classmethod
    def from_values(cls, dims: Iterable[int], spacing_mm: Iterable[float],
                    values: Sequence[float]) -> "ScalarVolume":
        """
        Construct from a flat, x-fastest value sequence.
        """
        x, y, z = _as_dims(dims)
        v = np.asarray(values, dtype=np.float32)
        if v.size != x * y * z:
            raise ShapeMismatch("Value count {} does not match dims {}"
                                .format(v.size, (x, y, z)))
        return cls(v.reshape(z, y, x), spacing_mm)

    @property
    def array(self) -> np.ndarray:
        """ Read-only ``(z, y, x)`` voxel array. """
        return self._array

    @property
    def dims(self) -> DIMS_T:
        z, y, x = self._array.shape
        return x, y, z

    @property
    def values(self) -> np.ndarray:
        return self._array.reshape(-1)

    def __eq__(self, other: Any) -> bool:
        return (
            isinstance(other, ScalarVolume)
            and self.spacing_mm == other.spacing_mm
            and self._array.shape == other._array.shape
            and self._array.tobytes() == other._array.tobytes()
        )

    def __repr__(self) -> str:
        return "{}{{dims: {}, spacing_mm: {}}}".format(
            self.__class__.__name__, self.dims, self.spacing_mm
        )


class MaskVolume (object):
    """
    Label volume of small unsigned integers (``0`` is background).

    :param array: 3D integer array in ``(z, y, x)`` order.
    :param spacing_mm: Millimeters per voxel along ``(x, y, z)``.
    :param label_set: Declared label set. If None, the set of present labels
        plus background is used.

    :raises ValueError: Array holds labels outside of the declared set.
    """

    __slots__ = ('_array', 'spacing_mm', 'label_set')

    def __init__(self, array: np.ndarray, spacing_mm: Iterable[float] = (1., 1., 1.),
                 label_set: Optional[Iterable[int]] = None):
        a = np.asarray(array)
        if a.ndim != 3 or a.size == 0:
            raise ShapeMismatch("Mask volume requires a non-empty 3D array, "
                                "given shape {}".format(a.shape))
        if a.min() < 0 or a.max() > 255:
            raise ValueError("Mask labels must fit in an unsigned byte")
        a = a.astype(np.uint8)
        present = set(int(v) for v in np.unique(a))
        if label_set is None:
            labels = present | {0}
        else:
            labels = set(int(v) for v in label_set) | {0}
            if not present <= labels:
                raise ValueError("Mask holds labels {} outside of declared "
                                 "set {}".format(sorted(present - labels),
                                                 sorted(labels)))
        self._array = _frozen(a)
        self.spacing_mm = _as_spacing(spacing_mm)
        self.label_set = frozenset(labels)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def dims(self) -> DIMS_T:
        z, y, x = self._array.shape
        return x, y, z

    @property
    def labels(self) -> np.ndarray:
        return self._array.reshape(-1)

    def __eq__(self, other: Any) -> bool:
        return (
            isinstance(other, MaskVolume)
            and self.spacing_mm == other.spacing_mm
            and self._array.shape == other._array.shape
            and self._array.tobytes() == other._array.tobytes()
        )

    def __repr__(self) -> str:
        return "{}{{dims: {}, labels: {}}}".format(
            self.__class__.__name__, self.dims, sorted(self.label_set)
        )


class MultiChannelVolume (object):
    """
    Stack of scalar channels sharing dims and spacing.

    A zero-channel instance is permitted only as the identity element of
    :func:`concat_channels`.

    :param array: 4D array in ``(c, z, y, x)`` order.
    :param spacing_mm: Millimeters per voxel along ``(x, y, z)``.
    """

    __slots__ = ('_array', 'spacing_mm')

    def __init__(self, array: np.ndarray, spacing_mm: Iterable[float] = (1., 1., 1.)):
        a = np.asarray(array, dtype=np.float32)
        if a.ndim != 4 or 0 in a.shape[1:]:
            raise ShapeMismatch("Multi-channel volume requires a 4D array "
                                "with non-empty spatial axes, given shape {}"
                                .format(a.shape))
        if np.isnan(a).any():
            raise ValueError("Volume values may not contain NaN")
        self._array = _frozen(a)
        self.spacing_mm = _as_spacing(spacing_mm)

    @classmethod
    def from_channels(cls, channels: Sequence[ScalarVolume]) -> "MultiChannelVolume":
        if not channels:
            raise ShapeMismatch("At least one channel is required")
        ref = channels[0]
        for c in channels[1:]:
            if c.dims != ref.dims or c.spacing_mm != ref.spacing_mm:
                raise ShapeMismatch("Channels differ in dims or spacing "
                                    "({} vs {})".format(c, ref))
        return cls(np.stack([c.array for c in channels]), ref.spacing_mm)

    @classmethod
    def empty(cls, dims: Iterable[int], spacing_mm: Iterable[float]) -> "MultiChannelVolume":
        x, y, z = _as_dims(dims)
        return cls(np.zeros((0, z, y, x), dtype=np.float32), spacing_mm)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def channels(self) -> int:
        return self._array.shape[0]

    @property
    def dims(self) -> DIMS_T:
        _, z, y, x = self._array.shape
        return x, y, z

    def channel(self, i: int) -> ScalarVolume:
        return ScalarVolume(self._array[i], self.spacing_mm)

    def __eq__(self, other: Any) -> bool:
        return (
            isinstance(other, MultiChannelVolume)
            and self.spacing_mm == other.spacing_mm
            and self._array.shape == other._array.shape
            and self._array.tobytes() == other._array.tobytes()
        )

    def __repr__(self) -> str:
        return "{}{{channels: {}, dims: {}, spacing_mm: {}}}".format(
            self.__class__.__name__, self.channels, self.dims, self.spacing_mm
        )


VOLUME_T = Union[ScalarVolume, MultiChannelVolume, MaskVolume]


#
# Container IO
#

def _write_container(path: str, header: Dict[str, Any], payload: np.ndarray) -> None:
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    try:
        safe_create_dir(osp.dirname(osp.abspath(path)))
        with open(path, "wb") as f:
            f.write(VGR_MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            f.write(np.ascontiguousarray(payload).tobytes())
    except OSError as ex:
        raise IoFailure("Failed to write volume to '{}': {}".format(path, ex))
    LOG.debug("Wrote VGR container '%s' (%s)", path, header)


def _read_container(path: str) -> Tuple[Dict[str, Any], np.ndarray]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as ex:
        raise IoFailure("Failed to read volume from '{}': {}".format(path, ex))
    if raw[:4] != VGR_MAGIC:
        raise BadMagic("File '{}' does not begin with {!r} (found {!r})"
                       .format(path, VGR_MAGIC, raw[:4]))
    if len(raw) < 8:
        raise HeaderMismatch("Truncated header in '{}'".format(path))
    (h_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + h_len].decode("utf-8"))
    except ValueError as ex:
        raise HeaderMismatch("Unparsable header in '{}': {}".format(path, ex))
    missing = [k for k in VGR_HEADER_KEYS if not isinstance(header, dict) or k not in header]
    if missing:
        raise HeaderMismatch("Header of '{}' lacks {}".format(path, missing))
    dtype_tok = header["dtype"]
    if not isinstance(dtype_tok, str) or dtype_tok not in VGR_DTYPES:
        raise UnsupportedDtype("Unsupported dtype {!r} in '{}'"
                               .format(dtype_tok, path))
    dtype = VGR_DTYPES[dtype_tok]
    try:
        x, y, z = _as_dims(header["dims"])
        c = int(header["channels"])
    except (BadConfig, TypeError, ValueError) as ex:
        raise HeaderMismatch("Bad dims or channels in '{}': {}".format(path, ex))
    if c < 1:
        raise HeaderMismatch("Header of '{}' declares {} channels".format(path, c))
    payload = raw[8 + h_len:]
    expected = c * x * y * z * dtype.itemsize
    if len(payload) != expected:
        raise HeaderMismatch(
            "Payload of '{}' holds {} bytes, header implies {} "
            "(channels={}, dims={}, dtype={})"
            .format(path, len(payload), expected, c, (x, y, z), dtype_tok)
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(c, z, y, x)
    return header, arr


def write_volume(vol: Union[MultiChannelVolume, ScalarVolume], path: str) -> None:
    """
    Write a volume as a VGR container of ``f32`` values.

    Output is byte-deterministic: the JSON header is serialized with sorted
    keys and no optional whitespace.

    :param vol: Volume to write. Scalar volumes are written as one channel.
    :param path: Output file path. Missing parent directories are created.

    :raises IoFailure: The file could not be written.
    """
    if isinstance(vol, ScalarVolume):
        vol = MultiChannelVolume(vol.array[np.newaxis], vol.spacing_mm)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "channels": vol.channels,
        "dtype": "f32",
    }
    _write_container(path, header, vol.array.astype("<f4"))


def read_volume(path: str) -> MultiChannelVolume:
    """
    Read a VGR container into a multi-channel volume.

    Label (``u8``) containers are returned as real-valued channels; use
    :func:`read_mask` to retain integer labels.

    :param path: Path to the container file.

    :raises BadMagic: File does not begin with ``VGR1``.
    :raises HeaderMismatch: Payload length does not agree with the header.
    :raises UnsupportedDtype: Header declares an unknown dtype.
    :raises IoFailure: The file could not be read.
    """
    header, arr = _read_container(path)
    return MultiChannelVolume(arr.astype(np.float32), header["spacing_mm"])


def write_mask(mask: MaskVolume, path: str) -> None:
    header = {
        "dims": list(mask.dims),
        "spacing_mm": list(mask.spacing_mm),
        "channels": 1,
        "dtype": "u8",
    }
    _write_container(path, header, mask.array[np.newaxis])


def read_mask(path: str) -> MaskVolume:
    header, arr = _read_container(path)
    if header["dtype"] != "u8" or arr.shape[0] != 1:
        raise UnsupportedDtype("Mask container '{}' must hold a single u8 "
                               "channel".format(path))
    return MaskVolume(arr[0], header["spacing_mm"])


#
# Volume operations
#

def concat_channels(a: MultiChannelVolume, b: MultiChannelVolume) -> MultiChannelVolume:
    """
    Concatenate channels of ``b`` after those of ``a``.

    :raises ShapeMismatch: Dims or spacing differ.
    """
    if b.channels == 0:
        return a
    if a.channels == 0:
        return b
    if a.dims != b.dims or a.spacing_mm != b.spacing_mm:
        raise ShapeMismatch("Cannot concatenate {} with {}".format(a, b))
    return MultiChannelVolume(np.concatenate([a.array, b.array]), a.spacing_mm)


def _split_slack(slack: int) -> Tuple[int, int]:
    # Floor split, extra voxel to the high side.
    lo = slack // 2
    return lo, slack - lo


def pad_array(a: np.ndarray, target_shape: Sequence[int], fill: float = 0.) -> np.ndarray:
    """
    Center-pad the trailing ``len(target_shape)`` axes of ``a``.

    :raises TargetSmaller: Target is smaller than ``a`` along some axis.
    """
    lead = a.ndim - len(target_shape)
    widths = [(0, 0)] * lead
    for s, t in zip(a.shape[lead:], target_shape):
        if t < s:
            raise TargetSmaller("Target shape {} smaller than {}"
                                .format(tuple(target_shape), a.shape[lead:]))
        widths.append(_split_slack(t - s))
    if all(w == (0, 0) for w in widths):
        return a
    return np.pad(a, widths, mode="constant", constant_values=fill)


def crop_array(a: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    """
    Center-crop the trailing axes of ``a``, the inverse of :func:`pad_array`.
    """
    lead = a.ndim - len(target_shape)
    sl = [slice(None)] * lead
    for s, t in zip(a.shape[lead:], target_shape):
        if t > s:
            raise ShapeMismatch("Crop target {} larger than {}"
                                .format(tuple(target_shape), a.shape[lead:]))
        lo, _ = _split_slack(s - t)
        sl.append(slice(lo, lo + t))
    return a[tuple(sl)]


def fit_array(a: np.ndarray, target_shape: Sequence[int], fill: float = 0.) -> np.ndarray:
    """
    Center-crop or center-pad each trailing axis independently to match
    ``target_shape``.
    """
    lead = a.ndim - len(target_shape)
    crop_to = [min(s, t) for s, t in zip(a.shape[lead:], target_shape)]
    return pad_array(crop_array(a, crop_to), target_shape, fill)


def pad_to(vol: ScalarVolume, target_dims: Iterable[int], fill: float = 0.0) -> ScalarVolume:
    """
    Center ``vol`` inside a ``target_dims`` grid filled with ``fill``.

    Slack along each axis is split with the floor half on the low side.

    :param vol: Volume to pad.
    :param target_dims: ``(x, y, z)`` voxel counts, each >= the current dims.
    :param fill: Padding value.

    :raises TargetSmaller: Target smaller than ``vol`` on any axis.
    """
    tx, ty, tz = _as_dims(target_dims)
    return ScalarVolume(pad_array(vol.array, (tz, ty, tx), fill), vol.spacing_mm)


def center_crop(vol: ScalarVolume, target_dims: Iterable[int]) -> ScalarVolume:
    tx, ty, tz = _as_dims(target_dims)
    return ScalarVolume(crop_array(vol.array, (tz, ty, tx)), vol.spacing_mm)


def pad_mask_to(mask: MaskVolume, target_dims: Iterable[int]) -> MaskVolume:
    tx, ty, tz = _as_dims(target_dims)
    return MaskVolume(pad_array(mask.array, (tz, ty, tx), 0), mask.spacing_mm,
                      mask.label_set)


def binarize_mask(mask: MaskVolume, include_labels: Iterable[int]) -> MaskVolume:
    """
    Map voxels whose label is in ``include_labels`` to 1, all others to 0.

    :raises BadConfig: ``include_labels`` is empty.
    """
    include = sorted(set(int(v) for v in include_labels))
    if not include:
        raise BadConfig("At least one label must be included")
    return MaskVolume(np.isin(mask.array, include).astype(np.uint8),
                      mask.spacing_mm, (0, 1))
