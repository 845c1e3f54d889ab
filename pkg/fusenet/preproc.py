"""
Scan preparation: isotropic resampling, HU clipping, window normalization and
padding to the network input size.
"""
import hashlib
import json
import logging
import os.path as osp
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage

from smqtk_core import Configurable
from smqtk_dataprovider.utils.file import safe_create_dir
from smqtk_descriptors.utils import parallel_map

from fusenet.exceptions import BadConfig, DegenerateWindow, EmptyVolume
from fusenet.utils import worker_count
from fusenet.volgrid import (
    DIMS_T,
    SPACING_T,
    MaskVolume,
    ScalarVolume,
    _as_dims,
    _as_spacing,
    pad_array,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)


LOG = logging.getLogger(__name__)

INTERPOLATION_ORDER = {
    "trilinear": 1,
    "cubic_bspline": 3,
}


class PreprocConfig (Configurable):
    """
    Scan preparation parameters.

    :param target_spacing_mm: Output voxel size along ``(x, y, z)``.
    :param hu_window: ``(low, high)`` HU clipping window, mapped onto
        ``[0, 1]`` by normalization.
    :param target_dims: Minimum output ``(x, y, z)`` dims; smaller volumes are
        center-padded with zeros.
    :param interpolation: One of ``trilinear`` or ``cubic_bspline``.

    :raises BadConfig: Invalid spacing, dims, window or interpolation name.
    """

    def __init__(
        self,
        target_spacing_mm: Sequence[float] = (2., 2., 2.),
        hu_window: Sequence[float] = (-1000., 800.),
        target_dims: Sequence[int] = (112, 112, 112),
        interpolation: str = "cubic_bspline",
    ):
        self.target_spacing_mm: SPACING_T = _as_spacing(target_spacing_mm)
        self.target_dims: DIMS_T = _as_dims(target_dims)
        w = tuple(float(v) for v in hu_window)
        if len(w) != 2 or not w[0] < w[1]:
            raise BadConfig("HU window must be (low, high) with low < high, "
                            "given {}".format(w))
        self.hu_window: Tuple[float, float] = w  # type: ignore
        if interpolation not in INTERPOLATION_ORDER:
            raise BadConfig("Unknown interpolation '{}', expected one of {}"
                            .format(interpolation, sorted(INTERPOLATION_ORDER)))
        self.interpolation = interpolation

    def get_config(self) -> Dict[str, Any]:
        return {
            "target_spacing_mm": list(self.target_spacing_mm),
            "hu_window": list(self.hu_window),
            "target_dims": list(self.target_dims),
            "interpolation": self.interpolation,
        }

    def config_hash(self) -> str:
        """ Short stable digest of this configuration, used as a cache key. """
        s = json.dumps(self.get_config(), sort_keys=True)
        return hashlib.sha1(s.encode("utf-8")).hexdigest()[:12]

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, PreprocConfig) and self.get_config() == other.get_config()


def bspline_kernel_weights(t: float) -> Tuple[float, float, float, float]:
    """
    Uniform cubic B-spline basis weights for the four samples around a point
    at fractional offset ``t`` past the second sample.

    >>> bspline_kernel_weights(0.0) == (1/6, 4/6, 1/6, 0.0)
    True
    """
    if not 0. <= t < 1.:
        raise ValueError("Offset must lie in [0, 1), given {}".format(t))
    t2 = t * t
    t3 = t2 * t
    return (
        (1. - t) ** 3 / 6.,
        (3. * t3 - 6. * t2 + 4.) / 6.,
        (-3. * t3 + 3. * t2 + 3. * t + 1.) / 6.,
        t3 / 6.,
    )


def resampled_dims(dims: Sequence[int], spacing_mm: Sequence[float],
                   target_spacing_mm: Sequence[float]) -> DIMS_T:
    """
    Output dims for resampling, rounding half up and never below 1.

    >>> resampled_dims((64, 64, 64), (1., 1., 1.), (2., 2., 2.))
    (32, 32, 32)
    >>> resampled_dims((3, 5, 1), (1., 1., 1.), (2., 2., 4.))
    (2, 3, 1)
    """
    out = tuple(
        max(1, int(np.floor(d * s / t + 0.5)))
        for d, s, t in zip(dims, spacing_mm, target_spacing_mm)
    )
    return out  # type: ignore


def _resample_array(a: np.ndarray, spacing_mm: SPACING_T,
                    target_spacing_mm: SPACING_T, order: int) -> np.ndarray:
    if a.size == 0:
        raise EmptyVolume("Cannot resample an empty volume")
    z, y, x = a.shape
    ox, oy, oz = resampled_dims((x, y, z), spacing_mm, target_spacing_mm)
    # (z, y, x) scale from output index to input index.
    scale = np.array([target_spacing_mm[2] / spacing_mm[2],
                      target_spacing_mm[1] / spacing_mm[1],
                      target_spacing_mm[0] / spacing_mm[0]])
    # Output voxel centers land on input physical positions.
    offset = 0.5 * scale - 0.5
    # Spline orders > 1 run without prefiltering: the smoothing B-spline.
    return scipy.ndimage.affine_transform(
        a, scale, offset=offset, output_shape=(oz, oy, ox), order=order,
        mode="nearest", prefilter=False,
    )


def resample(vol: ScalarVolume, target_spacing_mm: Iterable[float],
             method: str = "cubic_bspline") -> ScalarVolume:
    """
    Resample a volume onto a grid of the given spacing.

    Output dims are ``max(1, round(dims * spacing / target_spacing))`` per
    axis. Values are interpolated at output voxel centers mapped into input
    physical space, with out-of-bounds samples clamped to the edge.

    :param vol: Volume to resample.
    :param target_spacing_mm: Output spacing along ``(x, y, z)``.
    :param method: ``trilinear`` or ``cubic_bspline``.

    :raises EmptyVolume: The input holds no voxels.
    :raises BadConfig: Unknown method or nonpositive spacing.

    :return: Resampled volume.
    """
    ts = _as_spacing(target_spacing_mm)
    try:
        order = INTERPOLATION_ORDER[method]
    except KeyError:
        raise BadConfig("Unknown interpolation '{}'".format(method))
    if ts == vol.spacing_mm:
        return vol
    out = _resample_array(vol.array.astype(np.float64), vol.spacing_mm, ts, order)
    LOG.debug("Resampled %s -> dims %s at %s mm (%s)",
              vol, out.shape[::-1], ts, method)
    return ScalarVolume(out.astype(np.float32), ts)


def resample_mask(mask: MaskVolume, target_spacing_mm: Iterable[float]) -> MaskVolume:
    """
    Nearest-neighbour resampling of a label volume with the same output dims
    rule as :func:`resample`.
    """
    ts = _as_spacing(target_spacing_mm)
    if ts == mask.spacing_mm:
        return mask
    out = _resample_array(mask.array, mask.spacing_mm, ts, 0)
    return MaskVolume(out, ts, mask.label_set)


def clip_hu(vol: ScalarVolume, window: Sequence[float]) -> ScalarVolume:
    low, high = float(window[0]), float(window[1])
    return ScalarVolume(np.clip(vol.array, low, high), vol.spacing_mm)


def normalize(vol: ScalarVolume, window: Sequence[float]) -> ScalarVolume:
    """
    Map ``[low, high]`` affinely onto ``[0, 1]``.

    :raises DegenerateWindow: ``low >= high``.
    """
    low, high = float(window[0]), float(window[1])
    if not low < high:
        raise DegenerateWindow("Window low ({}) must be below high ({})"
                               .format(low, high))
    v = (vol.array.astype(np.float64) - low) / (high - low)
    return ScalarVolume(v.astype(np.float32), vol.spacing_mm)


def _padded_dims(dims: Sequence[int], target: Sequence[int]) -> DIMS_T:
    return tuple(max(d, t) for d, t in zip(dims, target))  # type: ignore


def preprocess_scan(vol: ScalarVolume, cfg: PreprocConfig) -> ScalarVolume:
    """
    Resample, clip, normalize and pad a raw HU scan.

    Volumes larger than ``cfg.target_dims`` along an axis are left larger
    along that axis.
    """
    v = resample(vol, cfg.target_spacing_mm, cfg.interpolation)
    v = clip_hu(v, cfg.hu_window)
    v = normalize(v, cfg.hu_window)
    tx, ty, tz = _padded_dims(v.dims, cfg.target_dims)
    return ScalarVolume(pad_array(v.array, (tz, ty, tx), 0.), v.spacing_mm)


def preprocess_mask(mask: MaskVolume, cfg: PreprocConfig) -> MaskVolume:
    """
    Bring a truth mask onto the grid :func:`preprocess_scan` produces.
    """
    m = resample_mask(mask, cfg.target_spacing_mm)
    tx, ty, tz = _padded_dims(m.dims, cfg.target_dims)
    return MaskVolume(pad_array(m.array, (tz, ty, tx), 0), m.spacing_mm,
                      m.label_set)


class PreprocessCache (object):
    """
    On-disk cache of preprocessed scans and masks keyed by scan id and
    preprocessing configuration.

    :param cache_dir: Directory to store VGR files in.
    :param cfg: Preprocessing configuration the cached entries belong to.
    """

    def __init__(self, cache_dir: str, cfg: PreprocConfig):
        self.cache_dir = osp.abspath(osp.expanduser(cache_dir))
        self.cfg = cfg
        self._key = cfg.config_hash()

    def volume_path(self, scan_id: str) -> str:
        return osp.join(self.cache_dir, "{}.{}.vgr".format(scan_id, self._key))

    def mask_path(self, scan_id: str) -> str:
        return osp.join(self.cache_dir, "{}.{}.mask.vgr".format(scan_id, self._key))

    def get_volume(self, scan_id: str) -> Optional[ScalarVolume]:
        p = self.volume_path(scan_id)
        if not osp.isfile(p):
            return None
        return read_volume(p).channel(0)

    def get_mask(self, scan_id: str) -> Optional[MaskVolume]:
        p = self.mask_path(scan_id)
        if not osp.isfile(p):
            return None
        return read_mask(p)

    def put_volume(self, scan_id: str, vol: ScalarVolume) -> None:
        safe_create_dir(self.cache_dir)
        write_volume(vol, self.volume_path(scan_id))

    def put_mask(self, scan_id: str, mask: MaskVolume) -> None:
        safe_create_dir(self.cache_dir)
        write_mask(mask, self.mask_path(scan_id))


PREPARED_T = Tuple[ScalarVolume, Optional[MaskVolume]]


def preprocess_record(record: Any, cfg: PreprocConfig,
                      cache: Optional[PreprocessCache] = None) -> PREPARED_T:
    """
    Preprocess one manifest record's volume and, when present, its mask.

    :param record: Object with ``scan_id``, ``volume_path`` and
        ``mask_path`` attributes (e.g. ``ScanRecord``).
    """
    vol = cache.get_volume(record.scan_id) if cache else None
    if vol is None:
        raw = read_volume(record.volume_path).channel(0)
        vol = preprocess_scan(raw, cfg)
        if cache:
            cache.put_volume(record.scan_id, vol)
    mask = None
    if record.mask_path:
        mask = cache.get_mask(record.scan_id) if cache else None
        if mask is None:
            mask = preprocess_mask(read_mask(record.mask_path), cfg)
            if cache:
                cache.put_mask(record.scan_id, mask)
    return vol, mask


def preprocess_many(records: Iterable[Any], cfg: PreprocConfig,
                    cache: Optional[PreprocessCache] = None,
                    threads: Optional[int] = None) -> List[PREPARED_T]:
    """
    Preprocess many records in parallel. Results are in input order.

    :param threads: Worker cap. Defaults to ``FUSENET_THREADS`` or all cores.
    """
    records = list(records)
    LOG.info("Preprocessing %d scans", len(records))
    return list(parallel_map(
        lambda r: preprocess_record(r, cfg, cache), records,
        cores=worker_count(threads), use_multiprocessing=False, ordered=True,
    ))
