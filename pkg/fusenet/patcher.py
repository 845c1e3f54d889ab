"""
Mask guided extraction of multi-channel patches.

Centers and patch dims are ``(x, y, z)`` triples like volume dims.
"""
import logging
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from smqtk_core import Configurable

from fusenet.exceptions import BadConfig, NoForeground, ShapeMismatch
from fusenet.utils import stable_seed
from fusenet.volgrid import DIMS_T, MaskVolume, MultiChannelVolume, _as_dims


LOG = logging.getLogger(__name__)

CENTER_T = Tuple[int, int, int]
#: Patches sampled per scan at inference.
INFERENCE_PATCHES = 6


class PatchSpec (Configurable):
    """
    :param patch_dims: Patch ``(x, y, z)`` dims.
    :param channels: Channels of every patch (CT plus aggregate).
    :param guide_labels: Mask labels patch centers are drawn from.
    """

    def __init__(self, patch_dims: Sequence[int] = (112, 112, 112),
                 channels: int = 2, guide_labels: Iterable[int] = (2, 3)):
        self.patch_dims: DIMS_T = _as_dims(patch_dims)
        if int(channels) < 1:
            raise BadConfig("Patches need at least one channel")
        self.channels = int(channels)
        self.guide_labels = tuple(sorted(set(int(v) for v in guide_labels)))
        if not self.guide_labels:
            raise BadConfig("At least one guide label is required")

    def get_config(self) -> Dict[str, Any]:
        return {
            "patch_dims": list(self.patch_dims),
            "channels": self.channels,
            "guide_labels": list(self.guide_labels),
        }


def sample_centers(mask: MaskVolume, guide_labels: Iterable[int], n: int,
                   rng_seed: int) -> List[CENTER_T]:
    """
    Draw ``n`` voxel coordinates uniformly, with replacement, from voxels
    whose label is among ``guide_labels``.

    :raises NoForeground: No voxel carries a guide label.
    """
    if n < 1:
        raise BadConfig("At least one center must be requested")
    candidates = np.flatnonzero(np.isin(mask.array, list(guide_labels)))
    if candidates.size == 0:
        raise NoForeground("No voxel matches guide labels {}"
                           .format(sorted(guide_labels)))
    rng = np.random.default_rng(rng_seed)
    picks = candidates[rng.integers(0, candidates.size, size=n)]
    zs, ys, xs = np.unravel_index(picks, mask.array.shape)
    return [(int(x), int(y), int(z)) for x, y, z in zip(xs, ys, zs)]


def box_start(center: Sequence[int], vol_dims: Sequence[int],
              patch_dims: Sequence[int]) -> CENTER_T:
    """
    Low corner of the patch box along ``(x, y, z)``.

    The box is centered on ``center`` and shifted to lie inside the volume.
    Along axes where the volume is smaller than the patch the box starts
    before the volume so the volume sits centered in it.

    >>> box_start((16, 16, 16), (64, 64, 64), (32, 32, 32))
    (0, 0, 0)
    >>> box_start((10, 10, 10), (20, 20, 20), (32, 32, 32))
    (-6, -6, -6)
    """
    out = []
    for c, s, p in zip(center, vol_dims, patch_dims):
        if s >= p:
            out.append(int(min(max(c - p // 2, 0), s - p)))
        else:
            out.append(-((p - s) // 2))
    return tuple(out)  # type: ignore


def crop_box_array(a: np.ndarray, start_zyx: Sequence[int], size_zyx: Sequence[int]) -> np.ndarray:
    """
    Crop the trailing three axes of ``a`` to a box, zero-filling any part of
    the box outside of the array.
    """
    lead = a.shape[:-3]
    out = np.zeros(lead + tuple(size_zyx), dtype=a.dtype)
    src = [slice(None)] * len(lead)
    dst = [slice(None)] * len(lead)
    for st, sz, dim in zip(start_zyx, size_zyx, a.shape[-3:]):
        lo, hi = max(st, 0), min(st + sz, dim)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - st, hi - st))
    out[tuple(dst)] = a[tuple(src)]
    return out


def extract_patch(vol: MultiChannelVolume, center: Sequence[int],
                  patch_dims: Sequence[int]) -> MultiChannelVolume:
    """
    Crop all channels to the same ``patch_dims`` box around ``center``.
    """
    px, py, pz = _as_dims(patch_dims)
    sx, sy, sz = box_start(center, vol.dims, (px, py, pz))
    return MultiChannelVolume(
        crop_box_array(vol.array, (sz, sy, sx), (pz, py, px)), vol.spacing_mm
    )


def inference_seed(scan_id: str) -> int:
    return stable_seed("inference:" + scan_id)


def training_seed(scan_id: str, seed: int, epoch: int) -> int:
    return stable_seed("train:{}:{}:{}".format(seed, epoch, scan_id))


def inference_centers(mask: MaskVolume, spec: PatchSpec, seed: Union[int, str],
                      n: int = INFERENCE_PATCHES) -> List[CENTER_T]:
    s = inference_seed(seed) if isinstance(seed, str) else int(seed)
    return sample_centers(mask, spec.guide_labels, n, s)


def inference_patches(vol: MultiChannelVolume, mask: MaskVolume, spec: PatchSpec,
                      n: int = INFERENCE_PATCHES,
                      seed: Union[int, str] = 0) -> List[MultiChannelVolume]:
    """
    The fixed patch set a scan is classified from.

    :param seed: Integer seed, or a scan id from which a stable seed is
        derived.

    :raises NoForeground: The mask has no guide label voxels.
    """
    if vol.channels != spec.channels:
        raise ShapeMismatch("Volume holds {} channels, spec expects {}"
                            .format(vol.channels, spec.channels))
    return [extract_patch(vol, c, spec.patch_dims)
            for c in inference_centers(mask, spec, seed, n)]
