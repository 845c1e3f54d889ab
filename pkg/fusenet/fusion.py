"""
Feature map selection, body muting and the static (StFA) and dynamic (DyFA)
aggregation of segmentation features.
"""
import json
import logging
import os.path as osp
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from smqtk_dataprovider import from_uri
from smqtk_dataprovider.utils.file import safe_create_dir

from fusenet.exceptions import BadConfig, EmptyMask, IoFailure, ShapeMismatch
from fusenet.gradnet import Module, Parameter, Tensor, ops
from fusenet.segnet import LUNG_LABELS, FeatureTaps, SegNetModel, evaluating, mask_from_logits, volume_tensor
from fusenet.volgrid import MaskVolume, MultiChannelVolume, ScalarVolume, fit_array


LOG = logging.getLogger(__name__)

MAP_ID_T = Tuple[int, int]
#: Denominator guard of the lung affinity ratio.
SCORE_EPS = 1e-8
DEFAULT_K = 13


def map_ids(stack_channels: Sequence[int]) -> List[MAP_ID_T]:
    """
    ``(scale index, channel index)`` of every map in the order
    :func:`upsample_taps_to_reference` emits them.

    >>> map_ids((2, 1))
    [(0, 0), (0, 1), (1, 0)]
    """
    return [(s, c) for s, n in enumerate(stack_channels) for c in range(n)]


def upsample_taps_to_reference(taps: FeatureTaps, reference_dims: Sequence[int],
                               spacing_mm: Sequence[float] = (1., 1., 1.)) -> MultiChannelVolume:
    """
    Bring every tap to the reference grid: trilinear upsampling by its
    scale factor, then center crop or pad to ``reference_dims``.

    Only the first batch item is used.

    :param taps: Feature taps from the segmentation network.
    :param reference_dims: ``(x, y, z)`` dims of the preprocessed volume.
    :param spacing_mm: Spacing of the reference grid.

    :return: Channels of the 1/2 scale tap, then 1/4, then 1/8.
    """
    rx, ry, rz = (int(v) for v in reference_dims)
    chans = []
    for factor, tap in taps.scaled():
        if tap.ndim != 5:
            raise ShapeMismatch("Taps must be (N, C, D, H, W), given {}"
                                .format(tap.shape))
        up = ops.upsample_trilinear(tap.detach(), factor).data[0]
        chans.append(fit_array(up, (rz, ry, rx)))
    return MultiChannelVolume(np.concatenate(chans), spacing_mm)


def body_region(mask: MaskVolume) -> np.ndarray:
    """ Boolean ``(z, y, x)`` union of all non-background labels. """
    return mask.array != 0


def lung_region(mask: MaskVolume, lung_labels: Sequence[int] = LUNG_LABELS) -> np.ndarray:
    return np.isin(mask.array, list(lung_labels))


def mute_outside_body(features: MultiChannelVolume, body_mask: MaskVolume) -> MultiChannelVolume:
    """
    Set every channel to exactly 0.0 where ``body_mask`` is background.

    :raises ShapeMismatch: Dims differ.
    """
    if features.dims != body_mask.dims:
        raise ShapeMismatch("Features {} and body mask {} differ in dims"
                            .format(features, body_mask))
    inside = body_region(body_mask)[np.newaxis]
    return MultiChannelVolume(np.where(inside, features.array, np.float32(0.)),
                              features.spacing_mm)


def extract_features(segnet: SegNetModel, vol: ScalarVolume) -> Tuple[MultiChannelVolume, MaskVolume]:
    """
    Run the frozen segmentation network over a preprocessed volume.

    :return: All tap channels on the volume's grid, muted outside the
        predicted body, and the predicted label mask.
    """
    with evaluating(segnet):
        logits, taps = segnet.forward_with_taps(volume_tensor(vol))
    mask = MaskVolume(mask_from_logits(logits.data[0]), vol.spacing_mm,
                      range(segnet.config.num_classes))
    feats = upsample_taps_to_reference(taps, vol.dims, vol.spacing_mm)
    return mute_outside_body(feats, mask), mask


class SelectionReport (object):
    """
    Lung affinity score of every feature map and the ``k`` maps selected.

    :param scores: Score per map, in feature channel order.
    :param k: Number of maps selected.
    :param ids: ``(scale, channel)`` identifier per map. Defaults to
        ``(0, i)``.
    """

    def __init__(self, scores: Sequence[float], k: int = DEFAULT_K,
                 ids: Optional[Sequence[MAP_ID_T]] = None):
        self.scores = [float(s) for s in scores]
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("Scores must be finite")
        if not 1 <= k <= len(self.scores):
            raise BadConfig("Cannot select {} of {} maps".format(k, len(self.scores)))
        self.k = int(k)
        self.ids: List[MAP_ID_T] = [tuple(i) for i in ids] if ids is not None \
            else [(0, i) for i in range(len(self.scores))]  # type: ignore
        if len(self.ids) != len(self.scores):
            raise ShapeMismatch("{} ids given for {} scores"
                                .format(len(self.ids), len(self.scores)))
        # Highest score first, lower index on ties.
        ranked = sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))
        self.selected: List[int] = sorted(ranked[:self.k])

    @property
    def selected_ids(self) -> List[MAP_ID_T]:
        return [self.ids[i] for i in self.selected]

    def __eq__(self, other: Any) -> bool:
        return (isinstance(other, SelectionReport) and self.k == other.k
                and self.scores == other.scores and self.ids == other.ids)

    def __repr__(self) -> str:
        return "SelectionReport{{k: {}, selected: {}}}".format(self.k, self.selected_ids)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "scores": self.scores,
            "ids": [list(i) for i in self.ids],
            "selected": self.selected,
            "selected_ids": [list(i) for i in self.selected_ids],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        d = json.loads(text)
        return cls(d["scores"], d["k"], d["ids"])

    @classmethod
    def load(cls, uri: str) -> "SelectionReport":
        if osp.exists(uri):
            uri = osp.abspath(uri)
        return cls.from_json(from_uri(uri).get_bytes().decode("utf-8"))

    def write(self, path: str) -> None:
        try:
            safe_create_dir(osp.dirname(osp.abspath(path)))
            with open(path, "w") as f:
                f.write(self.to_json())
                f.write("\n")
        except OSError as ex:
            raise IoFailure("Failed to write selection '{}': {}".format(path, ex))


def lung_affinity_scores(features: MultiChannelVolume, lung: np.ndarray,
                         body: np.ndarray) -> np.ndarray:
    """
    Mean absolute activation inside the lungs over that of the body
    outside the lungs, per channel.

    :raises EmptyMask: No lung voxels, or no body voxels outside the lungs.
    """
    rest = np.logical_and(body, ~lung)
    if not lung.any():
        raise EmptyMask("Lung mask holds no voxels")
    if not rest.any():
        raise EmptyMask("Body mask holds no voxels outside of the lungs")
    a = np.abs(features.array.astype(np.float64))
    inside = a[:, lung].mean(axis=1)
    outside = a[:, rest].mean(axis=1)
    return inside / (outside + SCORE_EPS)


def select_maps(features: MultiChannelVolume, lung_mask: MaskVolume,
                body_mask: MaskVolume, k: int = DEFAULT_K,
                ids: Optional[Sequence[MAP_ID_T]] = None) -> SelectionReport:
    """
    Score every feature map by its lung affinity and keep the top ``k``.

    :param features: Muted feature maps.
    :param lung_mask: Mask whose lung labels (or, for a binary mask, label
        1) mark the lungs.
    :param body_mask: Mask whose non-background voxels are the body.
    :param k: Number of maps to select.
    :param ids: Map identifiers, see :func:`map_ids`.

    :raises EmptyMask: Lung or non-lung body region is empty.
    :raises ShapeMismatch: Mask dims differ from the features.
    """
    if lung_mask.dims != features.dims or body_mask.dims != features.dims:
        raise ShapeMismatch("Masks must match feature dims {}".format(features.dims))
    if lung_mask.label_set <= {0, 1}:
        lung = lung_mask.array == 1
    else:
        lung = lung_region(lung_mask)
    scores = lung_affinity_scores(features, lung, body_region(body_mask))
    return SelectionReport(scores, k, ids)


def merge_selection(reports: Sequence[SelectionReport], k: Optional[int] = None) -> SelectionReport:
    """
    Average per-map scores of several reports and select again.

    :raises ValueError: No reports, or reports over different maps.
    """
    if not reports:
        raise ValueError("At least one selection report is required")
    ids = reports[0].ids
    for r in reports[1:]:
        if r.ids != ids:
            raise ShapeMismatch("Reports cover different feature maps")
    scores = np.mean([r.scores for r in reports], axis=0)
    return SelectionReport(scores, k or reports[0].k, ids)


def select_channels(features: MultiChannelVolume, report: SelectionReport) -> MultiChannelVolume:
    if features.channels != len(report.scores):
        raise ShapeMismatch("Selection covers {} maps, features hold {}"
                            .format(len(report.scores), features.channels))
    return MultiChannelVolume(features.array[report.selected], features.spacing_mm)


def stfa(selected: MultiChannelVolume) -> ScalarVolume:
    """
    Voxelwise arithmetic mean over channels.

    Channels are sorted per voxel before summation so the result is
    bit-identical under any channel permutation.
    """
    if selected.channels < 1:
        raise ShapeMismatch("Static aggregation needs at least one channel")
    ordered = np.sort(selected.array, axis=0)
    return ScalarVolume(ordered.mean(axis=0, dtype=np.float64).astype(np.float32),
                        selected.spacing_mm)


class DyFAAggregator (Module):
    """
    Trainable 1x1x1 convolution mapping ``k`` maps to one channel.

    Initialized to weights ``1/k`` and zero bias, where it equals the
    static mean.
    """

    def __init__(self, num_maps: int = DEFAULT_K):
        super(DyFAAggregator, self).__init__()
        if num_maps < 1:
            raise BadConfig("At least one map is required")
        self.num_maps = int(num_maps)
        self.weight = Parameter(np.full((1, num_maps, 1, 1, 1), 1. / num_maps), "weight")
        self.bias = Parameter(np.zeros(1), "bias")

    def forward(self, selected: Tensor) -> Tensor:
        return dyfa_forward(self, selected)


def dyfa_forward(agg: DyFAAggregator, selected: Tensor) -> Tensor:
    """
    :raises ShapeMismatch: Channel count differs from the aggregator's.
    """
    if selected.ndim != 5 or selected.shape[1] != agg.num_maps:
        raise ShapeMismatch("Aggregator expects (N, {}, D, H, W), given {}"
                            .format(agg.num_maps, selected.shape))
    return ops.conv1x1x1(selected, agg.weight, agg.bias)
