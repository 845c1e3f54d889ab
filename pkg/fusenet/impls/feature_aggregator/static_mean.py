from typing import Any, Dict, Optional

from fusenet.exceptions import ShapeMismatch
from fusenet.fusion import stfa
from fusenet.gradnet import Tensor, ops
from fusenet.interfaces.feature_aggregator import FeatureAggregator
from fusenet.volgrid import MultiChannelVolume, ScalarVolume


class StaticMeanAggregator (FeatureAggregator):
    """
    Static feature aggregation (StFA): the unweighted voxelwise mean of the
    selected maps. Holds no trainable state.

    :param num_maps: Required map count, or None to accept any.
    """

    def __init__(self, num_maps: Optional[int] = None):
        self._num_maps = None if num_maps is None else int(num_maps)

    @classmethod
    def is_usable(cls) -> bool:
        return True

    def get_config(self) -> Dict[str, Any]:
        return {"num_maps": self._num_maps}

    @property
    def num_maps(self) -> Optional[int]:
        return self._num_maps

    def _check(self, k: int) -> None:
        if k < 1 or (self._num_maps is not None and k != self._num_maps):
            raise ShapeMismatch("Expected {} maps, given {}"
                                .format(self._num_maps or "at least 1", k))

    def forward(self, selected: Tensor) -> Tensor:
        self._check(selected.shape[1])
        return ops.channel_mean(selected)

    def aggregate(self, selected: MultiChannelVolume) -> ScalarVolume:
        self._check(selected.channels)
        return stfa(selected)
