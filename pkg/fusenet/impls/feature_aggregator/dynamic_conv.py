from typing import Any, Dict, Optional

from fusenet.fusion import DEFAULT_K, DyFAAggregator, dyfa_forward
from fusenet.gradnet import Module, Tensor
from fusenet.interfaces.feature_aggregator import FeatureAggregator


class DynamicConvAggregator (FeatureAggregator):
    """
    Dynamic feature aggregation (DyFA): a trainable 1x1x1 convolution giving
    each selected map a learned weight, optimized with the classification
    loss. Starts out equal to the static mean.

    :param num_maps: Number of selected maps.
    """

    def __init__(self, num_maps: int = DEFAULT_K):
        self._module = DyFAAggregator(num_maps)

    @classmethod
    def is_usable(cls) -> bool:
        return True

    def get_config(self) -> Dict[str, Any]:
        return {"num_maps": self._module.num_maps}

    @property
    def num_maps(self) -> Optional[int]:
        return self._module.num_maps

    def module(self) -> Module:
        return self._module

    def forward(self, selected: Tensor) -> Tensor:
        return dyfa_forward(self._module, selected)
