from typing import Any, Dict, Optional
import unittest

import numpy as np

from fusenet.gradnet import Tensor
from fusenet.interfaces.feature_aggregator import FeatureAggregator
from fusenet.volgrid import MultiChannelVolume


class DummyAggregator (FeatureAggregator):
    """ Takes the first map. """

    @classmethod
    def is_usable(cls) -> bool:
        return True

    def get_config(self) -> Dict[str, Any]:
        return {}

    @property
    def num_maps(self) -> Optional[int]:
        return None

    def forward(self, selected: Tensor) -> Tensor:
        return Tensor(selected.data[:, :1])


class TestFeatureAggregatorAbstractClass (unittest.TestCase):

    def test_static_by_default(self) -> None:
        inst = DummyAggregator()
        self.assertIsNone(inst.module())
        self.assertFalse(inst.is_dynamic)

    def test_aggregate_wraps_forward(self) -> None:
        a = np.random.default_rng(0).random((3, 2, 3, 4)).astype(np.float32)
        out = DummyAggregator().aggregate(MultiChannelVolume(a, (1., 2., 3.)))
        self.assertEqual(out.dims, (4, 3, 2))
        self.assertEqual(out.spacing_mm, (1., 2., 3.))
        np.testing.assert_array_equal(out.array, a[0])
