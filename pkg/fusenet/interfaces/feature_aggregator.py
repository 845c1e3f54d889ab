import abc
import logging
from typing import Optional

import numpy as np

from smqtk_core import Plugfigurable

from fusenet.gradnet import Module, Tensor, no_grad
from fusenet.volgrid import MultiChannelVolume, ScalarVolume


LOG = logging.getLogger(__name__)


class FeatureAggregator (Plugfigurable):
    """
    Interface for algorithms collapsing a stack of selected feature maps into
    a single aggregate channel that accompanies the CT volume into the
    classifier.

    Static aggregators have no trainable state, so their output for a scan
    can be computed once and cached. Dynamic aggregators expose a
    :class:`fusenet.gradnet.Module` whose parameters are optimized together
    with the classifier, and must be evaluated inside the training graph.
    """

    @property
    @abc.abstractmethod
    def num_maps(self) -> Optional[int]:
        """
        Number of input maps this aggregator requires, or None if any
        positive count is accepted.
        """

    @abc.abstractmethod
    def forward(self, selected: Tensor) -> Tensor:
        """
        Aggregate selected maps within the autodiff graph.

        :param selected: Tensor of shape ``(N, k, D, H, W)``.

        :raises fusenet.exceptions.ShapeMismatch: ``k`` is incompatible with
            this aggregator.

        :return: Tensor of shape ``(N, 1, D, H, W)``.
        """

    def module(self) -> Optional[Module]:
        """
        Trainable component of this aggregator, or None for static ones.
        """
        return None

    @property
    def is_dynamic(self) -> bool:
        return self.module() is not None

    def aggregate(self, selected: MultiChannelVolume) -> ScalarVolume:
        """
        Aggregate a volume of selected maps outside of any graph.

        :param selected: ``k`` channel volume.

        :return: Single channel aggregate with the same dims and spacing.
        """
        with no_grad():
            out = self.forward(Tensor(selected.array[np.newaxis]))
        return ScalarVolume(out.data[0, 0], selected.spacing_mm)
