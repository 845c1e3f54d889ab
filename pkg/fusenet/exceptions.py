from typing import Optional, Set


class FusenetError (Exception):
    """
    Base of all errors raised by this package.
    """


class IoFailure (FusenetError, IOError):
    """
    Reading or writing an artifact on disk failed.
    """


class BadMagic (FusenetError, IOError):
    """
    A container file did not begin with the expected magic bytes.
    """


class HeaderMismatch (FusenetError, IOError):
    """
    A container's payload length disagrees with its header.
    """


class UnsupportedDtype (FusenetError, IOError):
    """
    A container declared a payload data type we do not handle.
    """


class ShapeMismatch (FusenetError, ValueError):
    """
    Array, tensor or volume dimensions were incompatible for an operation.
    """


class TargetSmaller (FusenetError, ValueError):
    """
    Padding was requested to a size smaller than the source along some axis.
    """


class EmptyVolume (FusenetError, ValueError):
    """
    An operation requiring voxels was given a volume without any.
    """


class DegenerateWindow (FusenetError, ValueError):
    """
    An intensity window had equal (or inverted) bounds.
    """


class BadLabel (FusenetError, ValueError):
    """
    A class label was outside of the range a loss or model supports.
    """


class BadConfig (FusenetError, ValueError):
    """
    A configuration value was outside of its valid domain.
    """


class EmptyDataset (FusenetError, ValueError):
    """
    Training was requested on a dataset with no usable records.
    """


class FrozenViolation (FusenetError, RuntimeError):
    """
    A frozen model received a gradient or an optimizer update.
    """


class EmptyMask (FusenetError, ValueError):
    """
    A mask required to hold foreground voxels held none.
    """


class NoForeground (FusenetError, ValueError):
    """
    No voxel matched the guide labels requested for patch sampling.
    """


class BadFractions (FusenetError, ValueError):
    """
    Split fractions were negative or did not sum to one.
    """


class DegenerateLabels (FusenetError, ValueError):
    """
    ROC analysis was requested without at least one positive and one negative.
    """


class MissingPredictions (FusenetError, KeyError):
    """
    Raised by evaluation when requested scans have no prediction.
    """
    def __init__(self, scan_ids: Set[str]):
        """
        :param scan_ids: The scan ids missing a prediction.
        """
        super(MissingPredictions, self).__init__(scan_ids)
        self.scan_ids = scan_ids


class BadGeometry (FusenetError, ValueError):
    """
    Synthetic phantom geometry violated containment (lungs outside body).
    """


class MissingArtifacts (FusenetError, IOError):
    """
    A run directory lacks the artifacts an export step needs.
    """


class UsageError (FusenetError):
    """
    Command line usage was invalid.
    """


class DuplicateScanError (FusenetError, ValueError):
    """
    A dataset manifest listed the same scan id more than once.
    """
    def __init__(self, scan_id: str, message: Optional[str] = None):
        super(DuplicateScanError, self).__init__(
            message or "Duplicate scan id in manifest: {}".format(scan_id)
        )
        self.scan_id = scan_id


class LabelInconsistency (FusenetError, ValueError):
    """
    A manifest record's normal flag disagreed with its disease flags.
    """
