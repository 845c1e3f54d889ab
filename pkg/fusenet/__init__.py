__version__ = "0.1.0"

from .interfaces.feature_aggregator import FeatureAggregator  # noqa: F401,E402

from .volgrid import ScalarVolume, MaskVolume, MultiChannelVolume  # noqa: F401,E402
from .preproc import PreprocConfig  # noqa: F401,E402
from .segnet import SegNetConfig, SegNetModel  # noqa: F401,E402
from .fusion import SelectionReport  # noqa: F401,E402
from .patcher import PatchSpec  # noqa: F401,E402
from .clf3d import ClassifierConfig, ClassifierModel, TrainConfig  # noqa: F401,E402
from .evalkit import DatasetManifest, RocReport  # noqa: F401,E402
from .synthlab import PhantomSpec  # noqa: F401,E402
