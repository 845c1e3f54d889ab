"""
3D residual classifier, patch-based training in the baseline, static and
dynamic aggregation modes, and mean-probability scan inference.
"""
import csv
import hashlib
import logging
import math
import os.path as osp
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from smqtk_core import Configurable
from smqtk_core.configuration import from_config_dict, to_config_dict
from smqtk_dataprovider.utils.file import safe_create_dir
from smqtk_descriptors.utils import parallel_map

from fusenet.exceptions import (
    BadConfig,
    EmptyDataset,
    FrozenViolation,
    IoFailure,
    NoForeground,
    ShapeMismatch,
)
from fusenet.fusion import SelectionReport, extract_features, select_channels
from fusenet.gradnet import (
    AdamState,
    BatchNorm3d,
    Conv3d,
    CyclicLrSchedule,
    Linear,
    Module,
    Tensor,
    adam_step,
    module_entries,
    ops,
    read_checkpoint,
    write_checkpoint,
)
from fusenet.interfaces.feature_aggregator import FeatureAggregator
from fusenet.patcher import (
    INFERENCE_PATCHES,
    PatchSpec,
    box_start,
    crop_box_array,
    inference_centers,
    sample_centers,
    training_seed,
)
from fusenet.preproc import PreprocConfig, PreprocessCache, preprocess_record
from fusenet.segnet import SegNetModel, evaluating
from fusenet.utils import worker_count
from fusenet.volgrid import MaskVolume, MultiChannelVolume, ScalarVolume, read_volume, write_volume


LOG = logging.getLogger(__name__)

MODES = ("baseline", "stfa", "dyfa")
#: Prefix of aggregator tensors in classifier checkpoints.
AGGREGATOR_PREFIX = "aggregator."
DECISION_THRESHOLD = 0.5


#
# Configuration
#

class ClassifierConfig (Configurable):
    """
    Residual classifier architecture.

    :param blocks_per_resolution: Residual blocks per resolution stage.
    :param resolutions: Number of stages; each after the first halves the
        spatial size.
    :param base_channels: Channels of the first stage, doubled per stage.
    :param max_channels: Channel cap.
    :param input_channels: 2 for fused patches, 1 for the baseline.
    :param num_classes: Output classes.
    :param seed: Weight initialization seed.
    """

    def __init__(self, blocks_per_resolution: int = 2, resolutions: int = 5,
                 base_channels: int = 16, max_channels: int = 128,
                 input_channels: int = 2, num_classes: int = 2, seed: int = 0):
        self.blocks_per_resolution = int(blocks_per_resolution)
        self.resolutions = int(resolutions)
        self.base_channels = int(base_channels)
        self.max_channels = int(max_channels)
        self.input_channels = int(input_channels)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        if min(self.blocks_per_resolution, self.resolutions, self.base_channels,
               self.input_channels) < 1:
            raise BadConfig("Block, resolution, channel and input counts must "
                            "be positive")
        if self.max_channels < self.base_channels:
            raise BadConfig("Channel cap {} below base channels {}"
                            .format(self.max_channels, self.base_channels))
        if self.num_classes < 2:
            raise BadConfig("At least two classes are required")

    def get_config(self) -> Dict[str, Any]:
        return {
            "blocks_per_resolution": self.blocks_per_resolution,
            "resolutions": self.resolutions,
            "base_channels": self.base_channels,
            "max_channels": self.max_channels,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    def stage_channels(self) -> List[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels)
                for i in range(self.resolutions)]


class TrainConfig (Configurable):
    """
    Classifier training hyperparameters, shared by all three modes.

    :param epochs: Passes over the training scans.
    :param batch_size: Patches per optimizer step.
    :param lr_max: Cyclic learning rate upper bound.
    :param lr_min: Cyclic learning rate lower bound.
    :param decay_per_cycle: Fractional decay of the upper bound per cycle.
    :param cycle_len_steps: Steps per learning rate cycle. None means one
        epoch.
    :param patches_per_scan: Patches drawn per scan per epoch.
    :param seed: Shuffle and patch sampling seed.
    :param mode: ``baseline``, ``stfa`` or ``dyfa``.
    """

    def __init__(self, epochs: int = 60, batch_size: int = 16,
                 lr_max: float = 1e-3, lr_min: float = 1e-7,
                 decay_per_cycle: float = 1e-4,
                 cycle_len_steps: Optional[int] = None,
                 patches_per_scan: int = 1, seed: int = 0,
                 mode: str = "dyfa"):
        if int(epochs) < 0:
            raise BadConfig("Epochs must be non-negative")
        if int(batch_size) < 1 or int(patches_per_scan) < 1:
            raise BadConfig("Batch size and patches per scan must be positive")
        if mode not in MODES:
            raise BadConfig("Unknown mode '{}', expected one of {}".format(mode, MODES))
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.decay_per_cycle = float(decay_per_cycle)
        self.cycle_len_steps = None if cycle_len_steps is None else int(cycle_len_steps)
        self.patches_per_scan = int(patches_per_scan)
        self.seed = int(seed)
        self.mode = mode
        # Validates the bounds.
        self.schedule(1)

    def get_config(self) -> Dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_max": self.lr_max,
            "lr_min": self.lr_min,
            "decay_per_cycle": self.decay_per_cycle,
            "cycle_len_steps": self.cycle_len_steps,
            "patches_per_scan": self.patches_per_scan,
            "seed": self.seed,
            "mode": self.mode,
        }

    def schedule(self, steps_per_epoch: int) -> CyclicLrSchedule:
        return CyclicLrSchedule(self.lr_max, self.lr_min,
                                self.cycle_len_steps or max(1, steps_per_epoch),
                                self.decay_per_cycle)


def input_channels_for(mode: str) -> int:
    return 1 if mode == "baseline" else 2


#
# Network
#

class ResidualBlock (Module):
    """
    conv3-BN-ReLU-conv3-BN plus an identity or projection shortcut, then
    ReLU.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super(ResidualBlock, self).__init__()
        self.conv1 = Conv3d(in_ch, out_ch, 3, stride=stride, bias=False, rng=rng)
        self.norm1 = BatchNorm3d(out_ch)
        self.conv2 = Conv3d(out_ch, out_ch, 3, bias=False, rng=rng)
        self.norm2 = BatchNorm3d(out_ch)
        self.projected = stride != 1 or in_ch != out_ch
        if self.projected:
            self.proj_conv = Conv3d(in_ch, out_ch, 1, stride=stride, padding=0,
                                    bias=False, rng=rng)
            self.proj_norm = BatchNorm3d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm2(self.conv2(ops.relu(self.norm1(self.conv1(x)))))
        skip = self.proj_norm(self.proj_conv(x)) if self.projected else x
        return ops.relu(ops.add(y, skip))


class ClassifierModel (Module):
    """
    Stem convolution, ``resolutions`` stages of residual blocks (stride 2 on
    the first block of every stage after the first), global average pooling
    and a fully connected layer producing class logits.
    """

    def __init__(self, config: Optional[ClassifierConfig] = None):
        super(ClassifierModel, self).__init__()
        cfg = config or ClassifierConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = cfg.stage_channels()
        self.stem_conv = Conv3d(cfg.input_channels, chans[0], 3, bias=False, rng=rng)
        self.stem_norm = BatchNorm3d(chans[0])
        self.block_names: List[str] = []
        in_ch = chans[0]
        for i, out_ch in enumerate(chans):
            for b in range(cfg.blocks_per_resolution):
                stride = 2 if (i > 0 and b == 0) else 1
                name = "stage{}_block{}".format(i, b)
                setattr(self, name, ResidualBlock(in_ch, out_ch, stride, rng))
                self.block_names.append(name)
                in_ch = out_ch
        self.fc = Linear(in_ch, cfg.num_classes, rng=rng)

    @property
    def num_blocks(self) -> int:
        return len(self.block_names)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.config.input_channels:
            raise ShapeMismatch("Classifier expects (N, {}, D, H, W), given {}"
                                .format(self.config.input_channels, x.shape))
        y = ops.relu(self.stem_norm(self.stem_conv(x)))
        for name in self.block_names:
            y = getattr(self, name)(y)
        return self.fc(ops.global_avg_pool(y))


def build_classifier(cfg: ClassifierConfig) -> ClassifierModel:
    return ClassifierModel(cfg)


def probability_from_logits(logits: np.ndarray) -> np.ndarray:
    """
    Diseased class probability per row of ``(N, C)`` logits.

    >>> probability_from_logits(np.array([[0., 0.]])).tolist()
    [0.5]
    """
    return ops.softmax_array(np.asarray(logits, dtype=np.float64), axis=1)[:, 1]


def forward_probability(model: ClassifierModel, patch: Any) -> float:
    """
    Probability of the diseased class for a single patch.

    :param patch: ``MultiChannelVolume`` or ``(1, C, D, H, W)`` tensor.

    :raises ShapeMismatch: Channel count differs from the model input.
    """
    if isinstance(patch, MultiChannelVolume):
        patch = Tensor(patch.array[np.newaxis])
    with evaluating(model):
        logits = model(patch)
    return float(probability_from_logits(logits.data)[0])


#
# Scan preparation
#

class PreparedScan (NamedTuple):
    """
    Everything training and inference need from one scan under a frozen
    segmentation network.

    ``guide`` is the mask patch centers are drawn from. ``aggregate`` holds
    the static aggregate (``stfa``) and ``selected`` the muted selected maps
    (``dyfa``).
    """
    scan_id: str
    label: int
    ct: ScalarVolume
    guide: MaskVolume
    aggregate: Optional[ScalarVolume] = None
    selected: Optional[MultiChannelVolume] = None


def module_digest(module: Module) -> str:
    h = hashlib.sha1()
    for n, v in module.state_dict().items():
        h.update(n.encode("utf-8"))
        h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return h.hexdigest()


def _uniform_guide(ct: ScalarVolume, spec: PatchSpec) -> MaskVolume:
    return MaskVolume(np.full(ct.array.shape, spec.guide_labels[0], dtype=np.uint8),
                      ct.spacing_mm)


def default_aggregator(mode: str, selection: Optional[SelectionReport]) -> Optional[FeatureAggregator]:
    from fusenet.impls.feature_aggregator.dynamic_conv import DynamicConvAggregator
    from fusenet.impls.feature_aggregator.static_mean import StaticMeanAggregator
    if mode == "baseline":
        return None
    k = len(selection.selected) if selection is not None else None
    if mode == "stfa":
        return StaticMeanAggregator(k)
    return DynamicConvAggregator(k or 13)


def prepare_scans(records: Iterable[Any], preproc_cfg: PreprocConfig, mode: str,
                  segnet: Optional[SegNetModel] = None,
                  selection: Optional[SelectionReport] = None,
                  spec: Optional[PatchSpec] = None,
                  aggregator: Optional[FeatureAggregator] = None,
                  cache_dir: Optional[str] = None,
                  threads: Optional[int] = None) -> List[PreparedScan]:
    """
    Preprocess scans and run the frozen segmentation network once per scan.

    Patch centers are guided by the predicted mask whenever a segmentation
    network is given (baseline included), else by the record's truth mask,
    else uniformly over the volume. Static aggregates are written to
    ``cache_dir`` and reused on later calls with the same inputs.

    :raises BadConfig: A fused mode lacks the network or the selection.
    :raises FrozenViolation: The segmentation network is not frozen.
    """
    if mode not in MODES:
        raise BadConfig("Unknown mode '{}'".format(mode))
    if mode != "baseline" and (segnet is None or selection is None):
        raise BadConfig("Mode '{}' needs a segmentation network and a "
                        "feature selection".format(mode))
    if segnet is not None and not segnet.frozen:
        raise FrozenViolation("The segmentation network must be frozen")
    spec = spec or PatchSpec(channels=input_channels_for(mode))
    if aggregator is None:
        aggregator = default_aggregator(mode, selection)
    cache = PreprocessCache(cache_dir, preproc_cfg) if cache_dir else None
    agg_key = None
    if mode == "stfa" and cache_dir:
        assert segnet is not None and selection is not None
        h = hashlib.sha1()
        for part in (preproc_cfg.config_hash(), module_digest(segnet), selection.to_json()):
            h.update(part.encode("utf-8"))
        agg_key = h.hexdigest()[:12]

    def prepare(record: Any) -> PreparedScan:
        label = int(getattr(record, "label", 0))
        ct, truth = preprocess_record(record, preproc_cfg, cache)
        if segnet is None:
            guide = truth if truth is not None else _uniform_guide(ct, spec)  # type: ignore
            return PreparedScan(record.scan_id, label, ct, guide)
        agg_path = osp.join(cache_dir, "{}.{}.stfa.vgr".format(record.scan_id, agg_key)) \
            if agg_key else None
        feats, pred = extract_features(segnet, ct)
        if mode == "baseline":
            return PreparedScan(record.scan_id, label, ct, pred)
        assert selection is not None and aggregator is not None
        selected = select_channels(feats, selection)
        if mode == "dyfa":
            return PreparedScan(record.scan_id, label, ct, pred, selected=selected)
        if agg_path and osp.isfile(agg_path):
            agg = read_volume(agg_path).channel(0)
        else:
            agg = aggregator.aggregate(selected)
            if agg_path:
                write_volume(agg, agg_path)
        return PreparedScan(record.scan_id, label, ct, pred, aggregate=agg)

    records = list(records)
    LOG.info("Preparing %d scans for mode '%s'", len(records), mode)
    if segnet is not None:
        segnet.eval()
    return list(parallel_map(prepare, records, cores=worker_count(threads),
                             use_multiprocessing=False, ordered=True))


#
# Patches
#

def _box(scan: PreparedScan, center: Sequence[int], spec: PatchSpec) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
    sx, sy, sz = box_start(center, scan.ct.dims, spec.patch_dims)
    px, py, pz = spec.patch_dims
    return (sz, sy, sx), (pz, py, px)


def patch_batch(scans: Sequence[PreparedScan], centers: Sequence[Sequence[int]],
                spec: PatchSpec, mode: str,
                aggregator: Optional[FeatureAggregator] = None) -> Tensor:
    """
    Assemble one input batch, one patch per ``(scan, center)`` pair.

    Channel 0 is the CT crop. In ``stfa`` mode channel 1 is the crop of the
    cached aggregate; in ``dyfa`` mode it is the aggregator applied to the
    crop of the selected maps inside the autodiff graph.
    """
    cts = []
    others = []
    valid = []
    for scan, c in zip(scans, centers):
        start, size = _box(scan, c, spec)
        cts.append(crop_box_array(scan.ct.array[np.newaxis], start, size))
        if mode == "stfa":
            if scan.aggregate is None:
                raise BadConfig("Scan '{}' was not prepared for static "
                                "aggregation".format(scan.scan_id))
            others.append(crop_box_array(scan.aggregate.array[np.newaxis], start, size))
        elif mode == "dyfa":
            if scan.selected is None:
                raise BadConfig("Scan '{}' was not prepared for dynamic "
                                "aggregation".format(scan.scan_id))
            others.append(crop_box_array(scan.selected.array, start, size))
            valid.append(crop_box_array(np.ones((1,) + scan.ct.array.shape, np.float32),
                                        start, size))
    ct = Tensor(np.stack(cts))
    if mode == "baseline":
        return ct
    if mode == "stfa":
        return ops.concat([ct, Tensor(np.stack(others))])
    if aggregator is None:
        raise BadConfig("Dynamic mode needs an aggregator")
    # Pointwise aggregation commutes with cropping; the validity mask keeps
    # out-of-volume voxels at zero like a crop of the full aggregate.
    agg = aggregator.forward(Tensor(np.stack(others)))
    inside = np.stack(valid)
    if not inside.all():
        agg = ops.mul(agg, Tensor(inside))
    return ops.concat([ct, agg])


#
# Training
#

class TrainLogRow (NamedTuple):
    step: int
    epoch: int
    lr: float
    loss: float


def write_log_csv(path: str, rows: Iterable[Any]) -> None:
    safe_create_dir(osp.dirname(osp.abspath(path)))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "epoch", "lr", "loss"))
        for r in rows:
            w.writerow((r.step, r.epoch, repr(float(r.lr)), repr(float(r.loss))))


def _train_centers(scan: PreparedScan, spec: PatchSpec, cfg: TrainConfig,
                   epoch: int) -> List[Tuple[int, int, int]]:
    seed = training_seed(scan.scan_id, cfg.seed, epoch)
    try:
        return sample_centers(scan.guide, spec.guide_labels, cfg.patches_per_scan, seed)
    except NoForeground:
        x, y, z = scan.ct.dims
        LOG.warning("Scan '%s' has no guide voxels; using the volume center",
                    scan.scan_id)
        return [(x // 2, y // 2, z // 2)] * cfg.patches_per_scan


def trainable_parameters(model: ClassifierModel,
                         aggregator: Optional[FeatureAggregator]) -> List[Tuple[str, Any]]:
    named = list(model.named_parameters())
    agg_mod = aggregator.module() if aggregator is not None else None
    if agg_mod is not None:
        named.extend(agg_mod.named_parameters(AGGREGATOR_PREFIX))
    return named


def train_prepared(model: ClassifierModel, scans: Sequence[PreparedScan],
                   cfg: TrainConfig, spec: PatchSpec,
                   aggregator: Optional[FeatureAggregator] = None,
                   segnet: Optional[SegNetModel] = None) -> List[TrainLogRow]:
    """
    Optimize the classifier (and a dynamic aggregator) on prepared scans.

    Each epoch shuffles the scans with the training seed and draws
    ``patches_per_scan`` patch centers per scan from a seed derived from the
    scan id, training seed and epoch, so every mode sees the same boxes.

    :raises EmptyDataset: No scans.
    :raises BadConfig: Model input channels do not fit the mode.
    :raises FrozenViolation: A segmentation parameter received a gradient.
    """
    if not scans:
        raise EmptyDataset("Classifier training needs at least one scan")
    mode = cfg.mode
    if model.config.input_channels != input_channels_for(mode):
        raise BadConfig("Mode '{}' needs {} input channels, model has {}"
                        .format(mode, input_channels_for(mode),
                                model.config.input_channels))
    if mode == "dyfa" and (aggregator is None or not aggregator.is_dynamic):
        raise BadConfig("Dynamic mode needs a dynamic aggregator")
    if segnet is not None and not segnet.frozen:
        raise FrozenViolation("The segmentation network must be frozen")

    items = [(s, p) for s in range(len(scans)) for p in range(cfg.patches_per_scan)]
    steps_per_epoch = int(math.ceil(len(items) / cfg.batch_size))
    schedule = cfg.schedule(steps_per_epoch)
    named = trainable_parameters(model, aggregator)
    agg_mod = aggregator.module() if aggregator is not None else None
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    log: List[TrainLogRow] = []
    step = 0
    model.train()
    if agg_mod is not None:
        agg_mod.train()
    for epoch in range(cfg.epochs):
        centers = {i: _train_centers(s, spec, cfg, epoch) for i, s in enumerate(scans)}
        order = rng.permutation(len(items))
        losses = []
        for b in range(steps_per_epoch):
            batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            b_scans = [scans[s] for s, _ in batch]
            b_centers = [centers[s][p] for s, p in batch]
            labels = np.array([s.label for s in b_scans], dtype=np.int64)
            model.zero_grad()
            if agg_mod is not None:
                agg_mod.zero_grad()
            x = patch_batch(b_scans, b_centers, spec, mode, aggregator)
            loss = ops.softmax_cross_entropy(model(x), labels)
            loss.backward()
            if segnet is not None and any(p.grad is not None for p in segnet.parameters()):
                raise FrozenViolation("A frozen segmentation parameter received "
                                      "a gradient")
            lr = schedule.lr_at(step)
            adam_step(named, None, state, lr)
            log.append(TrainLogRow(step, epoch, lr, loss.item()))
            losses.append(loss.item())
            step += 1
        LOG.info("Classifier epoch %d/%d (%s): mean loss %.5f", epoch + 1,
                 cfg.epochs, mode, float(np.mean(losses)))
    model.zero_grad()
    model.eval()
    if agg_mod is not None:
        agg_mod.zero_grad()
        agg_mod.eval()
    return log


def train(model: ClassifierModel, dataset: Iterable[Any],
          segnet: Optional[SegNetModel], selection: Optional[SelectionReport],
          cfg: TrainConfig, spec: Optional[PatchSpec] = None,
          preproc_cfg: Optional[PreprocConfig] = None,
          aggregator: Optional[FeatureAggregator] = None,
          checkpoint_path: Optional[str] = None,
          log_path: Optional[str] = None,
          cache_dir: Optional[str] = None,
          threads: Optional[int] = None) -> Tuple[List[TrainLogRow], Optional[FeatureAggregator]]:
    """
    Prepare ``dataset`` and train the classifier in ``cfg.mode``.

    :return: The training log and the (possibly trained) aggregator.
    """
    mode = cfg.mode
    spec = spec or PatchSpec(channels=input_channels_for(mode))
    preproc_cfg = preproc_cfg or PreprocConfig()
    if aggregator is None:
        aggregator = default_aggregator(mode, selection)
    scans = prepare_scans(dataset, preproc_cfg, mode, segnet, selection, spec,
                          aggregator, cache_dir, threads)
    log = train_prepared(model, scans, cfg, spec, aggregator, segnet)
    if log_path:
        write_log_csv(log_path, log)
    if checkpoint_path:
        save_classifier(checkpoint_path, model, aggregator, {
            "mode": mode,
            "train": cfg.get_config(),
            "patch": spec.get_config(),
            "preproc": preproc_cfg.get_config(),
            "optimizer_step": len(log),
        })
    return log, aggregator


def save_classifier(path: str, model: ClassifierModel,
                    aggregator: Optional[FeatureAggregator],
                    metadata: Optional[Dict[str, Any]] = None) -> None:
    """
    Write classifier and dynamic aggregator weights to one checkpoint.
    Aggregator tensors are prefixed with ``aggregator.``.
    """
    tensors, frozen, buffers = module_entries(model)
    meta = dict(metadata or {})
    meta["kind"] = "classifier"
    meta["classifier"] = model.config.get_config()
    meta["aggregator"] = to_config_dict(aggregator) if aggregator is not None else None
    agg_mod = aggregator.module() if aggregator is not None else None
    if agg_mod is not None:
        a_t, a_f, a_b = module_entries(agg_mod, AGGREGATOR_PREFIX)
        tensors.update(a_t)
        frozen.update(a_f)
        buffers = buffers + a_b
    write_checkpoint(path, tensors, meta, frozen, buffers)


def load_classifier(uri: str) -> Tuple[ClassifierModel, Optional[FeatureAggregator], Dict[str, Any]]:
    """
    Read a checkpoint written by :func:`save_classifier`.

    :return: Model, aggregator (None for the baseline) and metadata.
    """
    tensors, metadata, _ = read_checkpoint(uri)
    if metadata.get("kind") != "classifier":
        raise IoFailure("Checkpoint '{}' is not a classifier checkpoint".format(uri))
    model = ClassifierModel(ClassifierConfig.from_config(metadata["classifier"]))
    model.load_state_dict({n: v for n, v in tensors.items()
                           if not n.startswith(AGGREGATOR_PREFIX)})
    model.eval()
    aggregator = None
    if metadata.get("aggregator"):
        aggregator = from_config_dict(metadata["aggregator"], FeatureAggregator.get_impls())
        agg_mod = aggregator.module()
        if agg_mod is not None:
            agg_mod.load_state_dict({n[len(AGGREGATOR_PREFIX):]: v for n, v in tensors.items()
                                     if n.startswith(AGGREGATOR_PREFIX)})
            agg_mod.eval()
    return model, aggregator, metadata


#
# Inference
#

class ScanPrediction (NamedTuple):
    scan_id: str
    patch_probabilities: Tuple[float, ...]
    probability: float
    predicted_class: int

    @classmethod
    def from_patches(cls, scan_id: str, probs: Sequence[float]) -> "ScanPrediction":
        p = float(np.mean(np.asarray(probs, dtype=np.float64)))
        return cls(scan_id, tuple(float(v) for v in probs), p,
                   int(p >= DECISION_THRESHOLD))


def infer_scan(model: ClassifierModel, scan: PreparedScan, spec: PatchSpec,
               mode: str, aggregator: Optional[FeatureAggregator] = None,
               n: int = INFERENCE_PATCHES) -> ScanPrediction:
    """
    Classify one prepared scan from ``n`` patches sampled with a seed
    derived from its scan id; the scan probability is their mean.

    :raises NoForeground: The guide mask holds no guide label voxel.
    """
    centers = inference_centers(scan.guide, spec, scan.scan_id, n)
    probs = []
    with evaluating(model):
        for c in centers:
            x = patch_batch([scan], [c], spec, mode, aggregator)
            probs.append(float(probability_from_logits(model(x).data)[0]))
    return ScanPrediction.from_patches(scan.scan_id, probs)


def infer(model: ClassifierModel, scans: Sequence[PreparedScan], spec: PatchSpec,
          mode: str, aggregator: Optional[FeatureAggregator] = None,
          n: int = INFERENCE_PATCHES, threads: Optional[int] = None) -> List[ScanPrediction]:
    """
    Classify many prepared scans in parallel; results follow input order.
    """
    agg_mod = aggregator.module() if aggregator is not None else None
    model.eval()
    if agg_mod is not None:
        agg_mod.eval()
    return list(parallel_map(
        lambda s: infer_scan(model, s, spec, mode, aggregator, n), scans,
        cores=worker_count(threads), use_multiprocessing=False, ordered=True,
    ))


def write_predictions(path: str, predictions: Iterable[ScanPrediction]) -> None:
    safe_create_dir(osp.dirname(osp.abspath(path)))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("scan_id", "probability", "predicted_class", "patch_probabilities"))
        for p in predictions:
            w.writerow((p.scan_id, repr(p.probability), p.predicted_class,
                        " ".join(repr(v) for v in p.patch_probabilities)))


def read_predictions(path: str) -> List[ScanPrediction]:
    try:
        with open(path, newline="") as f:
            return [
                ScanPrediction(
                    row["scan_id"],
                    tuple(float(v) for v in row["patch_probabilities"].split()),
                    float(row["probability"]),
                    int(row["predicted_class"]),
                )
                for row in csv.DictReader(f)
            ]
    except OSError as ex:
        raise IoFailure("Failed to read predictions '{}': {}".format(path, ex))
