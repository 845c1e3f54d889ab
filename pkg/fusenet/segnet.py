"""
Dense-stack V-shaped segmentation network exposing its multi-resolution
encoder feature maps, with pre-training and Dice evaluation.
"""
import contextlib
import logging
from typing import Any, Dict, Generator, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from smqtk_core import Configurable

from fusenet.exceptions import BadConfig, EmptyDataset, ShapeMismatch
from fusenet.gradnet import (
    AdamState,
    BatchNorm3d,
    Conv3d,
    Module,
    Parameter,
    Tensor,
    adam_step,
    no_grad,
    read_checkpoint,
    save_checkpoint,
)
from fusenet.gradnet import ops
from fusenet.preproc import PreprocConfig, PreprocessCache, preprocess_many
from fusenet.volgrid import MaskVolume, ScalarVolume


LOG = logging.getLogger(__name__)

#: Anatomy labels of the synthetic phantoms.
BACKGROUND, BODY, LEFT_LUNG, RIGHT_LUNG = 0, 1, 2, 3
LUNG_LABELS = (LEFT_LUNG, RIGHT_LUNG)


class SegNetConfig (Configurable):
    """
    Segmentation network architecture.

    :param stack_channels: Output channels of the three dense feature stacks
        at scales 1/2, 1/4 and 1/8. Each must be divisible by
        ``dense_layers_per_stack``; the quotient is the stack growth rate.
    :param dense_layers_per_stack: Convolution layers per dense stack.
    :param num_classes: Segmentation classes including background.
    :param init_channels: Channels of the initial stride-2 convolution.
    :param skip_channels: Channels of each 1x1x1 skip convolution.
    :param spatial_prior: Add a learnable low resolution prior to the
        decoder features.
    :param prior_grid: Edge length of the spatial prior grid.
    :param kernel_size: Convolution kernel edge length.
    :param seed: Weight initialization seed.
    """

    def __init__(
        self,
        stack_channels: Sequence[int] = (12, 24, 24),
        dense_layers_per_stack: int = 4,
        num_classes: int = 4,
        init_channels: int = 12,
        skip_channels: int = 8,
        spatial_prior: bool = True,
        prior_grid: int = 12,
        kernel_size: int = 3,
        seed: int = 0,
    ):
        self.stack_channels = tuple(int(c) for c in stack_channels)
        self.dense_layers_per_stack = int(dense_layers_per_stack)
        self.num_classes = int(num_classes)
        self.init_channels = int(init_channels)
        self.skip_channels = int(skip_channels)
        self.spatial_prior = bool(spatial_prior)
        self.prior_grid = int(prior_grid)
        self.kernel_size = int(kernel_size)
        self.seed = int(seed)
        if len(self.stack_channels) != 3:
            raise BadConfig("Exactly three dense stacks are supported")
        if self.dense_layers_per_stack < 1:
            raise BadConfig("Dense stacks need at least one layer")
        for c in self.stack_channels:
            if c < 1 or c % self.dense_layers_per_stack:
                raise BadConfig("Stack channels {} must be positive multiples "
                                "of {} layers".format(self.stack_channels,
                                                      self.dense_layers_per_stack))
        if self.num_classes < 2:
            raise BadConfig("At least two classes are required")
        if min(self.init_channels, self.skip_channels, self.prior_grid) < 1 \
                or self.kernel_size % 2 == 0:
            raise BadConfig("Channel counts and prior grid must be positive "
                            "and the kernel size odd")

    def get_config(self) -> Dict[str, Any]:
        return {
            "stack_channels": list(self.stack_channels),
            "dense_layers_per_stack": self.dense_layers_per_stack,
            "num_classes": self.num_classes,
            "init_channels": self.init_channels,
            "skip_channels": self.skip_channels,
            "spatial_prior": self.spatial_prior,
            "prior_grid": self.prior_grid,
            "kernel_size": self.kernel_size,
            "seed": self.seed,
        }

    @property
    def tap_channels(self) -> int:
        return sum(self.stack_channels)


class FeatureTaps (NamedTuple):
    """
    Dense stack outputs at 1/2, 1/4 and 1/8 of the input resolution.
    """
    half: Tensor
    quarter: Tensor
    eighth: Tensor

    def scaled(self) -> List[Tuple[int, Tensor]]:
        """ ``(upsample factor, tap)`` pairs, finest first. """
        return [(2, self.half), (4, self.quarter), (8, self.eighth)]


class DenseLayer (Module):

    def __init__(self, in_ch: int, growth: int, k: int, rng: np.random.Generator):
        super(DenseLayer, self).__init__()
        self.norm = BatchNorm3d(in_ch)
        self.conv = Conv3d(in_ch, growth, k, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.relu(self.norm(x)))


class DenseStack (Module):
    """
    Concatenative stack: each layer sees the stack input and all previous
    layer outputs. The stack emits only the concatenated layer outputs.
    """

    def __init__(self, in_ch: int, out_ch: int, n_layers: int, k: int,
                 rng: np.random.Generator):
        super(DenseStack, self).__init__()
        growth = out_ch // n_layers
        self.n_layers = n_layers
        for i in range(n_layers):
            setattr(self, "layer{}".format(i),
                    DenseLayer(in_ch + i * growth, growth, k, rng))

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        new = []
        for i in range(self.n_layers):
            y = getattr(self, "layer{}".format(i))(ops.concat(feats) if len(feats) > 1 else x)
            feats.append(y)
            new.append(y)
        return ops.concat(new)


class Transition (Module):

    def __init__(self, ch: int, k: int, rng: np.random.Generator):
        super(Transition, self).__init__()
        self.norm = BatchNorm3d(ch)
        self.conv = Conv3d(ch, ch, k, stride=2, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.relu(self.norm(x)))


class SegNetModel (Module):
    """
    Segmentation network.

    An initial stride-2 convolution feeds three dense feature stacks joined
    by stride-2 transitions. Each stack output is a feature tap; 1x1x1 skip
    convolutions of the taps are brought to the 1/2 scale, concatenated,
    offset by an upsampled learnable spatial prior, and turned into class
    logits that are upsampled to the input resolution.

    :param config: Architecture configuration.
    """

    def __init__(self, config: Optional[SegNetConfig] = None):
        super(SegNetModel, self).__init__()
        cfg = config or SegNetConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        k = cfg.kernel_size
        c1, c2, c3 = cfg.stack_channels
        n = cfg.dense_layers_per_stack
        self.init_conv = Conv3d(1, cfg.init_channels, k, stride=2, rng=rng)
        self.stack1 = DenseStack(cfg.init_channels, c1, n, k, rng)
        self.down1 = Transition(c1, k, rng)
        self.stack2 = DenseStack(c1, c2, n, k, rng)
        self.down2 = Transition(c2, k, rng)
        self.stack3 = DenseStack(c2, c3, n, k, rng)
        s = cfg.skip_channels
        self.skip1 = Conv3d(c1, s, 1, rng=rng)
        self.skip2 = Conv3d(c2, s, 1, rng=rng)
        self.skip3 = Conv3d(c3, s, 1, rng=rng)
        if cfg.spatial_prior:
            g = cfg.prior_grid
            self.prior = Parameter(np.zeros((1, 3 * s, g, g, g)), "prior")
        self.head_norm = BatchNorm3d(3 * s)
        self.head_conv = Conv3d(3 * s, cfg.num_classes, k, rng=rng)

    def forward_with_taps(self, x: Tensor) -> Tuple[Tensor, FeatureTaps]:
        """
        :param x: Input of shape ``(N, 1, D, H, W)``.

        :raises ShapeMismatch: Input is not single channel 5D.

        :return: Full resolution logits and the three feature taps.
        """
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeMismatch("Segmentation input must be (N, 1, D, H, W), "
                                "given {}".format(x.shape))
        h = self.init_conv(x)
        t1 = self.stack1(h)
        t2 = self.stack2(self.down1(t1))
        t3 = self.stack3(self.down2(t2))
        size = t1.shape[2:]
        s1 = self.skip1(t1)
        s2 = ops.crop_box(ops.upsample_trilinear(self.skip2(t2), 2), (0, 0, 0), size)
        s3 = ops.crop_box(ops.upsample_trilinear(self.skip3(t3), 4), (0, 0, 0), size)
        y = ops.concat([s1, s2, s3])
        if self.config.spatial_prior:
            y = ops.add(y, ops.resize_trilinear(self.prior, size))
        y = self.head_conv(ops.relu(self.head_norm(y)))
        y = ops.crop_box(ops.upsample_trilinear(y, 2), (0, 0, 0), x.shape[2:])
        return y, FeatureTaps(t1, t2, t3)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_taps(x)[0]

    @classmethod
    def load(cls, uri: str) -> "SegNetModel":
        """
        Construct a model from a checkpoint written by :func:`pretrain`.
        """
        tensors, metadata, frozen = read_checkpoint(uri)
        model = cls(SegNetConfig.from_config(metadata["config"]))
        model.load_state_dict(tensors)
        for n, p in model.named_parameters():
            p.frozen = frozen.get(n, False)
        if model.frozen:
            model.eval()
        return model


def forward_with_taps(model: SegNetModel, x: Tensor) -> Tuple[Tensor, FeatureTaps]:
    return model.forward_with_taps(x)


@contextlib.contextmanager
def evaluating(model: Module) -> Generator[Module, None, None]:
    """
    Run a block in evaluation mode without gradient recording, restoring
    the previous mode afterwards.
    """
    prev = model.training
    model.eval()
    try:
        with no_grad():
            yield model
    finally:
        model.train(prev)


def volume_tensor(vol: ScalarVolume) -> Tensor:
    return Tensor(vol.array[np.newaxis, np.newaxis])


def mask_from_logits(logits: np.ndarray) -> np.ndarray:
    """
    Argmax over the class axis of ``(C, D, H, W)`` logits. Ties resolve to
    the lower class index.

    >>> mask_from_logits(np.zeros((3, 1, 1, 2))).tolist()
    [[[0, 0]]]
    """
    return np.argmax(logits, axis=0).astype(np.uint8)


def predict_mask(model: SegNetModel, x: Union[Tensor, ScalarVolume],
                 spacing_mm: Optional[Sequence[float]] = None) -> MaskVolume:
    """
    Full resolution label mask for one input volume.

    :param x: A ``(1, 1, D, H, W)`` tensor or a scalar volume.
    :param spacing_mm: Spacing to attach to the mask. Defaults to the
        input volume's spacing, else 1 mm.
    """
    if isinstance(x, ScalarVolume):
        spacing_mm = spacing_mm or x.spacing_mm
        x = volume_tensor(x)
    with evaluating(model):
        logits = model(x)
    labels = mask_from_logits(logits.data[0])
    return MaskVolume(labels, spacing_mm or (1., 1., 1.),
                      range(model.config.num_classes))


def freeze(model: Module) -> None:
    model.freeze()


def dice(pred: MaskVolume, truth: MaskVolume, label: Union[int, Iterable[int]]) -> float:
    """
    Dice overlap of the voxels carrying ``label`` (or any of several
    labels). Two empty sets overlap perfectly.

    :raises ShapeMismatch: Masks differ in dims.
    """
    if pred.dims != truth.dims:
        raise ShapeMismatch("Cannot compare masks of dims {} and {}"
                            .format(pred.dims, truth.dims))
    labels = [label] if isinstance(label, (int, np.integer)) else list(label)
    a = np.isin(pred.array, labels)
    b = np.isin(truth.array, labels)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2. * int(np.logical_and(a, b).sum()) / total


class PretrainLogRow (NamedTuple):
    step: int
    epoch: int
    lr: float
    loss: float


def _labelled(manifest: Iterable[Any]) -> List[Any]:
    return [r for r in manifest if r.mask_path]


def pretrain(model: SegNetModel, phantoms: Iterable[Any], epochs: int, seed: int,
             preproc_cfg: Optional[PreprocConfig] = None,
             lr: float = 1e-3,
             checkpoint_path: Optional[str] = None,
             cache: Optional[PreprocessCache] = None,
             threads: Optional[int] = None) -> List[PretrainLogRow]:
    """
    Optimize voxelwise softmax cross-entropy against truth masks with Adam,
    one phantom per step in a seeded shuffled order each epoch.

    Fine-tuning is pre-training a model that was loaded from an earlier
    checkpoint. The model is frozen once training completes, and written to
    ``checkpoint_path`` when given.

    :param model: Model to train in place. Frozen models are unfrozen first.
    :param phantoms: Manifest records with truth mask paths.
    :param epochs: Passes over the phantoms. Zero leaves the model unchanged.
    :param seed: Shuffle seed.
    :param preproc_cfg: Preprocessing applied to volumes and masks.
    :param lr: Adam learning rate.
    :param checkpoint_path: Where to save the trained model.
    :param cache: Optional preprocessing cache.
    :param threads: Preprocessing worker cap.

    :raises EmptyDataset: No record carries a truth mask.

    :return: One log row per optimizer step.
    """
    records = _labelled(phantoms)
    if not records:
        raise EmptyDataset("Segmentation pre-training needs phantoms with "
                           "truth masks")
    if epochs < 0:
        raise BadConfig("Epoch count must be non-negative")
    cfg = preproc_cfg or PreprocConfig()
    log: List[PretrainLogRow] = []
    state = AdamState()
    if epochs > 0:
        prepared = preprocess_many(records, cfg, cache, threads)
        model.unfreeze()
        rng = np.random.default_rng(seed)
        named = list(model.named_parameters())
        for epoch in range(epochs):
            losses = []
            for i in rng.permutation(len(prepared)):
                vol, mask = prepared[i]
                assert mask is not None
                model.zero_grad()
                loss = ops.softmax_cross_entropy(
                    model(volume_tensor(vol)), mask.array[np.newaxis].astype(np.int64)
                )
                loss.backward()
                adam_step(named, None, state, lr)
                log.append(PretrainLogRow(state.step, epoch, lr, loss.item()))
                losses.append(loss.item())
            LOG.info("Segmentation epoch %d/%d: mean loss %.5f",
                     epoch + 1, epochs, float(np.mean(losses)))
    model.zero_grad()
    model.freeze()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, {
            "kind": "segnet",
            "config": model.config.get_config(),
            "preproc": cfg.get_config(),
            "optimizer_step": state.step,
            "epochs": int(epochs),
            "seed": int(seed),
        })
    return log


def evaluate_dice(model: SegNetModel, phantoms: Iterable[Any],
                  preproc_cfg: Optional[PreprocConfig] = None,
                  cache: Optional[PreprocessCache] = None,
                  threads: Optional[int] = None) -> Dict[str, float]:
    """
    Mean Dice over held-out phantoms for every foreground label, plus the
    union of both lungs under the key ``lungs``.

    :raises EmptyDataset: No record carries a truth mask.
    """
    records = _labelled(phantoms)
    if not records:
        raise EmptyDataset("Dice evaluation needs phantoms with truth masks")
    cfg = preproc_cfg or PreprocConfig()
    scores: Dict[str, List[float]] = {}
    for vol, truth in preprocess_many(records, cfg, cache, threads):
        assert truth is not None
        pred = predict_mask(model, vol)
        for lbl in range(1, model.config.num_classes):
            scores.setdefault(str(lbl), []).append(dice(pred, truth, lbl))
        scores.setdefault("lungs", []).append(dice(pred, truth, LUNG_LABELS))
    result = {k: float(np.mean(v)) for k, v in scores.items()}
    LOG.info("Dice over %d phantoms: %s", len(records), result)
    return result
