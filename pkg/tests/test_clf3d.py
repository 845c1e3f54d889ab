import os
import tempfile
import unittest

import numpy as np
import pytest

from smqtk_core.configuration import configuration_test_helper

from fusenet.clf3d import (
    ClassifierConfig,
    ClassifierModel,
    PreparedScan,
    ScanPrediction,
    TrainConfig,
    _train_centers,
    build_classifier,
    default_aggregator,
    forward_probability,
    infer,
    infer_scan,
    input_channels_for,
    load_classifier,
    patch_batch,
    prepare_scans,
    probability_from_logits,
    read_predictions,
    save_classifier,
    train,
    train_prepared,
    trainable_parameters,
    write_log_csv,
    write_predictions,
)
from fusenet.exceptions import BadConfig, EmptyDataset, FrozenViolation, IoFailure, ShapeMismatch
from fusenet.fusion import SelectionReport, stfa
from fusenet.gradnet import AdamState, Tensor, adam_step, no_grad, ops, precision, save_checkpoint
from fusenet.impls.feature_aggregator.dynamic_conv import DynamicConvAggregator
from fusenet.impls.feature_aggregator.static_mean import StaticMeanAggregator
from fusenet.patcher import PatchSpec
from fusenet.segnet import SegNetModel
from fusenet.synthlab import generate_dataset
from fusenet.volgrid import MaskVolume, MultiChannelVolume, ScalarVolume

from tests import tiny_phantom_spec, tiny_preproc, tiny_segnet_config


def tiny_classifier(mode: str = "stfa", seed: int = 0) -> ClassifierModel:
    return ClassifierModel(ClassifierConfig(1, 2, 2, 4, input_channels_for(mode), seed=seed))


def fake_scans(n: int = 4, k: int = 3) -> list:
    """ Prepared scans whose label shows as a bright lung block. """
    out = []
    for i in range(n):
        rng = np.random.default_rng(i)
        label = i % 2
        ct = rng.random((8, 8, 8)) * 0.1
        guide = np.zeros((8, 8, 8), dtype=np.uint8)
        guide[2:6, 2:6, 2:6] = 2
        ct[guide == 2] += 0.8 * label
        maps = rng.random((k, 8, 8, 8)).astype(np.float32)
        sel = MultiChannelVolume(maps)
        out.append(PreparedScan(
            "scan-{:04d}".format(i), label, ScalarVolume(ct),
            MaskVolume(guide, (1., 1., 1.), (1, 2, 3)),
            aggregate=stfa(sel), selected=sel,
        ))
    return out


class TestConfigs (unittest.TestCase):

    def test_classifier_configuration(self) -> None:
        c = ClassifierConfig(1, 3, 4, 8, 1, 2, 5)
        for inst in configuration_test_helper(c):  # type: ClassifierConfig
            assert inst.blocks_per_resolution == 1
            assert inst.resolutions == 3
            assert inst.input_channels == 1
            assert inst.seed == 5
            assert inst.stage_channels() == [4, 8, 8]

    def test_default_stages(self) -> None:
        self.assertEqual(ClassifierConfig().stage_channels(), [16, 32, 64, 128, 128])

    def test_classifier_invalid(self) -> None:
        self.assertRaises(BadConfig, ClassifierConfig, resolutions=0)
        self.assertRaises(BadConfig, ClassifierConfig, base_channels=32, max_channels=16)
        self.assertRaises(BadConfig, ClassifierConfig, num_classes=1)

    def test_train_configuration(self) -> None:
        c = TrainConfig(3, 4, 1e-2, 1e-6, 0., 10, 2, 7, "baseline")
        for inst in configuration_test_helper(c):  # type: TrainConfig
            assert inst.epochs == 3
            assert inst.cycle_len_steps == 10
            assert inst.mode == "baseline"

    def test_train_invalid(self) -> None:
        self.assertRaises(BadConfig, TrainConfig, mode="late")
        self.assertRaises(BadConfig, TrainConfig, batch_size=0)
        self.assertRaises(BadConfig, TrainConfig, lr_min=1., lr_max=0.1)

    def test_schedule_cycle_defaults_to_epoch(self) -> None:
        self.assertEqual(TrainConfig().schedule(7).cycle_len_steps, 7)
        self.assertEqual(TrainConfig(cycle_len_steps=3).schedule(7).cycle_len_steps, 3)

    def test_input_channels(self) -> None:
        self.assertEqual([input_channels_for(m) for m in ("baseline", "stfa", "dyfa")],
                         [1, 2, 2])


class TestClassifierModel (unittest.TestCase):

    def test_default_build(self) -> None:
        m = build_classifier(ClassifierConfig())
        self.assertEqual(m.num_blocks, 10)
        again = build_classifier(ClassifierConfig())
        self.assertEqual([p.data.size for p in m.parameters()],
                         [p.data.size for p in again.parameters()])

    def test_forward_shape(self) -> None:
        m = tiny_classifier()
        self.assertEqual(m(Tensor(np.zeros((3, 2, 8, 8, 8)))).shape, (3, 2))
        self.assertEqual(m.block_names, ["stage0_block0", "stage1_block0"])
        self.assertTrue(m.stage1_block0.projected)
        self.assertFalse(m.stage0_block0.projected)

    def test_wrong_channels(self) -> None:
        self.assertRaises(ShapeMismatch, tiny_classifier("baseline"),
                          Tensor(np.zeros((1, 2, 8, 8, 8))))

    def test_probabilities(self) -> None:
        p = probability_from_logits(np.array([[0., 0.], [0., 100.], [100., 0.]]))
        np.testing.assert_allclose(p, [0.5, 1., 0.], atol=1e-12)
        m = tiny_classifier()
        v = forward_probability(m, MultiChannelVolume(np.ones((2, 8, 8, 8))))
        self.assertTrue(0. <= v <= 1.)
        self.assertTrue(m.training)


class TestPatchBatch (unittest.TestCase):

    def setUp(self) -> None:
        self.scans = fake_scans(2)
        self.centers = [(4, 4, 4), (0, 0, 0)]

    def test_baseline(self) -> None:
        x = patch_batch(self.scans, self.centers, PatchSpec((4, 4, 4), 1), "baseline")
        self.assertEqual(x.shape, (2, 1, 4, 4, 4))
        np.testing.assert_array_equal(x.data[1, 0], self.scans[1].ct.array[:4, :4, :4])

    def test_stfa(self) -> None:
        x = patch_batch(self.scans, self.centers, PatchSpec((4, 4, 4)), "stfa")
        self.assertEqual(x.shape, (2, 2, 4, 4, 4))
        np.testing.assert_array_equal(x.data[0, 1], self.scans[0].aggregate.array[2:6, 2:6, 2:6])

    def test_dyfa_initially_matches_stfa(self) -> None:
        spec = PatchSpec((4, 4, 4))
        agg = DynamicConvAggregator(3)
        d = patch_batch(self.scans, self.centers, spec, "dyfa", agg)
        s = patch_batch(self.scans, self.centers, spec, "stfa")
        np.testing.assert_allclose(d.data, s.data, atol=1e-6)

    def test_dyfa_outside_volume_is_zero(self) -> None:
        agg = DynamicConvAggregator(3)
        agg.module().bias.data[...] = 1.
        x = patch_batch(self.scans[:1], [(4, 4, 4)], PatchSpec((10, 10, 10)), "dyfa", agg)
        self.assertEqual(x.shape, (1, 2, 10, 10, 10))
        self.assertTrue(np.all(x.data[0, 1, 0] == 0.))
        self.assertTrue(np.all(x.data[0, 1, 1:9, 1:9, 1:9] >= 1.))

    def test_missing_preparation(self) -> None:
        bare = [self.scans[0]._replace(aggregate=None, selected=None)]
        self.assertRaises(BadConfig, patch_batch, bare, [(4, 4, 4)], PatchSpec((4, 4, 4)), "stfa")
        self.assertRaises(BadConfig, patch_batch, bare, [(4, 4, 4)], PatchSpec((4, 4, 4)),
                          "dyfa", DynamicConvAggregator(3))

    def test_fallback_center(self) -> None:
        scan = self.scans[0]._replace(guide=MaskVolume(np.zeros((8, 8, 8), np.uint8)))
        cfg = TrainConfig(patches_per_scan=2)
        self.assertEqual(_train_centers(scan, PatchSpec((4, 4, 4)), cfg, 0), [(4, 4, 4)] * 2)


class TestTraining (unittest.TestCase):

    def setUp(self) -> None:
        self.scans = fake_scans(4)
        self.spec = PatchSpec((4, 4, 4))

    def _cfg(self, mode: str, epochs: int = 2) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=2, lr_max=1e-2, lr_min=1e-4, mode=mode)

    def test_log_and_schedule(self) -> None:
        model = tiny_classifier("stfa")
        log = train_prepared(model, self.scans, self._cfg("stfa"), self.spec)
        self.assertEqual([r.step for r in log], [0, 1, 2, 3])
        self.assertEqual([r.epoch for r in log], [0, 0, 1, 1])
        self.assertEqual(log[0].lr, 1e-2)
        self.assertEqual(log[1].lr, 1e-4)
        self.assertFalse(model.training)

    def test_deterministic(self) -> None:
        a, b = tiny_classifier("baseline"), tiny_classifier("baseline")
        spec = PatchSpec((4, 4, 4), 1)
        la = train_prepared(a, self.scans, self._cfg("baseline"), spec)
        lb = train_prepared(b, self.scans, self._cfg("baseline"), spec)
        self.assertEqual(la, lb)
        for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            np.testing.assert_array_equal(x, y)

    def test_dyfa_updates_aggregator(self) -> None:
        agg = DynamicConvAggregator(3)
        before = agg.module().weight.data.copy()
        train_prepared(tiny_classifier("dyfa"), self.scans, self._cfg("dyfa"), self.spec, agg)
        self.assertFalse(np.array_equal(before, agg.module().weight.data))
        self.assertFalse(agg.module().training)

    def test_errors(self) -> None:
        with pytest.raises(EmptyDataset):
            train_prepared(tiny_classifier(), [], self._cfg("stfa"), self.spec)
        with pytest.raises(BadConfig):
            train_prepared(tiny_classifier("baseline"), self.scans, self._cfg("stfa"), self.spec)
        with pytest.raises(BadConfig):
            train_prepared(tiny_classifier("dyfa"), self.scans, self._cfg("dyfa"), self.spec,
                           StaticMeanAggregator(3))
        with pytest.raises(FrozenViolation):
            train_prepared(tiny_classifier(), self.scans, self._cfg("stfa"), self.spec,
                           segnet=SegNetModel(tiny_segnet_config()))

    def test_fixed_batch_loss_decreases(self) -> None:
        labels = np.array([s.label for s in self.scans])
        centers = [(4, 4, 4)] * len(self.scans)
        with precision():
            model = tiny_classifier("dyfa")
            agg = DynamicConvAggregator(3)
            named = trainable_parameters(model, agg)
            state = AdamState()
            losses = []
            for _ in range(5):
                model.zero_grad()
                agg.module().zero_grad()
                x = patch_batch(self.scans, centers, self.spec, "dyfa", agg)
                loss = ops.softmax_cross_entropy(model(x), labels)
                loss.backward()
                adam_step(named, None, state, 1e-3)
                losses.append(loss.item())
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])), losses)

    def test_aggregator_gradient_matches_finite_difference(self) -> None:
        labels = np.array([s.label for s in self.scans])
        centers = [(4, 4, 4), (3, 3, 3), (5, 4, 3), (4, 5, 5)]
        eps = 1e-6
        with precision():
            model = tiny_classifier("dyfa")
            agg = DynamicConvAggregator(3)
            weight = agg.module().weight

            def loss() -> Tensor:
                x = patch_batch(self.scans, centers, self.spec, "dyfa", agg)
                return ops.softmax_cross_entropy(model(x), labels)

            loss().backward()
            idx = (0, 1, 0, 0, 0)
            analytic = float(weight.grad[idx])
            with no_grad():
                orig = weight.data[idx]
                weight.data[idx] = orig + eps
                hi = loss().item()
                weight.data[idx] = orig - eps
                lo = loss().item()
                weight.data[idx] = orig
        numeric = (hi - lo) / (2 * eps)
        self.assertNotEqual(numeric, 0.)
        self.assertLess(abs(analytic - numeric) / max(abs(analytic), abs(numeric)), 1e-4)

    def test_zero_epochs(self) -> None:
        self.assertEqual(train_prepared(tiny_classifier(), self.scans, self._cfg("stfa", 0),
                                        self.spec), [])


class TestCheckpointAndInference (unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name
        self.scans = fake_scans(3)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_save_load_dyfa(self) -> None:
        model = tiny_classifier("dyfa", seed=3)
        agg = DynamicConvAggregator(3)
        agg.module().weight.data[...] = 0.25
        p = os.path.join(self.dir, "clf.gnc")
        save_classifier(p, model, agg, {"mode": "dyfa"})
        m2, a2, meta = load_classifier(p)
        self.assertEqual(meta["mode"], "dyfa")
        self.assertEqual(meta["kind"], "classifier")
        self.assertIsInstance(a2, DynamicConvAggregator)
        np.testing.assert_array_equal(a2.module().weight.data, 0.25)
        for (_, x), (_, y) in zip(model.state_dict().items(), m2.state_dict().items()):
            np.testing.assert_array_equal(x, y)

    def test_save_load_baseline(self) -> None:
        p = os.path.join(self.dir, "base.gnc")
        save_classifier(p, tiny_classifier("baseline"), None)
        _, agg, meta = load_classifier(p)
        self.assertIsNone(agg)
        self.assertIsNone(meta["aggregator"])

    def test_rejects_other_checkpoints(self) -> None:
        p = os.path.join(self.dir, "seg.gnc")
        save_checkpoint(SegNetModel(tiny_segnet_config()), p, {"kind": "segnet"})
        self.assertRaises(IoFailure, load_classifier, p)

    def test_infer(self) -> None:
        model = tiny_classifier("stfa")
        spec = PatchSpec((4, 4, 4))
        agg = StaticMeanAggregator(3)
        preds = infer(model, self.scans, spec, "stfa", agg, threads=2)
        self.assertEqual([p.scan_id for p in preds], [s.scan_id for s in self.scans])
        for p in preds:
            self.assertEqual(len(p.patch_probabilities), 6)
            self.assertAlmostEqual(p.probability, float(np.mean(p.patch_probabilities)))
            self.assertEqual(p.predicted_class, int(p.probability >= 0.5))
        self.assertEqual(infer_scan(model, self.scans[0], spec, "stfa", agg), preds[0])

    def test_prediction_from_patches(self) -> None:
        p = ScanPrediction.from_patches("s", [0.2, 0.8])
        self.assertEqual(p.probability, 0.5)
        self.assertEqual(p.predicted_class, 1)

    def test_predictions_csv(self) -> None:
        preds = [ScanPrediction.from_patches("a", [0.1, 0.3]),
                 ScanPrediction.from_patches("b", [1. / 3.])]
        p = os.path.join(self.dir, "out", "predictions.csv")
        write_predictions(p, preds)
        self.assertEqual(read_predictions(p), preds)
        self.assertRaises(IoFailure, read_predictions, os.path.join(self.dir, "none.csv"))

    def test_log_csv(self) -> None:
        from fusenet.clf3d import TrainLogRow
        p = os.path.join(self.dir, "log.csv")
        write_log_csv(p, [TrainLogRow(0, 0, 1e-3, 0.5)])
        with open(p) as f:
            self.assertEqual(f.read(), "step,epoch,lr,loss\n0,0,0.001,0.5\n")


class TestPrepareScans (unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.dir = cls._tmp.name
        cls.manifest = generate_dataset(os.path.join(cls.dir, "data"), 4,
                                        spec=tiny_phantom_spec(), diseased_fraction=0.5)
        cls.segnet = SegNetModel(tiny_segnet_config()).freeze()
        cls.selection = SelectionReport([3., 1., 2., 0., 5., 4.], k=3)

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def test_requirements(self) -> None:
        with pytest.raises(BadConfig):
            prepare_scans(self.manifest, tiny_preproc(), "stfa")
        with pytest.raises(FrozenViolation):
            prepare_scans(self.manifest, tiny_preproc(), "baseline",
                          SegNetModel(tiny_segnet_config()))

    def test_baseline_guides(self) -> None:
        truth = prepare_scans(self.manifest, tiny_preproc(), "baseline")
        self.assertEqual(set(np.unique(truth[0].guide.array).tolist()), {0, 1, 2, 3})
        pred = prepare_scans(self.manifest, tiny_preproc(), "baseline", self.segnet)
        self.assertEqual([s.label for s in pred], [r.label for r in self.manifest])
        self.assertIsNone(pred[0].aggregate)

    def test_dyfa_selected(self) -> None:
        scans = prepare_scans(self.manifest, tiny_preproc(), "dyfa", self.segnet, self.selection)
        self.assertEqual(scans[0].selected.channels, 3)
        self.assertIsNone(scans[0].aggregate)

    def test_dyfa_loss_leaves_segnet_without_gradient(self) -> None:
        scans = prepare_scans(self.manifest, tiny_preproc(), "dyfa", self.segnet, self.selection)
        agg = DynamicConvAggregator(3)
        model = ClassifierModel(ClassifierConfig(1, 2, 2, 4, 2))
        x = patch_batch(scans, [(8, 8, 8)] * len(scans), PatchSpec((8, 8, 8)), "dyfa", agg)
        labels = np.array([s.label for s in scans])
        ops.softmax_cross_entropy(model(x), labels).backward()
        self.assertIsNotNone(agg.module().weight.grad)
        self.assertTrue(all(p.grad is None for p in self.segnet.parameters()))

    def test_stfa_cached(self) -> None:
        cache = os.path.join(self.dir, "cache")
        first = prepare_scans(self.manifest, tiny_preproc(), "stfa", self.segnet,
                              self.selection, cache_dir=cache)
        cached = [f for f in os.listdir(cache) if f.endswith(".stfa.vgr")]
        self.assertEqual(len(cached), 4)
        second = prepare_scans(self.manifest, tiny_preproc(), "stfa", self.segnet,
                               self.selection, cache_dir=cache, threads=1)
        for a, b in zip(first, second):
            self.assertEqual(a.aggregate, b.aggregate)

    def test_train_end_to_end(self) -> None:
        ckpt = os.path.join(self.dir, "clf.gnc")
        log_path = os.path.join(self.dir, "train_log.csv")
        cfg = TrainConfig(epochs=1, batch_size=2, mode="dyfa")
        model = ClassifierModel(ClassifierConfig(1, 2, 2, 4, 2))
        before = self.segnet.state_dict()
        log, agg = train(model, self.manifest, self.segnet, self.selection, cfg,
                         PatchSpec((8, 8, 8)), tiny_preproc(), checkpoint_path=ckpt,
                         log_path=log_path)
        self.assertEqual(len(log), 2)
        self.assertIsInstance(agg, DynamicConvAggregator)
        self.assertTrue(os.path.isfile(log_path))
        _, _, meta = load_classifier(ckpt)
        self.assertEqual(meta["optimizer_step"], 2)
        self.assertEqual(meta["patch"]["patch_dims"], [8, 8, 8])
        for (_, x), (_, y) in zip(before.items(), self.segnet.state_dict().items()):
            np.testing.assert_array_equal(x, y)


def test_default_aggregator() -> None:
    sel = SelectionReport([1., 2., 3.], k=2)
    assert default_aggregator("baseline", sel) is None
    assert default_aggregator("stfa", sel).num_maps == 2
    assert default_aggregator("dyfa", sel).num_maps == 2
    assert default_aggregator("dyfa", None).num_maps == 13
