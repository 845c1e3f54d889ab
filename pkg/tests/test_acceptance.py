"""
Desk-scale experiments exercising the whole pipeline. The long ones are
marked ``slow`` and only run with ``--run-slow``.
"""
import os
import tempfile
import unittest
from typing import Dict, List, Tuple

import numpy as np
import pytest

from fusenet.cli import RunConfig
from fusenet.clf3d import (
    ClassifierConfig,
    ClassifierModel,
    TrainConfig,
    infer,
    input_channels_for,
    load_classifier,
    prepare_scans,
    train,
)
from fusenet.evalkit import (
    POOLED,
    DatasetManifest,
    ScanRecord,
    _stratum_key,
    auc,
    evaluate,
    roc_points,
    split,
    trapezoid_area,
)
from fusenet.exceptions import EmptyMask
from fusenet.fusion import (
    DyFAAggregator,
    dyfa_forward,
    extract_features,
    map_ids,
    merge_selection,
    select_maps,
    stfa,
)
from fusenet.gradnet import Tensor, no_grad
from fusenet.preproc import preprocess_many, preprocess_scan
from fusenet.segnet import SegNetConfig, SegNetModel, evaluate_dice, pretrain
from fusenet.synthlab import generate_dataset, generate_phantom, patient_ids
from fusenet.volgrid import MultiChannelVolume

from tests.test_evalkit import pair_count_auc


DESK = RunConfig.resolve("desk")


class TestAucOracle (unittest.TestCase):

    def test_trapezoid_equals_pair_count(self) -> None:
        rng = np.random.default_rng(2024)
        for case in range(200):
            n = int(rng.integers(2, 60))
            if case % 3 == 0:
                scores = rng.integers(0, 3, size=n).astype(float)  # tie heavy
            else:
                scores = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            # A single positive.
            if case % 10 == 0:
                labels[:] = 0
            labels[0], labels[-1] = 1, 0
            expected = pair_count_auc(scores.tolist(), labels.tolist())
            self.assertAlmostEqual(trapezoid_area(roc_points(scores, labels)), expected,
                                   delta=1e-12)
            self.assertAlmostEqual(auc(scores, labels), expected, delta=1e-12)


class TestDyfaStartsAsStfa (unittest.TestCase):

    def test_twenty_volumes(self) -> None:
        agg = DyFAAggregator(13)
        rng = np.random.default_rng(0)
        for _ in range(20):
            vol = MultiChannelVolume(rng.random((13, 6, 7, 8)))
            with no_grad():
                out = dyfa_forward(agg, Tensor(vol.array[np.newaxis])).data[0, 0]
            self.assertLessEqual(float(np.abs(out - stfa(vol).array).max()), 1e-6)


class TestSplitInvariant (unittest.TestCase):

    def test_hundred_manifests(self) -> None:
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(20, 120))
            patients = patient_ids(n, {1: 0.7, 2: 0.2, 3: 0.1}, rng)
            records = []
            for i, p in enumerate(patients):
                flags = {}
                if rng.random() < 0.6:
                    flags[str(rng.choice(["mass", "emphysema", "nodules",
                                          "pneumonia_atelectasis"]))] = True
                records.append(ScanRecord("s{}".format(i), p, "v", **flags))
            manifest = DatasetManifest(records)
            s = split(manifest, seed=seed)

            groups: Dict[str, List[ScanRecord]] = {}
            for r in manifest:
                groups.setdefault(r.patient_id, []).append(r)
            for g in groups.values():
                self.assertEqual(len(set(s[r.scan_id] for r in g)), 1)

            strata: Dict[Tuple[str, ...], List[str]] = {}
            for g in groups.values():
                strata.setdefault(_stratum_key(g), []).extend(r.scan_id for r in g)
            for ids in strata.values():
                for name, frac in zip(("train", "val", "test"), s.fractions):
                    got = sum(1 for i in ids if s[i] == name)
                    self.assertLessEqual(abs(got - frac * len(ids)), 2 + 1e-9)


@pytest.mark.slow
class TestSegmentationBar (unittest.TestCase):

    def test_lungs_dice(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            manifest = generate_dataset(d, 25, DESK.phantom(), diseased_fraction=0., seed=7)
            records = list(manifest)
            model = SegNetModel(DESK.segnet())
            pretrain(model, records[:20], 30, 7, DESK.preproc(), lr=1e-3)
            scores = evaluate_dice(model, records[20:], DESK.preproc())
        self.assertGreaterEqual(scores["lungs"], 0.90)


@pytest.mark.slow
class TestMutingInvariant (unittest.TestCase):

    def test_sixty_channels_muted(self) -> None:
        segnet = SegNetModel(SegNetConfig()).freeze()
        spec = DESK.phantom()
        for seed in range(10):
            vol, _ = generate_phantom(spec, seed)
            feats, pred = extract_features(segnet, preprocess_scan(vol, DESK.preproc()))
            self.assertEqual(feats.channels, 60)
            self.assertEqual(float(np.abs(feats.array[:, pred.array == 0]).sum()), 0.)


@pytest.mark.slow
class TestDeskPipeline (unittest.TestCase):
    """
    Feature-favored dataset: fused modes should beat the raw baseline.
    """

    SEEDS = (0, 1, 2)

    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        root = cls._tmp.name
        cls.manifest = generate_dataset(os.path.join(root, "data"), 120, DESK.phantom(),
                                        diseased_fraction=0.646, signal="feature_favored",
                                        seed=11)
        cls.split = split(cls.manifest, seed=0)
        cls.train_set = cls.manifest.subset(cls.split.subset("train"))
        cls.val_ids = cls.split.subset("val")
        cls.seg_path = os.path.join(root, "segnet.gnc")
        segnet = SegNetModel(DESK.segnet())
        pretrain(segnet, list(cls.train_set)[:20], 30, 0, DESK.preproc(),
                 checkpoint_path=cls.seg_path)
        cls.segnet = SegNetModel.load(cls.seg_path)
        ids = map_ids(cls.segnet.config.stack_channels)
        reports = []
        for vol, _ in preprocess_many(cls.train_set, DESK.preproc()):
            feats, pred = extract_features(cls.segnet, vol)
            try:
                reports.append(select_maps(feats, pred, pred, 13, ids))
            except EmptyMask:
                continue
        cls.selection = merge_selection(reports, 13)
        cls.root = root

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def pooled_auc(self, mode: str, seed: int) -> float:
        cfg = TrainConfig.from_config(dict(DESK.section("train"), mode=mode, seed=seed))
        model = ClassifierModel(ClassifierConfig.from_config(dict(
            DESK.section("classifier"), input_channels=input_channels_for(mode), seed=seed)))
        spec = DESK.patch(mode)
        ckpt = os.path.join(self.root, "{}-{}.gnc".format(mode, seed))
        train(model, self.train_set, self.segnet, self.selection, cfg, spec, DESK.preproc(),
              checkpoint_path=ckpt, cache_dir=os.path.join(self.root, "cache"))
        model, aggregator, _ = load_classifier(ckpt)
        val = self.manifest.subset(self.val_ids)
        scans = prepare_scans(val, DESK.preproc(), mode, self.segnet, self.selection,
                              spec, aggregator, os.path.join(self.root, "cache"))
        preds = infer(model, scans, spec, mode, aggregator)
        report = evaluate(preds, self.manifest, self.val_ids)
        return float(report[POOLED].auc)

    def test_fusion_beats_baseline(self) -> None:
        with open(self.seg_path, "rb") as f:
            seg_bytes = f.read()
        results = {mode: float(np.mean([self.pooled_auc(mode, s) for s in self.SEEDS]))
                   for mode in ("baseline", "stfa", "dyfa")}
        self.assertGreaterEqual(results["stfa"], results["baseline"] + 0.03, results)
        self.assertGreaterEqual(results["dyfa"], results["baseline"] + 0.03, results)
        # Classifier training leaves the segmentation checkpoint untouched.
        with open(self.seg_path, "rb") as f:
            self.assertEqual(f.read(), seg_bytes)
        self.assertEqual(SegNetModel.load(self.seg_path).state_dict().keys(),
                         self.segnet.state_dict().keys())
        for (_, a), (_, b) in zip(SegNetModel.load(self.seg_path).state_dict().items(),
                                  self.segnet.state_dict().items()):
            np.testing.assert_array_equal(a, b)


@pytest.mark.slow
class TestRawVisibleBaseline (unittest.TestCase):
    """
    Lesions visible in raw HU: the CT-only classifier separates them.
    """

    def test_baseline_auc(self) -> None:
        with tempfile.TemporaryDirectory() as root:
            manifest = generate_dataset(os.path.join(root, "data"), 120, DESK.phantom(),
                                        signal="raw_visible", seed=5)
            s = split(manifest, seed=0)
            held_out = s.subset("val") + s.subset("test")
            cfg = TrainConfig.from_config(dict(DESK.section("train"), mode="baseline"))
            model = ClassifierModel(DESK.classifier("baseline"))
            spec = DESK.patch("baseline")
            cache = os.path.join(root, "cache")
            ckpt = os.path.join(root, "baseline.gnc")
            train(model, manifest.subset(s.subset("train")), None, None, cfg, spec,
                  DESK.preproc(), checkpoint_path=ckpt, cache_dir=cache)
            model, _, _ = load_classifier(ckpt)
            scans = prepare_scans(manifest.subset(held_out), DESK.preproc(), "baseline",
                                  spec=spec, cache_dir=cache)
            report = evaluate(infer(model, scans, spec, "baseline"), manifest, held_out)
        self.assertGreater(float(report[POOLED].auc), 0.8)
