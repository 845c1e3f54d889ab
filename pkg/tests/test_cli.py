import contextlib
import io
import json
import os
import tempfile
import unittest
from typing import Any, Dict, List, Tuple

import numpy as np
import pytest

from smqtk_core.configuration import configuration_test_helper

from fusenet import __version__
from fusenet.cli import RunConfig, build_parser, load_config_file, roc_export, run
from fusenet.clf3d import read_predictions
from fusenet.evalkit import DatasetManifest
from fusenet.exceptions import BadConfig, MissingArtifacts
from fusenet.fusion import SelectionReport
from fusenet.segnet import SegNetModel, pretrain

from tests import tiny_preproc, tiny_segnet_config


#: Shrinks the desk preset to 16 voxel scans and tiny networks.
TINY_CONFIG: Dict[str, Any] = {
    "phantom": {"dims": [16, 16, 16], "spacing_mm": [5., 5., 5.]},
    "synth": {"n_scans": 8, "diseased_fraction": 0.5},
    "preproc": {"target_spacing_mm": [5., 5., 5.], "target_dims": [16, 16, 16]},
    "segnet": {"stack_channels": [2, 2, 2], "dense_layers_per_stack": 1,
               "init_channels": 2, "skip_channels": 2, "prior_grid": 2},
    "pretrain": {"epochs": 1, "holdout": 1, "lr": 1e-2},
    "select": {"k": 3},
    "split": {"fractions": [0.5, 0.25, 0.25]},
    "classifier": {"blocks_per_resolution": 1, "resolutions": 2,
                   "base_channels": 2, "max_channels": 4},
    "train": {"epochs": 1, "batch_size": 2},
    "patch": {"patch_dims": [8, 8, 8]},
}


def run_cli(*argv: str) -> Tuple[int, List[Dict[str, Any]]]:
    """ Exit code and the JSON error lines written to stderr. """
    err = io.StringIO()
    with contextlib.redirect_stderr(err):
        code = run(list(argv))
    lines = [json.loads(ln) for ln in err.getvalue().splitlines()
             if ln.startswith("{")]
    return code, lines


class TestRunConfig (unittest.TestCase):

    def test_configuration(self) -> None:
        c = RunConfig.resolve("desk", None, {"train": {"epochs": 2}})
        for inst in configuration_test_helper(c):  # type: RunConfig
            assert inst.preset == "desk"
            assert inst.section("train")["epochs"] == 2
            assert inst.section("train")["batch_size"] == 8

    def test_precedence(self) -> None:
        c = RunConfig.resolve(None, {"preset": "paper", "train": {"epochs": 3, "seed": 4}},
                              {"train": {"epochs": 5}})
        self.assertEqual(c.preset, "paper")
        train = c.section("train")
        self.assertEqual((train["epochs"], train["seed"], train["batch_size"]), (5, 4, 16))

    def test_paper_preset_and_alias(self) -> None:
        paper = RunConfig.resolve("paper")
        self.assertEqual(paper.preset, "paper")
        self.assertEqual(paper.section("patch")["patch_dims"], [112, 112, 112])
        self.assertEqual(RunConfig.resolve("full").get_config(), paper.get_config())
        self.assertEqual(RunConfig("full").preset, "paper")
        args = build_parser().parse_args(["train", "--out", "o", "--data", "d",
                                          "--preset", "paper"])
        self.assertEqual(args.preset, "paper")

    def test_typed_sections(self) -> None:
        c = RunConfig.resolve("desk", TINY_CONFIG)
        self.assertEqual(c.preproc(), tiny_preproc())
        self.assertEqual(c.segnet().tap_channels, 6)
        self.assertEqual(c.classifier("baseline").input_channels, 1)
        self.assertEqual(c.patch("dyfa").channels, 2)
        self.assertEqual(c.training().batch_size, 2)

    def test_rejects_unknowns(self) -> None:
        self.assertRaises(BadConfig, RunConfig.resolve, "huge")
        self.assertRaises(BadConfig, RunConfig.resolve, None, {"optimizer": {}})

    def test_config_files(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "c.json")
            with open(p, "w") as f:
                json.dump({"select": {"k": 5}}, f)
            self.assertEqual(load_config_file(p), {"select": {"k": 5}})
            with open(p, "w") as f:
                f.write("{not json")
            self.assertRaises(BadConfig, load_config_file, p)

    def test_toml_file(self) -> None:
        pytest.importorskip("tomllib")
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "c.toml")
            with open(p, "w") as f:
                f.write('preset = "desk"\n[train]\nepochs = 2\n')
            self.assertEqual(load_config_file(p), {"preset": "desk", "train": {"epochs": 2}})


class TestExitCodes (unittest.TestCase):

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_usage_errors(self) -> None:
        for argv in ([], ["train", "--out", self.dir], ["bogus", "--out", self.dir],
                     ["gen-synth", "--out", self.dir, "--preset", "huge"]):
            code, lines = run_cli(*argv)
            self.assertEqual(code, 2, argv)
            self.assertEqual(lines[-1]["error"], "UsageError")

    def test_missing_artifacts(self) -> None:
        code, lines = run_cli("roc-export", "--out", self.dir)
        self.assertEqual(code, 1)
        self.assertEqual(lines[-1]["error"], "MissingArtifacts")
        code, lines = run_cli("train", "--out", self.dir, "--data", self.dir)
        self.assertEqual(code, 1)
        self.assertEqual(lines[-1]["error"], "MissingArtifacts")

    def test_bad_config_file(self) -> None:
        p = os.path.join(self.dir, "c.json")
        with open(p, "w") as f:
            json.dump({"optimizer": {"lr": 1}}, f)
        code, lines = run_cli("gen-synth", "--out", self.dir, "--config", p)
        self.assertEqual(code, 1)
        self.assertEqual(lines[-1]["error"], "BadConfig")

    def test_version(self) -> None:
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            self.assertEqual(run(["--version"]), 0)
        self.assertIn(__version__, out.getvalue())


class TestPipeline (unittest.TestCase):
    """
    Every verb in order on a tiny dataset.
    """

    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        root = cls._tmp.name
        cls.config = os.path.join(root, "tiny.json")
        with open(cls.config, "w") as f:
            json.dump(TINY_CONFIG, f)
        cls.data = os.path.join(root, "data")
        cls.run_dir = os.path.join(root, "run")

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def verb(self, *argv: str) -> None:
        code, lines = run_cli(argv[0], "--config", self.config, *argv[1:])
        self.assertEqual(code, 0, lines)

    def lung_biased_segnet(self, path: str) -> None:
        """
        Untrained network driven by its spatial prior alone: left lung over
        the low z half of the volume, body over the rest.
        """
        model = SegNetModel(tiny_segnet_config())
        state = model.state_dict()
        for name in state:
            if name.startswith("skip"):
                state[name] = np.zeros_like(state[name])
        state["prior"] = np.zeros_like(state["prior"])
        state["prior"][0, :, 0] = 2.
        state["head_conv.weight"] = np.zeros_like(state["head_conv.weight"])
        state["head_conv.weight"][2, :, 1, 1, 1] = 1.
        state["head_conv.bias"] = np.array([0., 0.5, 0., 0.], dtype=np.float32)
        model.load_state_dict(state)
        pretrain(model, DatasetManifest.read_csv(os.path.join(self.data, "manifest.csv")),
                 0, 0, tiny_preproc(), checkpoint_path=path)

    def test_pipeline(self) -> None:
        self.verb("gen-synth", "--out", self.data, "--seed", "3")
        manifest = DatasetManifest.read_csv(os.path.join(self.data, "manifest.csv"))
        self.assertEqual(len(manifest), 8)
        self.assertEqual(sum(1 for r in manifest if not r.normal), 4)

        self.verb("preprocess", "--data", self.data, "--out", self.run_dir)
        self.assertTrue(os.listdir(os.path.join(self.run_dir, "cache")))

        seg_run = os.path.join(self.run_dir, "seg")
        self.verb("pretrain-seg", "--data", self.data, "--out", seg_run)
        with open(os.path.join(seg_run, "segnet_log.csv")) as f:
            self.assertEqual(len(f.read().splitlines()), 1 + 7)
        with open(os.path.join(seg_run, "dice.json")) as f:
            self.assertEqual(set(json.load(f)), {"1", "2", "3", "lungs"})

        init = os.path.join(self.run_dir, "biased.gnc")
        self.lung_biased_segnet(init)
        self.verb("pretrain-seg", "--data", self.data, "--out", self.run_dir,
                  "--init", init, "--epochs", "0")
        self.assertTrue(SegNetModel.load(os.path.join(self.run_dir, "segnet.gnc")).frozen)

        self.verb("select-features", "--data", self.data, "--out", self.run_dir)
        selection = SelectionReport.load(os.path.join(self.run_dir, "selection.json"))
        self.assertEqual(selection.k, 3)
        self.assertEqual(len(selection.scores), 6)
        self.assertTrue(os.path.isfile(os.path.join(self.run_dir, "split.json")))

        self.verb("train", "--data", self.data, "--out", self.run_dir, "--mode", "dyfa")
        self.assertTrue(os.path.isfile(os.path.join(self.run_dir, "classifier.gnc")))
        self.assertTrue(os.path.isfile(os.path.join(self.run_dir, "train_log.csv")))

        self.verb("infer", "--data", self.data, "--out", self.run_dir, "--dump-patches")
        preds = read_predictions(os.path.join(self.run_dir, "predictions.csv"))
        self.assertEqual(sorted(p.scan_id for p in preds), manifest.scan_ids())
        self.assertTrue(all(0. <= p.probability <= 1. for p in preds))
        self.assertEqual(len(os.listdir(os.path.join(self.run_dir, "patches"))), 8 * 6)

        self.verb("evaluate", "--data", self.data, "--out", self.run_dir)
        for subset in ("val", "test"):
            with open(os.path.join(self.run_dir, "evaluation",
                                   "roc_{}.json".format(subset))) as f:
                self.assertEqual(len(json.load(f)["auc"]), 5)

        self.verb("roc-export", "--out", self.run_dir)
        self.assertTrue(os.path.isfile(os.path.join(self.run_dir, "roc", "val.svg")))
        self.assertEqual(roc_export(self.run_dir), roc_export(self.run_dir))

        with open(os.path.join(self.run_dir, "provenance.json")) as f:
            prov = json.load(f)
        self.assertEqual(set(prov), {"preprocess", "pretrain-seg", "select-features",
                                     "train", "infer", "evaluate", "roc-export"})
        self.assertEqual(prov["train"]["version"], __version__)
        self.assertTrue(all(len(h) == 40 for h in prov["infer"]["inputs"].values()))
        with open(os.path.join(self.run_dir, "config.json")) as f:
            self.assertEqual(json.load(f)["select"]["k"], 3)

    def test_roc_export_needs_evaluation(self) -> None:
        with tempfile.TemporaryDirectory() as d:
            self.assertRaises(MissingArtifacts, roc_export, d)
