"""
Command line interface: one verb per pipeline stage.

Every verb resolves its configuration as preset, then config file, then
flags, and writes ``config.json`` and ``provenance.json`` next to its
outputs.
"""
import argparse
import json
import logging
import os.path as osp
import sys
from typing import Any, Dict, List, Optional, Sequence

from smqtk_core import Configurable
from smqtk_core.dict import merge_dict
from smqtk_dataprovider.utils.file import safe_create_dir

from fusenet import __version__
from fusenet._defaults import DEFAULT_PRESET, PRESET_ALIASES, PRESETS, preset_name
from fusenet.clf3d import (
    ClassifierConfig,
    ClassifierModel,
    TrainConfig,
    infer,
    input_channels_for,
    load_classifier,
    patch_batch,
    prepare_scans,
    read_predictions,
    train,
    write_log_csv,
    write_predictions,
)
from fusenet.evalkit import (
    SUBSETS,
    DatasetManifest,
    SplitAssignment,
    evaluate,
    plot_roc_svg,
    read_roc_csv,
    split,
)
from fusenet.exceptions import (
    BadConfig,
    EmptyMask,
    FusenetError,
    IoFailure,
    MissingArtifacts,
    UsageError,
)
from fusenet.fusion import SelectionReport, extract_features, map_ids, merge_selection, select_maps
from fusenet.patcher import PatchSpec, inference_centers
from fusenet.preproc import PreprocConfig, PreprocessCache, preprocess_many
from fusenet.segnet import SegNetConfig, SegNetModel, evaluate_dice, pretrain
from fusenet.synthlab import PhantomSpec, generate_dataset
from fusenet.utils import THREADS_ENV, file_sha1
from fusenet.volgrid import MultiChannelVolume, write_volume


LOG = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
SEGNET_NAME = "segnet.gnc"
SELECTION_NAME = "selection.json"
SPLIT_NAME = "split.json"
CLASSIFIER_NAME = "classifier.gnc"
PREDICTIONS_NAME = "predictions.csv"
EVAL_DIR = "evaluation"
EVAL_SUBSETS = ("val", "test")


class RunConfig (Configurable):
    """
    Fully resolved configuration of one CLI run: the preset name plus one
    section per pipeline component.
    """

    SECTIONS = ("phantom", "synth", "preproc", "segnet", "pretrain", "select",
                "split", "classifier", "train", "patch")

    def __init__(self, preset: str = DEFAULT_PRESET,
                 phantom: Optional[Dict[str, Any]] = None,
                 synth: Optional[Dict[str, Any]] = None,
                 preproc: Optional[Dict[str, Any]] = None,
                 segnet: Optional[Dict[str, Any]] = None,
                 pretrain: Optional[Dict[str, Any]] = None,
                 select: Optional[Dict[str, Any]] = None,
                 split: Optional[Dict[str, Any]] = None,
                 classifier: Optional[Dict[str, Any]] = None,
                 train: Optional[Dict[str, Any]] = None,
                 patch: Optional[Dict[str, Any]] = None):
        preset = preset_name(preset)
        if preset not in PRESETS:
            raise BadConfig("Unknown preset '{}', expected one of {}"
                            .format(preset, sorted(PRESETS)))
        self.preset = preset
        given = dict(phantom=phantom, synth=synth, preproc=preproc, segnet=segnet,
                     pretrain=pretrain, select=select, split=split,
                     classifier=classifier, train=train, patch=patch)
        self.sections: Dict[str, Dict[str, Any]] = {
            s: dict(given[s] or {}) for s in self.SECTIONS
        }

    @classmethod
    def resolve(cls, preset: Optional[str] = None,
                file_config: Optional[Dict[str, Any]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Merge preset, file and override dicts, later ones winning.
        """
        file_config = dict(file_config or {})
        name = preset_name(preset or file_config.pop("preset", None) or DEFAULT_PRESET)
        file_config.pop("preset", None)
        if name not in PRESETS:
            raise BadConfig("Unknown preset '{}'".format(name))
        merged: Dict[str, Any] = json.loads(json.dumps(PRESETS[name]))
        merge_dict(merged, file_config)
        merge_dict(merged, overrides or {})
        unknown = set(merged) - set(cls.SECTIONS)
        if unknown:
            raise BadConfig("Unknown config sections: {}".format(sorted(unknown)))
        return cls(name, **merged)

    def get_config(self) -> Dict[str, Any]:
        c: Dict[str, Any] = {"preset": self.preset}
        c.update(json.loads(json.dumps(self.sections)))
        return c

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.sections[name])

    def phantom(self) -> PhantomSpec:
        return PhantomSpec.from_config(self.section("phantom"))

    def preproc(self) -> PreprocConfig:
        return PreprocConfig.from_config(self.section("preproc"))

    def segnet(self) -> SegNetConfig:
        return SegNetConfig.from_config(self.section("segnet"))

    def classifier(self, mode: str) -> ClassifierConfig:
        c = self.section("classifier")
        c["input_channels"] = input_channels_for(mode)
        return ClassifierConfig.from_config(c)

    def training(self) -> TrainConfig:
        return TrainConfig.from_config(self.section("train"))

    def patch(self, mode: str) -> PatchSpec:
        c = self.section("patch")
        c["channels"] = input_channels_for(mode)
        return PatchSpec.from_config(c)


#
# Config file and run directory helpers
#

def load_config_file(path: str) -> Dict[str, Any]:
    """
    Read a JSON or, with ``tomllib`` available, TOML config file.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as ex:
        raise IoFailure("Failed to read config '{}': {}".format(path, ex))
    if path.endswith(".toml"):
        try:
            import tomllib  # type: ignore
        except ImportError:
            raise BadConfig("TOML config files need Python 3.11 or later")
        return tomllib.loads(raw.decode("utf-8"))
    try:
        return json.loads(raw.decode("utf-8"))
    except ValueError as ex:
        raise BadConfig("Unparsable config '{}': {}".format(path, ex))


def _write_json(path: str, obj: Any) -> None:
    try:
        safe_create_dir(osp.dirname(osp.abspath(path)))
        with open(path, "w") as f:
            json.dump(obj, f, indent=1, sort_keys=True)
            f.write("\n")
    except OSError as ex:
        raise IoFailure("Failed to write '{}': {}".format(path, ex))


def write_run_records(out_dir: str, verb: str, config: RunConfig,
                      inputs: Sequence[str]) -> None:
    """
    Write the resolved config and merge this verb's provenance entry into
    ``provenance.json``: content hashes of input files and the package
    version.
    """
    _write_json(osp.join(out_dir, "config.json"), config.get_config())
    prov_path = osp.join(out_dir, "provenance.json")
    prov: Dict[str, Any] = {}
    if osp.isfile(prov_path):
        with open(prov_path) as f:
            prov = json.load(f)
    prov[verb] = {
        "version": __version__,
        "inputs": {osp.abspath(p): file_sha1(p) for p in inputs if osp.isfile(p)},
    }
    _write_json(prov_path, prov)


def _manifest(data_dir: str) -> DatasetManifest:
    path = osp.join(data_dir, MANIFEST_NAME)
    if not osp.isfile(path):
        raise MissingArtifacts("No manifest at '{}'".format(path))
    return DatasetManifest.read_csv(path)


def _require(path: str, what: str) -> str:
    if not osp.isfile(path):
        raise MissingArtifacts("Missing {} '{}'".format(what, path))
    return path


def _split(manifest: DatasetManifest, config: RunConfig, out_dir: str) -> SplitAssignment:
    """
    Read the run's split, or compute and write it on first use.
    """
    path = osp.join(out_dir, SPLIT_NAME)
    if osp.isfile(path):
        with open(path) as f:
            return SplitAssignment.from_json(f.read())
    s = config.section("split")
    assignment = split(manifest, s.get("fractions", (0.675, 0.225, 0.10)),
                       int(s.get("seed", 0)))
    try:
        safe_create_dir(out_dir)
        with open(path, "w") as f:
            f.write(assignment.to_json())
            f.write("\n")
    except OSError as ex:
        raise IoFailure("Failed to write split '{}': {}".format(path, ex))
    return assignment


def _cache(args: argparse.Namespace, config: RunConfig) -> Optional[PreprocessCache]:
    return PreprocessCache(args.cache, config.preproc()) if args.cache else None


#
# Verbs
#

def cmd_gen_synth(args: argparse.Namespace, config: RunConfig) -> None:
    s = config.section("synth")
    generate_dataset(
        args.out, int(s.get("n_scans", 100)), config.phantom(),
        diseased_fraction=float(s.get("diseased_fraction", 0.636)),
        multi_disease_rate=float(s.get("multi_disease_rate", 0.0)),
        seed=int(s.get("seed", 0)), signal=s.get("signal", "raw_visible"),
        threads=args.threads,
    )
    write_run_records(args.out, args.verb, config, [])


def cmd_preprocess(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = _manifest(args.data)
    cache = PreprocessCache(osp.join(args.out, "cache"), config.preproc())
    preprocess_many(manifest, config.preproc(), cache, args.threads)
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME)])


def cmd_pretrain_seg(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = _manifest(args.data)
    p = config.section("pretrain")
    holdout = int(p.get("holdout", 0))
    records = [r for r in manifest if r.mask_path]
    if holdout >= len(records):
        raise BadConfig("Hold-out of {} leaves no training phantoms".format(holdout))
    train_recs = records[:len(records) - holdout]
    held = records[len(records) - holdout:]
    if args.init:
        model = SegNetModel.load(_require(args.init, "initial segmentation checkpoint"))
    else:
        model = SegNetModel(config.segnet())
    ckpt = osp.join(args.out, SEGNET_NAME)
    log = pretrain(model, train_recs, int(p.get("epochs", 30)), int(p.get("seed", 0)),
                   config.preproc(), float(p.get("lr", 1e-3)), ckpt,
                   _cache(args, config), args.threads)
    write_log_csv(osp.join(args.out, "segnet_log.csv"), log)
    if held:
        scores = evaluate_dice(model, held, config.preproc(), _cache(args, config),
                               args.threads)
        _write_json(osp.join(args.out, "dice.json"), scores)
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME)] + ([args.init] if args.init else []))


def _segnet_path(args: argparse.Namespace) -> str:
    return _require(args.segnet or osp.join(args.out, SEGNET_NAME),
                    "segmentation checkpoint")


def cmd_select_features(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = _manifest(args.data)
    seg_path = _segnet_path(args)
    segnet = SegNetModel.load(seg_path)
    assignment = _split(manifest, config, args.out)
    records = manifest.subset(assignment.subset("train"))
    k = int(config.section("select").get("k", 13))
    ids = map_ids(segnet.config.stack_channels)
    reports = []
    for (vol, _), rec in zip(preprocess_many(records, config.preproc(),
                                             _cache(args, config), args.threads),
                             records):
        feats, pred = extract_features(segnet, vol)
        try:
            reports.append(select_maps(feats, pred, pred, k, ids))
        except EmptyMask:
            LOG.warning("Scan '%s' has no predicted lungs; skipped for "
                        "selection", rec.scan_id)
    if not reports:
        raise EmptyMask("No training scan had predicted lungs")
    merged = merge_selection(reports, k)
    merged.write(osp.join(args.out, SELECTION_NAME))
    LOG.info("Selected maps %s from %d scans", merged.selected_ids, len(reports))
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME), seg_path])


def _fusion_inputs(args: argparse.Namespace, mode: str):  # type: ignore
    seg_path = args.segnet or osp.join(args.out, SEGNET_NAME)
    sel_path = args.selection or osp.join(args.out, SELECTION_NAME)
    if mode == "baseline":
        segnet = SegNetModel.load(seg_path) if osp.isfile(seg_path) else None
        return segnet, None, [seg_path]
    segnet = SegNetModel.load(_require(seg_path, "segmentation checkpoint"))
    selection = SelectionReport.load(_require(sel_path, "feature selection"))
    return segnet, selection, [seg_path, sel_path]


def cmd_train(args: argparse.Namespace, config: RunConfig) -> None:
    mode = config.section("train").get("mode", "dyfa")
    manifest = _manifest(args.data)
    segnet, selection, inputs = _fusion_inputs(args, mode)
    assignment = _split(manifest, config, args.out)
    model = ClassifierModel(config.classifier(mode))
    train(model, manifest.subset(assignment.subset("train")), segnet, selection,
          config.training(), config.patch(mode), config.preproc(),
          checkpoint_path=osp.join(args.out, CLASSIFIER_NAME),
          log_path=osp.join(args.out, "train_log.csv"),
          cache_dir=args.cache, threads=args.threads)
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME)] + inputs)


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = _manifest(args.data)
    ckpt = _require(args.checkpoint or osp.join(args.out, CLASSIFIER_NAME),
                    "classifier checkpoint")
    model, aggregator, meta = load_classifier(ckpt)
    mode = meta["mode"]
    segnet, selection, inputs = _fusion_inputs(args, mode)
    spec = PatchSpec.from_config(meta["patch"])
    preproc = PreprocConfig.from_config(meta["preproc"])
    if args.subset == "all":
        records = list(manifest)
    else:
        records = manifest.subset(_split(manifest, config, args.out).subset(args.subset))
    scans = prepare_scans(records, preproc, mode, segnet, selection, spec,
                          aggregator, args.cache, args.threads)
    preds = infer(model, scans, spec, mode, aggregator, threads=args.threads)
    write_predictions(osp.join(args.out, PREDICTIONS_NAME), preds)
    if args.dump_patches:
        patch_dir = osp.join(args.out, "patches")
        for scan in scans:
            for i, c in enumerate(inference_centers(scan.guide, spec, scan.scan_id)):
                x = patch_batch([scan], [c], spec, mode, aggregator)
                write_volume(MultiChannelVolume(x.data[0], scan.ct.spacing_mm),
                             osp.join(patch_dir, "{}.{}.vgr".format(scan.scan_id, i)))
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME), ckpt] + inputs)


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> None:
    manifest = _manifest(args.data)
    pred_path = _require(osp.join(args.out, PREDICTIONS_NAME), "predictions")
    preds = read_predictions(pred_path)
    assignment = _split(manifest, config, args.out)
    for subset in EVAL_SUBSETS:
        report = evaluate(preds, manifest, assignment.subset(subset))
        report.write(osp.join(args.out, EVAL_DIR, "roc_{}.csv".format(subset)),
                     osp.join(args.out, EVAL_DIR, "roc_{}.json".format(subset)))
        LOG.info("%s AUC: %s", subset, report.summary()["auc"])
    write_run_records(args.out, args.verb, config,
                      [osp.join(args.data, MANIFEST_NAME), pred_path])


def roc_export(run_dir: str) -> List[str]:
    """
    Export per-class ROC CSVs and a five-curve SVG for each evaluated
    subset of a run.

    :raises MissingArtifacts: The run has not been evaluated.

    :return: Written file paths.
    """
    written = []
    for subset in EVAL_SUBSETS:
        csv_path = osp.join(run_dir, EVAL_DIR, "roc_{}.csv".format(subset))
        json_path = osp.join(run_dir, EVAL_DIR, "roc_{}.json".format(subset))
        if not (osp.isfile(csv_path) and osp.isfile(json_path)):
            raise MissingArtifacts("Run '{}' has no {} evaluation; run "
                                   "'evaluate' first".format(run_dir, subset))
        curves = read_roc_csv(csv_path)
        with open(json_path) as f:
            aucs = json.load(f)["auc"]
        export_dir = osp.join(run_dir, "roc")
        safe_create_dir(export_dir)
        for name, pts in curves.items():
            path = osp.join(export_dir, "{}_{}.csv".format(subset, name))
            with open(path, "w") as f:
                f.write("fpr,tpr\n")
                for fpr, tpr in pts:
                    f.write("{!r},{!r}\n".format(fpr, tpr))
            written.append(path)
        svg = osp.join(export_dir, "{}.svg".format(subset))
        plot_roc_svg(curves, aucs, svg, title="ROC ({})".format(subset))
        written.append(svg)
    return written


def cmd_roc_export(args: argparse.Namespace, config: RunConfig) -> None:
    roc_export(args.out)


VERBS = {
    "gen-synth": cmd_gen_synth,
    "preprocess": cmd_preprocess,
    "pretrain-seg": cmd_pretrain_seg,
    "select-features": cmd_select_features,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "roc-export": cmd_roc_export,
}


#
# Argument parsing
#

class _Parser (argparse.ArgumentParser):
    """ Raises UsageError instead of exiting. """

    def error(self, message: str) -> None:  # type: ignore
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file")
    common.add_argument("--preset", choices=sorted(set(PRESETS) | set(PRESET_ALIASES)))
    common.add_argument("--seed", type=int, help="Seed of this verb's stage")
    common.add_argument("--out", required=True, help="Output (run or data) directory")
    common.add_argument("--threads", type=int,
                        help="Worker cap, overrides {}".format(THREADS_ENV))
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--data", required=True, help="Dataset directory with manifest.csv")
    data.add_argument("--cache", help="Preprocessing cache directory")

    parser = _Parser(prog="fusenet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synth", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--n", type=int, dest="n_scans")
    p.add_argument("--signal", choices=("raw_visible", "feature_favored"))
    p.add_argument("--diseased-fraction", type=float)
    p.add_argument("--multi-disease-rate", type=float)

    sub.add_parser("preprocess", parents=[common, data], help="Fill the preprocessing cache")

    p = sub.add_parser("pretrain-seg", parents=[common, data],
                       help="Pre-train or fine-tune the segmentation network")
    p.add_argument("--init", help="Checkpoint to fine-tune from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--holdout", type=int, help="Phantoms held out for Dice")

    p = sub.add_parser("select-features", parents=[common, data],
                       help="Select lung-responsive feature maps")
    p.add_argument("--segnet")
    p.add_argument("--k", type=int)

    p = sub.add_parser("train", parents=[common, data], help="Train the classifier")
    p.add_argument("--mode", choices=("baseline", "stfa", "dyfa"))
    p.add_argument("--segnet")
    p.add_argument("--selection")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("infer", parents=[common, data], help="Classify scans")
    p.add_argument("--checkpoint")
    p.add_argument("--segnet")
    p.add_argument("--selection")
    p.add_argument("--subset", choices=("all",) + SUBSETS, default="all")
    p.add_argument("--dump-patches", action="store_true")

    sub.add_parser("evaluate", parents=[common, data],
                   help="ROC analysis of validation and test predictions")
    sub.add_parser("roc-export", parents=[common], help="Export ROC CSVs and SVG plots")
    return parser


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Config overrides from verb flags that were given.
    """
    mapping = {
        "gen-synth": {"n_scans": ("synth", "n_scans"), "signal": ("synth", "signal"),
                      "diseased_fraction": ("synth", "diseased_fraction"),
                      "multi_disease_rate": ("synth", "multi_disease_rate"),
                      "seed": ("synth", "seed")},
        "pretrain-seg": {"epochs": ("pretrain", "epochs"), "seed": ("pretrain", "seed"),
                         "holdout": ("pretrain", "holdout")},
        "select-features": {"k": ("select", "k"), "seed": ("split", "seed")},
        "train": {"mode": ("train", "mode"), "epochs": ("train", "epochs"),
                  "batch_size": ("train", "batch_size"), "seed": ("train", "seed")},
    }
    out: Dict[str, Any] = {}
    for attr, (section, key) in mapping.get(args.verb, {}).items():
        v = getattr(args, attr, None)
        if v is not None:
            out.setdefault(section, {})[key] = v
    return out


def _error_line(ex: Exception) -> str:
    return json.dumps({"error": type(ex).__name__, "message": str(ex)}, sort_keys=True)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one verb.

    :return: 0 on success, 1 on a pipeline error, 2 on a usage error.
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as ex:
        sys.stderr.write(_error_line(ex) + "\n")
        return 2
    except SystemExit as ex:
        # --help and --version
        return int(ex.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        file_config = load_config_file(args.config) if args.config else None
        config = RunConfig.resolve(args.preset, file_config, flag_overrides(args))
        LOG.info("Running '%s' into '%s'", args.verb, args.out)
        VERBS[args.verb](args, config)
    except UsageError as ex:
        sys.stderr.write(_error_line(ex) + "\n")
        return 2
    except FusenetError as ex:
        LOG.debug("Failure detail", exc_info=True)
        sys.stderr.write(_error_line(ex) + "\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
