"""
Dataset manifests, patient-exclusive stratified splitting and ROC analysis.
"""
from collections import OrderedDict
import csv
import json
import logging
import os.path as osp
from typing import (
    Any, Dict, Hashable, Iterable, Iterator, List, Mapping, NamedTuple,
    Optional, Sequence, Tuple
)

import numpy as np
import scipy.stats

from smqtk_dataprovider.utils.file import safe_create_dir

from fusenet.exceptions import (
    BadFractions,
    DegenerateLabels,
    DuplicateScanError,
    IoFailure,
    LabelInconsistency,
    MissingPredictions,
)


LOG = logging.getLogger(__name__)

#: Disease flags, in manifest column order.
DISEASES = ("pneumonia_atelectasis", "mass", "emphysema", "nodules")
#: Name of the all-diseased versus normal ROC entry.
POOLED = "pooled"
MANIFEST_COLUMNS = ("scan_id", "patient_id", "volume_path", "mask_path") \
    + DISEASES + ("normal",)
SUBSETS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.675, 0.225, 0.10)
ROC_POINT_T = Tuple[float, float]


class ScanRecord (NamedTuple):
    """
    One scan of a dataset manifest with case-level disease flags.
    """
    scan_id: str
    patient_id: str
    volume_path: str
    mask_path: Optional[str] = None
    pneumonia_atelectasis: bool = False
    mass: bool = False
    emphysema: bool = False
    nodules: bool = False

    @property
    def diseases(self) -> Tuple[str, ...]:
        return tuple(d for d in DISEASES if getattr(self, d))

    @property
    def normal(self) -> bool:
        return not self.diseases

    @property
    def label(self) -> int:
        """ Binary train-time label: all diseases collapse to class 1. """
        return 0 if self.normal else 1


def _parse_flag(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes")


class DatasetManifest (object):
    """
    Ordered collection of :class:`ScanRecord` with unique scan ids.

    :param records: Scan records, in manifest order.

    :raises DuplicateScanError: A scan id appears more than once.
    """

    def __init__(self, records: Iterable[ScanRecord]):
        self._records: List[ScanRecord] = list(records)
        self._by_id: Dict[str, ScanRecord] = {}
        for r in self._records:
            if r.scan_id in self._by_id:
                raise DuplicateScanError(r.scan_id)
            self._by_id[r.scan_id] = r

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[ScanRecord]:
        return iter(self._records)

    def __getitem__(self, scan_id: str) -> ScanRecord:
        return self._by_id[scan_id]

    def __contains__(self, scan_id: Hashable) -> bool:
        return scan_id in self._by_id

    def scan_ids(self) -> List[str]:
        return [r.scan_id for r in self._records]

    def subset(self, scan_ids: Iterable[str]) -> "DatasetManifest":
        """
        Records for the given ids, kept in manifest order.
        """
        keep = set(scan_ids)
        return DatasetManifest(r for r in self._records if r.scan_id in keep)

    @classmethod
    def read_csv(cls, path: str) -> "DatasetManifest":
        """
        Read a manifest CSV. Relative volume and mask paths are resolved
        against the directory containing the manifest.

        :raises LabelInconsistency: A row's ``normal`` column disagrees with
            its disease columns.
        """
        root = osp.dirname(osp.abspath(path))

        def resolve(p: str) -> str:
            return p if osp.isabs(p) else osp.join(root, p)

        records = []
        try:
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    flags = {d: _parse_flag(row[d]) for d in DISEASES}
                    r = ScanRecord(
                        scan_id=row["scan_id"],
                        patient_id=row["patient_id"],
                        volume_path=resolve(row["volume_path"]),
                        mask_path=resolve(row["mask_path"]) if row.get("mask_path") else None,
                        **flags
                    )
                    if "normal" in row and _parse_flag(row["normal"]) != r.normal:
                        raise LabelInconsistency(
                            "Scan '{}' normal flag disagrees with its disease "
                            "flags".format(r.scan_id)
                        )
                    records.append(r)
        except OSError as ex:
            raise IoFailure("Failed to read manifest '{}': {}".format(path, ex))
        return cls(records)

    def write_csv(self, path: str) -> None:
        """
        Write this manifest as CSV. Paths under the manifest's directory are
        written relative to it.
        """
        root = osp.dirname(osp.abspath(path))

        def rel(p: Optional[str]) -> str:
            if not p:
                return ""
            p = osp.abspath(p)
            return osp.relpath(p, root) if p.startswith(root + osp.sep) else p

        safe_create_dir(root)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self._records:
                w.writerow(
                    [r.scan_id, r.patient_id, rel(r.volume_path), rel(r.mask_path)]
                    + [int(getattr(r, d)) for d in DISEASES]
                    + [int(r.normal)]
                )


#
# Splitting
#

class SplitAssignment (object):
    """
    Mapping of scan id to one of ``train``, ``val`` or ``test``.
    """

    def __init__(self, assignment: Mapping[str, str],
                 fractions: Sequence[float] = DEFAULT_FRACTIONS):
        bad = set(assignment.values()) - set(SUBSETS)
        if bad:
            raise ValueError("Unknown subset names: {}".format(sorted(bad)))
        self.assignment: Dict[str, str] = dict(assignment)
        self.fractions = tuple(float(f) for f in fractions)

    def __getitem__(self, scan_id: str) -> str:
        return self.assignment[scan_id]

    def subset(self, name: str) -> List[str]:
        """ Scan ids of a subset, in assignment insertion order. """
        return [s for s, n in self.assignment.items() if n == name]

    def to_json(self) -> str:
        return json.dumps({"fractions": list(self.fractions),
                           "assignment": self.assignment},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        return cls(d["assignment"], d["fractions"])


def _stratum_key(records: Sequence[ScanRecord]) -> Tuple[str, ...]:
    names = set()
    for r in records:
        names.update(r.diseases or ("normal",))
    return tuple(sorted(names))


def split(manifest: DatasetManifest,
          fractions: Sequence[float] = DEFAULT_FRACTIONS,
          seed: int = 0) -> SplitAssignment:
    """
    Patient-exclusive stratified split into train/validation/test subsets.

    Scans are grouped by patient, patient groups are stratified by the union
    of their label flags, shuffled by ``seed`` and then assigned greedily
    (largest groups first) to whichever subset is furthest below its target
    count within the stratum. No patient ever spans two subsets.

    :param manifest: Dataset to split.
    :param fractions: Target ``(train, val, test)`` fractions summing to 1.
    :param seed: Shuffle seed.

    :raises BadFractions: Fractions are not three non-negative values
        summing to 1.

    :return: The split assignment.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.) > 1e-9:
        raise BadFractions("Fractions must be three non-negative values "
                           "summing to 1, given {}".format(fr))
    groups: "OrderedDict[str, List[ScanRecord]]" = OrderedDict()
    for r in manifest:
        groups.setdefault(r.patient_id, []).append(r)

    strata: Dict[Tuple[str, ...], List[List[ScanRecord]]] = {}
    for g in groups.values():
        strata.setdefault(_stratum_key(g), []).append(g)

    rng = np.random.default_rng(seed)
    assignment: Dict[str, str] = {}
    for key in sorted(strata):
        s_groups = strata[key]
        order = rng.permutation(len(s_groups))
        # Stable sort keeps the shuffled order among equal sizes.
        shuffled = sorted((s_groups[i] for i in order), key=len, reverse=True)
        total = sum(len(g) for g in shuffled)
        counts = np.zeros(3)
        targets = np.asarray(fr) * total
        for g in shuffled:
            i = int(np.argmax(targets - counts))
            counts[i] += len(g)
            for r in g:
                assignment[r.scan_id] = SUBSETS[i]
        LOG.debug("Stratum %s: %d scans -> %s", key, total, counts.tolist())
    # Report in manifest order.
    ordered = OrderedDict((r.scan_id, assignment[r.scan_id]) for r in manifest)
    return SplitAssignment(ordered, fr)


#
# ROC analysis
#

def _validate_binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("Scores and labels differ in length ({} vs {})"
                         .format(s.size, y.size))
    if not np.isin(y, (0, 1)).all():
        raise ValueError("Labels must be binary (0 or 1)")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DegenerateLabels(
            "At least one positive and one negative are required "
            "(positives={}, negatives={})".format(int(y.sum()), int((~y).sum()))
        )
    return s, y


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve via the Mann-Whitney U statistic, with ties
    receiving half credit.

    >>> auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    0.75

    :raises DegenerateLabels: No positives or no negatives.
    """
    s, y = _validate_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = scipy.stats.rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.
    return float(u / (n_pos * n_neg))


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> List[ROC_POINT_T]:
    """
    ROC ``(fpr, tpr)`` points with one threshold per distinct score, in
    descending score order, starting at ``(0, 0)`` and ending at ``(1, 1)``.

    :raises DegenerateLabels: No positives or no negatives.
    """
    s, y = _validate_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s = s[order]
    y = y[order]
    distinct = np.flatnonzero(np.diff(s))
    thresh_idx = np.concatenate([distinct, [y.size - 1]])
    tps = np.cumsum(y)[thresh_idx]
    fps = 1 + thresh_idx - tps
    fpr = np.concatenate([[0.], fps / fps[-1]])
    tpr = np.concatenate([[0.], tps / tps[-1]])
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points: Sequence[ROC_POINT_T]) -> float:
    """ Trapezoidal area under a sequence of ``(x, y)`` points. """
    p = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(p[:, 0]) * (p[1:, 1] + p[:-1, 1]) / 2.))


class RocEntry (NamedTuple):
    """
    One ROC comparison: a positive class against all normal scans.

    ``auc`` and ``points`` are None when the comparison is degenerate.
    """
    name: str
    scan_ids: Tuple[str, ...]
    scores: Tuple[float, ...]
    labels: Tuple[int, ...]
    points: Optional[Tuple[ROC_POINT_T, ...]]
    auc: Optional[float]

    @property
    def degenerate(self) -> bool:
        return self.auc is None


class RocReport (object):
    """
    Per-disease and pooled ROC entries for one evaluated subset.
    """

    def __init__(self, entries: Iterable[RocEntry]):
        self.entries: "OrderedDict[str, RocEntry]" = OrderedDict(
            (e.name, e) for e in entries
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> RocEntry:
        return self.entries[name]

    def summary(self) -> Dict[str, Any]:
        auc_map: Dict[str, Any] = {}
        counts = {}
        for name, e in self.entries.items():
            auc_map[name] = DegenerateLabels.__name__ if e.degenerate else e.auc
            counts[name] = {"positive": int(sum(e.labels)),
                            "negative": int(len(e.labels) - sum(e.labels))}
        return {"auc": auc_map, "counts": counts}

    def write(self, csv_path: str, json_path: str) -> None:
        """
        Write one CSV row per ROC point (``class,fpr,tpr``) and a JSON AUC
        summary.
        """
        safe_create_dir(osp.dirname(osp.abspath(csv_path)))
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("class", "fpr", "tpr"))
            for name, e in self.entries.items():
                for fpr, tpr in (e.points or ()):
                    w.writerow((name, repr(fpr), repr(tpr)))
        safe_create_dir(osp.dirname(osp.abspath(json_path)))
        with open(json_path, "w") as f:
            json.dump(self.summary(), f, indent=1, sort_keys=True)
            f.write("\n")


def read_roc_csv(path: str) -> "OrderedDict[str, List[ROC_POINT_T]]":
    """
    Read back ROC points written by :meth:`RocReport.write`.
    """
    curves: "OrderedDict[str, List[ROC_POINT_T]]" = OrderedDict()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            curves.setdefault(row["class"], []).append(
                (float(row["fpr"]), float(row["tpr"]))
            )
    return curves


def _entry(name: str, ids: Sequence[str], scores: Sequence[float],
           labels: Sequence[int]) -> RocEntry:
    try:
        pts: Optional[Tuple[ROC_POINT_T, ...]] = tuple(roc_points(scores, labels))
        a: Optional[float] = auc(scores, labels)
    except DegenerateLabels:
        LOG.warning("ROC entry '%s' is degenerate (%d positives of %d)",
                    name, sum(labels), len(labels))
        pts, a = None, None
    return RocEntry(name, tuple(ids), tuple(scores), tuple(labels), pts, a)


def evaluate(predictions: Iterable[Any], manifest: DatasetManifest,
             scan_ids: Optional[Iterable[str]] = None) -> RocReport:
    """
    Build the five ROC entries: each disease's positive scans versus all
    normal scans, and all diseased scans versus all normal scans.

    Scans positive only for other diseases are excluded from a disease's
    comparison. Multi-disease scans count as positives for every disease they
    carry and exactly once in the pooled entry.

    :param predictions: Objects with ``scan_id`` and ``probability``
        attributes (e.g. ``ScanPrediction``).
    :param manifest: Manifest providing labels.
    :param scan_ids: Scans to evaluate. Defaults to all predicted scans that
        are in the manifest.

    :raises MissingPredictions: A requested scan has no prediction.

    :return: Report with exactly five entries; degenerate comparisons are
        flagged rather than scored.
    """
    prob = {p.scan_id: float(p.probability) for p in predictions}
    if scan_ids is None:
        ids = [s for s in manifest.scan_ids() if s in prob]
    else:
        ids = list(scan_ids)
    missing = set(i for i in ids if i not in prob)
    if missing:
        raise MissingPredictions(missing)
    records = [manifest[i] for i in ids]
    normals = [r for r in records if r.normal]

    entries = []
    for d in DISEASES:
        pos = [r for r in records if getattr(r, d)]
        sel = pos + normals
        entries.append(_entry(d, [r.scan_id for r in sel],
                              [prob[r.scan_id] for r in sel],
                              [1] * len(pos) + [0] * len(normals)))
    diseased = [r for r in records if not r.normal]
    sel = diseased + normals
    entries.append(_entry(POOLED, [r.scan_id for r in sel],
                          [prob[r.scan_id] for r in sel],
                          [1] * len(diseased) + [0] * len(normals)))
    return RocReport(entries)


def plot_roc_svg(curves: Mapping[str, Sequence[ROC_POINT_T]],
                 aucs: Mapping[str, Any], path: str, title: str = "ROC") -> None:
    """
    Render ROC curves to a static SVG with the AUC of each class in the
    legend. Output bytes depend only on the inputs.

    :param curves: ``(fpr, tpr)`` points per class.
    :param aucs: AUC per class, or a marker string for degenerate classes.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    safe_create_dir(osp.dirname(osp.abspath(path)))
    with matplotlib.rc_context({"svg.hashsalt": "fusenet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        try:
            ax.plot([0, 1], [0, 1], color="0.7", lw=1, ls="--")
            for name, pts in curves.items():
                a = aucs.get(name)
                label = "{} (AUC {:.3f})".format(name, a) if isinstance(a, float) \
                    else "{} ({})".format(name, a)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=2,
                        label=label, drawstyle="default")
            ax.set_xlim(0.0, 1.0)
            ax.set_ylim(0.0, 1.0)
            ax.set_xlabel("False Positive Rate")
            ax.set_ylabel("True Positive Rate")
            ax.set_title(title)
            ax.grid(True)
            ax.legend(loc="lower right", fontsize="small")
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    LOG.info("Wrote ROC plot '%s'", path)
