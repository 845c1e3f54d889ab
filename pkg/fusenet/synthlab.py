"""
Synthetic CT phantoms with exact anatomy masks and controllable disease
signatures, plus dataset generation on disk.

Geometry is analytic: a body ellipsoid holding two lung ellipsoids. A voxel
belongs to an ellipsoid when its center satisfies the ellipsoid inequality,
so truth masks are exact by construction.
"""
import logging
import os.path as osp
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from smqtk_core import Configurable
from smqtk_dataprovider.utils.file import safe_create_dir
from smqtk_descriptors.utils import parallel_map

from fusenet.evalkit import DISEASES, DatasetManifest, ScanRecord
from fusenet.exceptions import BadConfig, BadGeometry, EmptyMask
from fusenet.segnet import BODY, LEFT_LUNG, RIGHT_LUNG
from fusenet.utils import worker_count
from fusenet.volgrid import MaskVolume, ScalarVolume, write_mask, write_volume


LOG = logging.getLogger(__name__)

SIGNAL_MODES = ("raw_visible", "feature_favored")
#: Fraction of diseased scans in a generated dataset.
DEFAULT_DISEASED_FRACTION = 0.636
#: Probability weights of the number of scans one patient contributes.
DEFAULT_SCANS_PER_PATIENT = {1: 0.7, 2: 0.2, 3: 0.1}

# Raw-visible intensity deltas in HU.
CONSOLIDATION_HU = 600.
MASS_HU = 700.
EMPHYSEMA_HU = -100.
NODULE_HU = 700.
MASS_RADIUS_MM = (8., 12.)
NODULE_RADIUS_MM = (2., 4.)
NODULE_COUNT = (3, 8)
# Feature-favored lesions alternate between these deltas voxel by voxel.
TEXTURE_HU = (0., 160.)

ELLIPSOID_T = Tuple[Tuple[float, float, float], Tuple[float, float, float]]


class PhantomSpec (Configurable):
    """
    Phantom geometry and intensity model.

    Ellipsoid semi-axes and lung offsets are fractions of the volume dims
    along ``(x, y, z)``; both lungs are offset from the center along x.

    :param dims: Volume ``(x, y, z)`` voxel counts.
    :param spacing_mm: Voxel spacing in millimeters.
    :param body_axes: Body ellipsoid semi-axes.
    :param lung_axes: Semi-axes of each lung ellipsoid.
    :param lung_offset: Distance of each lung center from the volume center
        along x.
    :param hu_air: Outside the body.
    :param hu_body: Body soft tissue.
    :param hu_lung: Lung parenchyma.
    :param noise_sigma: Standard deviation of additive Gaussian noise.
    :param jitter: Relative per-phantom jitter of every semi-axis.
    """

    def __init__(self, dims: Sequence[int] = (112, 112, 112),
                 spacing_mm: Sequence[float] = (2., 2., 2.),
                 body_axes: Sequence[float] = (0.44, 0.36, 0.46),
                 lung_axes: Sequence[float] = (0.13, 0.2, 0.32),
                 lung_offset: float = 0.19,
                 hu_air: float = -1000., hu_body: float = 40.,
                 hu_lung: float = -850., noise_sigma: float = 20.,
                 jitter: float = 0.08):
        self.dims = tuple(int(v) for v in dims)
        self.spacing_mm = tuple(float(v) for v in spacing_mm)
        self.body_axes = tuple(float(v) for v in body_axes)
        self.lung_axes = tuple(float(v) for v in lung_axes)
        self.lung_offset = float(lung_offset)
        self.hu_air = float(hu_air)
        self.hu_body = float(hu_body)
        self.hu_lung = float(hu_lung)
        self.noise_sigma = float(noise_sigma)
        self.jitter = float(jitter)
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise BadConfig("Phantom dims must be three values of at least 4")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise BadConfig("Spacing must be three positive values")
        if len(self.body_axes) != 3 or len(self.lung_axes) != 3 \
                or min(self.body_axes + self.lung_axes) <= 0:
            raise BadConfig("Semi-axes must be three positive fractions")
        if self.noise_sigma < 0 or not 0 <= self.jitter < 1:
            raise BadConfig("Noise must be non-negative and jitter in [0, 1)")

    def get_config(self) -> Dict[str, Any]:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "body_axes": list(self.body_axes),
            "lung_axes": list(self.lung_axes),
            "lung_offset": self.lung_offset,
            "hu_air": self.hu_air,
            "hu_body": self.hu_body,
            "hu_lung": self.hu_lung,
            "noise_sigma": self.noise_sigma,
            "jitter": self.jitter,
        }


class DiseaseSignature (NamedTuple):
    """
    One inserted lesion group: its disease kind and voxel mask (``z, y, x``).
    """
    kind: str
    region: np.ndarray


class PhantomScan (NamedTuple):
    """
    Generated scan: HU volume, anatomy truth and the union of lesion voxels.
    """
    volume: ScalarVolume
    truth: MaskVolume
    lesions: MaskVolume
    signatures: Tuple[DiseaseSignature, ...]

    @property
    def diseases(self) -> Tuple[str, ...]:
        return tuple(sorted(set(s.kind for s in self.signatures),
                            key=DISEASES.index))


#
# Geometry
#

def _grid(dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y, z = dims
    return np.ogrid[0:z, 0:y, 0:x]


def ellipsoid_mask(dims: Sequence[int], center: Sequence[float],
                   semi_axes: Sequence[float]) -> np.ndarray:
    """
    Voxels whose centers lie inside an ellipsoid, as a ``(z, y, x)`` bool
    array. Center and semi-axes are in voxels along ``(x, y, z)``.

    >>> int(ellipsoid_mask((5, 5, 5), (2, 2, 2), (1, 1, 1)).sum())
    7
    """
    zz, yy, xx = _grid(dims)
    (cx, cy, cz), (ax, ay, az) = center, semi_axes
    return (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
            + ((zz - cz) / az) ** 2) <= 1.


def phantom_geometry(spec: PhantomSpec, rng: np.random.Generator) -> Dict[str, ELLIPSOID_T]:
    """
    Jittered ``(center, semi_axes)`` in voxels of the body and both lungs.
    """
    dims = np.asarray(spec.dims, dtype=np.float64)
    c = (dims - 1) / 2.

    def jittered(frac: Sequence[float]) -> Tuple[float, float, float]:
        scale = rng.uniform(1. - spec.jitter, 1. + spec.jitter, size=3)
        return tuple(float(v) for v in np.asarray(frac) * dims * scale)  # type: ignore

    off = spec.lung_offset * dims[0]
    body = jittered(spec.body_axes)
    left = jittered(spec.lung_axes)
    right = jittered(spec.lung_axes)
    return {
        "body": (tuple(float(v) for v in c), body),  # type: ignore
        "left_lung": ((float(c[0] + off), float(c[1]), float(c[2])), left),
        "right_lung": ((float(c[0] - off), float(c[1]), float(c[2])), right),
    }


def truth_mask(spec: PhantomSpec, geometry: Dict[str, ELLIPSOID_T]) -> np.ndarray:
    """
    Rasterize the anatomy labels.

    :raises BadGeometry: A lung leaves the body or the lungs overlap.
    """
    body = ellipsoid_mask(spec.dims, *geometry["body"])
    left = ellipsoid_mask(spec.dims, *geometry["left_lung"])
    right = ellipsoid_mask(spec.dims, *geometry["right_lung"])
    if not left.any() or not right.any():
        raise BadGeometry("A lung ellipsoid covers no voxel")
    if (left & ~body).any() or (right & ~body).any():
        raise BadGeometry("Lungs must lie strictly inside the body")
    if (left & right).any():
        raise BadGeometry("Lung ellipsoids overlap")
    labels = np.zeros(body.shape, dtype=np.uint8)
    labels[body] = BODY
    labels[left] = LEFT_LUNG
    labels[right] = RIGHT_LUNG
    return labels


#
# Lesions
#

def _lung_point(lung: np.ndarray, rng: np.random.Generator) -> Tuple[float, float, float]:
    idx = np.flatnonzero(lung)
    z, y, x = np.unravel_index(idx[rng.integers(0, idx.size)], lung.shape)
    return float(x), float(y), float(z)


def _sphere(spec: PhantomSpec, lung: np.ndarray, rng: np.random.Generator,
            radius_mm: Tuple[float, float]) -> np.ndarray:
    r = rng.uniform(*radius_mm)
    axes = tuple(max(r / s, 0.5) for s in spec.spacing_mm)
    return ellipsoid_mask(spec.dims, _lung_point(lung, rng), axes) & lung


def disease_region(kind: str, spec: PhantomSpec, geometry: Dict[str, ELLIPSOID_T],
                   lung: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Voxels of one lesion group, always a subset of ``lung``.

    :raises BadConfig: Unknown disease kind.
    """
    if kind == "pneumonia_atelectasis":
        # Consolidation: an ellipsoid a third the size of a lung.
        side = "left_lung" if rng.random() < 0.5 else "right_lung"
        axes = tuple(a * rng.uniform(0.25, 0.4) for a in geometry[side][1])
        return ellipsoid_mask(spec.dims, _lung_point(lung, rng), axes) & lung
    if kind == "mass":
        return _sphere(spec, lung, rng, MASS_RADIUS_MM)
    if kind == "emphysema":
        return lung.copy()
    if kind == "nodules":
        region = np.zeros_like(lung)
        for _ in range(int(rng.integers(NODULE_COUNT[0], NODULE_COUNT[1] + 1))):
            region |= _sphere(spec, lung, rng, NODULE_RADIUS_MM)
        return region
    raise BadConfig("Unknown disease kind '{}', expected one of {}"
                    .format(kind, DISEASES))


RAW_DELTA_HU = {
    "pneumonia_atelectasis": CONSOLIDATION_HU,
    "mass": MASS_HU,
    "emphysema": EMPHYSEMA_HU,
    "nodules": NODULE_HU,
}


def texture(dims: Sequence[int]) -> np.ndarray:
    """
    Checkerboard of the feature-favored lesion deltas, mean +80 HU.
    """
    zz, yy, xx = _grid(dims)
    return np.where((xx + yy + zz) % 2 == 0, TEXTURE_HU[0], TEXTURE_HU[1])


#
# Generation
#

def _streams(seed: int) -> List[np.random.Generator]:
    # Separate anatomy, lesion and noise streams: a lesion-free twin of a
    # scan differs from it only on lesion voxels.
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def generate_scan(spec: PhantomSpec, seed: int, diseases: Iterable[str] = (),
                  signal: str = "raw_visible", lesions: bool = True) -> PhantomScan:
    """
    Generate one phantom scan carrying the given disease signatures.

    :param diseases: Disease kinds to insert.
    :param signal: ``raw_visible`` lesions use kind-specific HU deltas,
        ``feature_favored`` lesions use a low contrast checkerboard.
    :param lesions: When False the signatures are drawn but not painted,
        yielding the lesion-free twin of the same scan.

    :raises BadGeometry: Lungs not inside the body.
    :raises BadConfig: Unknown disease kind or signal mode.
    """
    if signal not in SIGNAL_MODES:
        raise BadConfig("Unknown signal mode '{}', expected one of {}"
                        .format(signal, SIGNAL_MODES))
    anatomy_rng, lesion_rng, noise_rng = _streams(seed)
    geometry = phantom_geometry(spec, anatomy_rng)
    labels = truth_mask(spec, geometry)
    hu = np.full(labels.shape, spec.hu_air, dtype=np.float64)
    hu[labels == BODY] = spec.hu_body
    lung = (labels == LEFT_LUNG) | (labels == RIGHT_LUNG)
    hu[lung] = spec.hu_lung

    signatures = tuple(
        DiseaseSignature(kind, disease_region(kind, spec, geometry, lung, lesion_rng))
        for kind in sorted(set(diseases), key=lambda d: DISEASES.index(d)
                           if d in DISEASES else len(DISEASES))
    )
    union = np.zeros(labels.shape, dtype=bool)
    tex = texture(spec.dims) if signal == "feature_favored" else None
    for sig in signatures:
        union |= sig.region
        if not lesions:
            continue
        if tex is None:
            hu[sig.region] += RAW_DELTA_HU[sig.kind]
        else:
            hu[sig.region] += tex[sig.region]
    if spec.noise_sigma > 0:
        hu += noise_rng.normal(0., spec.noise_sigma, size=hu.shape)
    LOG.debug("Generated phantom seed=%d with %s (%d lesion voxels)", seed,
              [s.kind for s in signatures] or "no lesions", int(union.sum()))
    return PhantomScan(
        ScalarVolume(hu, spec.spacing_mm),
        MaskVolume(labels, spec.spacing_mm, (0, BODY, LEFT_LUNG, RIGHT_LUNG)),
        MaskVolume(union.astype(np.uint8), spec.spacing_mm, (0, 1)),
        signatures,
    )


def generate_phantom(spec: PhantomSpec, seed: int) -> Tuple[ScalarVolume, MaskVolume]:
    """
    Disease-free phantom and its anatomy truth mask.

    >>> spec = PhantomSpec(dims=(16, 16, 16), spacing_mm=(5., 5., 5.), noise_sigma=0.)
    >>> vol, truth = generate_phantom(spec, 3)
    >>> sorted(int(v) for v in np.unique(truth.array))
    [0, 1, 2, 3]
    """
    scan = generate_scan(spec, seed)
    return scan.volume, scan.truth


def diseased_count(n_scans: int, fraction: float) -> int:
    """
    Diseased scans of a dataset, rounded half up.

    >>> diseased_count(100, 0.636)
    64
    """
    return int(np.floor(n_scans * fraction + 0.5))


def dataset_labels(n_scans: int, diseased_fraction: float, multi_disease_rate: float,
                   rng: np.random.Generator) -> List[Tuple[str, ...]]:
    """
    Disease kinds per scan. Primary kinds cycle through the four diseases so
    they stay balanced; extra kinds are added with ``multi_disease_rate``.
    """
    n_dis = diseased_count(n_scans, diseased_fraction)
    out: List[Tuple[str, ...]] = []
    for i in range(n_dis):
        kinds = {DISEASES[i % len(DISEASES)]}
        if rng.random() < multi_disease_rate:
            others = [d for d in DISEASES if d not in kinds]
            n_extra = int(rng.integers(1, len(others) + 1))
            kinds.update(rng.choice(others, size=n_extra, replace=False).tolist())
        out.append(tuple(d for d in DISEASES if d in kinds))
    out.extend([()] * (n_scans - n_dis))
    return [out[i] for i in rng.permutation(n_scans)]


def patient_ids(n_scans: int, weights: Dict[int, float],
                rng: np.random.Generator) -> List[str]:
    """
    Patient id per scan, consecutive scans grouped into patients whose sizes
    follow ``weights``.
    """
    sizes = sorted(int(k) for k in weights)
    if not sizes or min(sizes) < 1:
        raise BadConfig("Scans per patient must be positive")
    p = np.asarray([float(weights[k]) for k in sizes])
    if (p < 0).any() or p.sum() <= 0:
        raise BadConfig("Scans-per-patient weights must be non-negative")
    p = p / p.sum()
    out: List[str] = []
    patient = 0
    while len(out) < n_scans:
        size = min(int(rng.choice(sizes, p=p)), n_scans - len(out))
        out.extend(["patient-{:04d}".format(patient)] * size)
        patient += 1
    return out


def _scan_seed(child: np.random.SeedSequence) -> int:
    return int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generate_dataset(out_dir: str, n_scans: int, spec: Optional[PhantomSpec] = None,
                     diseased_fraction: float = DEFAULT_DISEASED_FRACTION,
                     multi_disease_rate: float = 0.0, seed: int = 0,
                     signal: str = "raw_visible",
                     scans_per_patient: Optional[Dict[int, float]] = None,
                     threads: Optional[int] = None) -> DatasetManifest:
    """
    Write a synthetic dataset: ``volumes/``, ``masks/`` and ``manifest.csv``
    under ``out_dir``.

    Every scan has its own seed spawned from ``seed``, so the output is
    identical whatever the worker count.

    :raises BadConfig: Fewer than two scans or invalid fractions.
    :raises IoFailure: Files could not be written.
    """
    if n_scans < 2:
        raise BadConfig("A dataset needs at least two scans")
    if not 0 <= diseased_fraction <= 1 or not 0 <= multi_disease_rate <= 1:
        raise BadConfig("Diseased fraction and multi-disease rate must lie in [0, 1]")
    if signal not in SIGNAL_MODES:
        raise BadConfig("Unknown signal mode '{}'".format(signal))
    spec = spec or PhantomSpec()
    ss = np.random.SeedSequence(seed)
    label_ss, patient_ss, scans_ss = ss.spawn(3)
    kinds = dataset_labels(n_scans, diseased_fraction, multi_disease_rate,
                           np.random.default_rng(label_ss))
    patients = patient_ids(n_scans, scans_per_patient or DEFAULT_SCANS_PER_PATIENT,
                           np.random.default_rng(patient_ss))
    seeds = [_scan_seed(c) for c in scans_ss.spawn(n_scans)]
    vol_dir = osp.join(out_dir, "volumes")
    mask_dir = osp.join(out_dir, "masks")
    safe_create_dir(vol_dir)
    safe_create_dir(mask_dir)

    def make(i: int) -> ScanRecord:
        scan_id = "scan-{:04d}".format(i)
        scan = generate_scan(spec, seeds[i], kinds[i], signal)  # type: ignore
        v_path = osp.join(vol_dir, scan_id + ".vgr")
        m_path = osp.join(mask_dir, scan_id + ".mask.vgr")
        write_volume(scan.volume, v_path)
        write_mask(scan.truth, m_path)
        flags = {d: d in scan.diseases for d in DISEASES}
        return ScanRecord(scan_id, patients[i], osp.abspath(v_path),
                          osp.abspath(m_path), **flags)

    records = list(parallel_map(make, range(n_scans), cores=worker_count(threads),
                                use_multiprocessing=False, ordered=True))
    manifest = DatasetManifest(records)
    manifest.write_csv(osp.join(out_dir, "manifest.csv"))
    n_dis = sum(1 for r in records if not r.normal)
    LOG.info("Generated %d scans (%d diseased, %d patients, signal=%s) under '%s'",
             n_scans, n_dis, len(set(patients)), signal, out_dir)
    return manifest


def plant_signal_in_features(out_dir: str, mode: str, n_scans: int,
                             **kwargs: Any) -> DatasetManifest:
    """
    Generate a dataset variant whose lesions are either plainly visible in
    HU (``raw_visible``) or low contrast but regularly textured
    (``feature_favored``).

    :raises BadConfig: Unknown mode.
    """
    if mode not in SIGNAL_MODES:
        raise BadConfig("Unknown signal mode '{}', expected one of {}"
                        .format(mode, SIGNAL_MODES))
    return generate_dataset(out_dir, n_scans, signal=mode, **kwargs)


def tap_activation_delta(segnet: Any, spec: PhantomSpec, seed: int,
                         diseases: Iterable[str], signal: str = "feature_favored",
                         preproc_cfg: Optional[Any] = None) -> np.ndarray:
    """
    Per-channel response of the segmentation taps to inserted lesions.

    The scan and its lesion-free twin are run through the frozen network;
    for every tap channel the mean activation change over lesion voxels is
    divided by the standard deviation of the twin's activations inside the
    lungs.

    :return: Standardized deltas, one per tap channel.

    :raises EmptyMask: No lesion voxel survives preprocessing.
    """
    from fusenet.fusion import extract_features, lung_region
    from fusenet.preproc import PreprocConfig, preprocess_mask, preprocess_scan

    cfg = preproc_cfg or PreprocConfig(spec.spacing_mm, target_dims=spec.dims)
    diseases = tuple(diseases)
    scan = generate_scan(spec, seed, diseases, signal)
    twin = generate_scan(spec, seed, diseases, signal, lesions=False)
    f_scan, _ = extract_features(segnet, preprocess_scan(scan.volume, cfg))
    f_twin, _ = extract_features(segnet, preprocess_scan(twin.volume, cfg))
    lesion = preprocess_mask(scan.lesions, cfg).array.astype(bool)
    lung = lung_region(preprocess_mask(scan.truth, cfg))
    if not lesion.any():
        raise EmptyMask("No lesion voxel to measure")
    delta = (f_scan.array.astype(np.float64) - f_twin.array)[:, lesion].mean(axis=1)
    sigma = f_twin.array.astype(np.float64)[:, lung].std(axis=1)
    return np.abs(delta) / np.maximum(sigma, 1e-12)
