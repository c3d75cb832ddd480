# Synthetic multi-subject corpus with repeat scans and exact ground truth.
#
# A template of nested ellipsoidal shells (one class per shell, background
# outside) is sampled through a subject-specific smooth deformation and axis
# scaling; that geometry is the subject's identity. Each scan then adds a
# sub-voxel rigid jitter, a smooth multiplicative bias field and Gaussian
# intensity noise. Labels are evaluated analytically at the jittered sampling
# locations, so ground truth is exactly one-hot.

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .constants import FileFormat
from .settings import PhantomSpec
from .volume import Scan, SegMap, SubjectRecord, Volume, one_hot, read_volume_file, write_volume_file

logger = logging.getLogger(__name__)

CONTROL_GRID = 3


@dataclass(frozen=True)
class SubjectGeometry:
    center: np.ndarray
    semi_axes: np.ndarray
    deformation: np.ndarray


@dataclass(frozen=True)
class Corpus:
    """Subjects in insertion order plus the seeds they were generated from."""
    subjects: Tuple[SubjectRecord, ...]
    seeds: Dict[str, int] = field(default_factory=dict)
    spec: Optional[PhantomSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids in corpus")

    def __len__(self) -> int:
        return len(self.subjects)

    def scans(self) -> Iterator[Tuple[str, Scan]]:
        for subject in self.subjects:
            for scan in subject.scans:
                yield subject.subject_id, scan

    @property
    def n_scans(self) -> int:
        return sum(len(s.scans) for s in self.subjects)

    @property
    def dims(self):
        return self.subjects[0].dims

    @property
    def classes(self) -> int:
        return self.subjects[0].scans[0].segmap.classes


def _subject_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _upsample(control: np.ndarray, dims) -> np.ndarray:
    """Trilinearly upsample a (C, g, g, g) control grid to (C, H, W, D)."""
    tensor = torch.from_numpy(control).unsqueeze(0)
    return F.interpolate(tensor, size=tuple(dims), mode="trilinear", align_corners=True)[0].numpy()


def check_spec(spec: PhantomSpec) -> None:
    """Reject specs whose innermost region or any shell is thinner than one voxel."""
    semi = np.array(spec.dims, dtype=np.float64) * spec.template_extent * (1 - 3 * spec.axis_scale_sigma)
    radii = np.array(spec.shell_radii)
    thickness = float(semi.min() * np.diff(np.concatenate([[0.0], radii])).min())
    if thickness < 1.0:
        raise ValueError(f"degenerate phantom: thinnest region is {thickness:.2f} voxels across, need at least 1")


def subject_geometry(spec: PhantomSpec, subject_seed: int) -> SubjectGeometry:
    rng = np.random.default_rng(subject_seed)
    dims = np.array(spec.dims, dtype=np.float64)
    center = (dims - 1) / 2 + rng.uniform(-1.0, 1.0, size=3)
    semi_axes = dims * spec.template_extent * (1 + rng.normal(0.0, spec.axis_scale_sigma, size=3))
    control = rng.normal(0.0, spec.deformation_sigma, size=(3, CONTROL_GRID, CONTROL_GRID, CONTROL_GRID))
    return SubjectGeometry(center=center, semi_axes=semi_axes, deformation=_upsample(control, spec.dims))


def render_labels(spec: PhantomSpec, geometry: SubjectGeometry, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Integer labels: class n - i inside shell i (0 = innermost boundary), background outside."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.dims], indexing="ij"))
    points = grid + geometry.deformation + np.asarray(shift, dtype=np.float64).reshape(3, 1, 1, 1)
    scaled = (points - geometry.center.reshape(3, 1, 1, 1)) / geometry.semi_axes.reshape(3, 1, 1, 1)
    radius = np.sqrt((scaled ** 2).sum(axis=0))
    shells = len(spec.shell_radii)
    return shells - np.searchsorted(np.asarray(spec.shell_radii), radius, side="right")


def render_image(spec: PhantomSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = np.concatenate([[0.05], np.linspace(0.25, 0.95, spec.classes - 1)])
    image = scipy.ndimage.gaussian_filter(means[labels], sigma=0.6)
    bias = _upsample(rng.normal(0.0, 1.0, size=(1, CONTROL_GRID, CONTROL_GRID, CONTROL_GRID)), spec.dims)[0]
    bias = bias / max(np.abs(bias).max(), 1e-12)
    image = image * (1 + spec.bias_amplitude * bias)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _scan_count(spec: PhantomSpec, rng: np.random.Generator) -> int:
    if spec.scans_per_subject is not None:
        return spec.scans_per_subject
    baseline = int(rng.integers(1, 3))
    followup = int(rng.integers(1, 3))
    return baseline + followup


def synthesize_subject(spec: PhantomSpec, subject_seed: int, subject_id: Optional[str] = None) -> SubjectRecord:
    check_spec(spec)
    geometry = subject_geometry(spec, subject_seed)
    rng = np.random.default_rng([subject_seed, 1])
    scans = []
    for index in range(_scan_count(spec, rng)):
        shift = rng.uniform(-spec.jitter, spec.jitter, size=3)
        labels = render_labels(spec, geometry, shift)
        image = render_image(spec, labels, rng)
        segmap = one_hot(torch.from_numpy(labels), spec.classes)
        scans.append(Scan(f"scan{index:02d}", Volume(torch.from_numpy(image.astype(np.float32))), segmap))
    return SubjectRecord(subject_id or f"subject{subject_seed % 100000:05d}", tuple(scans))


def synthesize_corpus(spec: PhantomSpec, workers: int = 1) -> Corpus:
    check_spec(spec)
    seeds = [_subject_seed(spec.seed, i) for i in range(spec.n_subjects)]
    ids = [f"subject{i:03d}" for i in range(spec.n_subjects)]
    logger.info(f"Synthesizing {spec.n_subjects} phantom subjects at dims {spec.dims}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            jobs = pool.map(lambda args: synthesize_subject(spec, *args), zip(seeds, ids))
            subjects = list(tqdm(jobs, total=len(ids), desc="Synthesizing subjects"))
    else:
        subjects = [synthesize_subject(spec, seed, sid) for seed, sid in tqdm(list(zip(seeds, ids)), desc="Synthesizing subjects")]
    return Corpus(tuple(subjects), dict(zip(ids, seeds)), spec)


def split(corpus: Corpus, train_fraction: float, seed: int = 0) -> Tuple[Corpus, Corpus]:
    """Subject-disjoint train/test partition."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    n = len(corpus)
    if n < 2:
        raise ValueError(f"need at least 2 subjects to split, got {n}")
    n_train = min(max(int(round(n * train_fraction)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    chosen = set(order[:n_train].tolist())
    train = [s for i, s in enumerate(corpus.subjects) if i in chosen]
    test = [s for i, s in enumerate(corpus.subjects) if i not in chosen]
    pick = lambda group: {s.subject_id: corpus.seeds[s.subject_id] for s in group if s.subject_id in corpus.seeds}
    return Corpus(tuple(train), pick(train), corpus.spec), Corpus(tuple(test), pick(test), corpus.spec)


def write_corpus(corpus: Corpus, root: Union[str, Path]) -> Path:
    """`<root>/<subject-id>/<scan-id>.{vol,seg}` plus sidecars and manifest.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = {
        "spec": corpus.spec.model_dump(mode="json") if corpus.spec else None,
        "subjects": [],
    }
    for subject in corpus.subjects:
        entry: Dict[str, object] = {
            "subject_id": subject.subject_id,
            "seed": corpus.seeds.get(subject.subject_id),
            "scans": [],
        }
        for scan in subject.scans:
            meta = {
                "subject_id": subject.subject_id,
                "scan_id": scan.scan_id,
                "normalization_range": [0.0, 1.0],
            }
            write_volume_file(root / subject.subject_id / f"{scan.scan_id}{FileFormat.VOLUME_SUFFIX}", scan.volume, meta)
            write_volume_file(root / subject.subject_id / f"{scan.scan_id}{FileFormat.SEGMAP_SUFFIX}", scan.segmap, discrete=True)
            entry["scans"].append(scan.scan_id)
        manifest["subjects"].append(entry)
    (root / FileFormat.MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    logger.info(f"Wrote corpus of {len(corpus)} subjects / {corpus.n_scans} scans to {root}")
    return root


def read_corpus(root: Union[str, Path]) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / FileFormat.MANIFEST_NAME).read_text())
    subjects: List[SubjectRecord] = []
    seeds: Dict[str, int] = {}
    for entry in manifest["subjects"]:
        sid = entry["subject_id"]
        scans = []
        for scan_id in entry["scans"]:
            volume = read_volume_file(root / sid / f"{scan_id}{FileFormat.VOLUME_SUFFIX}")
            segmap = read_volume_file(root / sid / f"{scan_id}{FileFormat.SEGMAP_SUFFIX}")
            if not isinstance(volume, Volume) or not isinstance(segmap, SegMap):
                raise ValueError(f"{sid}/{scan_id}: unexpected file kinds")
            scans.append(Scan(scan_id, volume, segmap))
        subjects.append(SubjectRecord(sid, tuple(scans)))
        if entry.get("seed") is not None:
            seeds[sid] = int(entry["seed"])
    spec = PhantomSpec.model_validate(manifest["spec"]) if manifest.get("spec") else None
    return Corpus(tuple(subjects), seeds, spec)
