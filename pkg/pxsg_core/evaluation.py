# Re-identification attacks and every reported metric: precision@k, AP, mAP,
# same/different F1, hard Dice with a size-weighted overall score, round-trip
# reconstruction quality and intra/inter-subject similarity histograms.

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from .constants import Defaults
from .losses import pair_log_likelihood
from .networks import GeneratorNet, SegmentationNet, SiameseDiscriminator, generate_flows, segment
from .phantom import Corpus
from .protocol.client import client_encode, proxy_segment
from .settings import NetworkConfig
from .similarity import dice_similarity, ms_ssim
from .volume import PrivateKey, Scan, SegMap, SubjectRecord, Volume, crop_to, pad_to, pad_to_multiple
from .warp import compose_roundtrip, warp

logger = logging.getLogger(__name__)

SIMILARITIES = ("ms-ssim", "dice", "siamese")


@dataclass(frozen=True)
class AttackItem:
    item_id: str
    subject_id: str
    data: Union[Volume, SegMap]


def items_from_corpus(corpus: Corpus, representation: str = "image") -> List[AttackItem]:
    """One attack item per scan; `representation` picks the image or the segmentation map."""
    if representation not in ("image", "segmap"):
        raise ValueError(f"representation must be 'image' or 'segmap', got '{representation}'")
    return [
        AttackItem(f"{sid}/{scan.scan_id}", sid, scan.volume if representation == "image" else scan.segmap)
        for sid, scan in corpus.scans()
    ]


@dataclass(frozen=True)
class RetrievalRanking:
    """Gallery ids of one query in descending similarity, with same-subject flags."""
    query_id: str
    candidates: Tuple[str, ...]
    relevance: Tuple[int, ...]

    def __post_init__(self):
        if len(self.candidates) != len(self.relevance):
            raise ValueError("candidates and relevance flags differ in length")
        if self.query_id in self.candidates:
            raise ValueError(f"query '{self.query_id}' appears in its own gallery")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("duplicate candidate ids")

    @property
    def n_relevant(self) -> int:
        return int(sum(self.relevance))


def rank(
    query_id: str,
    query_subject: str,
    gallery_ids: Sequence[str],
    gallery_subjects: Sequence[str],
    scores: Sequence[float],
) -> RetrievalRanking:
    """Order the gallery by descending score; ties keep gallery insertion order. The query itself is dropped."""
    keep = [i for i, gid in enumerate(gallery_ids) if gid != query_id]
    order = sorted(keep, key=lambda i: -float(scores[i]))
    return RetrievalRanking(
        query_id,
        tuple(gallery_ids[i] for i in order),
        tuple(int(gallery_subjects[i] == query_subject) for i in order),
    )


def precision_at_k(ranking: RetrievalRanking, k: int) -> float:
    if not 1 <= k <= len(ranking.candidates):
        raise ValueError(f"k must be in [1, {len(ranking.candidates)}], got {k}")
    return sum(ranking.relevance[:k]) / k


def average_precision(ranking: RetrievalRanking) -> float:
    """Sum of precision@k over the ranks holding a relevant item, divided by the number relevant."""
    if ranking.n_relevant == 0:
        raise ValueError(f"query '{ranking.query_id}' has no relevant candidate; AP is undefined")
    hits = 0
    total = 0.0
    for k, relevant in enumerate(ranking.relevance, start=1):
        if relevant:
            hits += 1
            total += hits / k
    return total / ranking.n_relevant


def mean_average_precision(rankings: Sequence[RetrievalRanking]) -> float:
    values = []
    for ranking in rankings:
        if ranking.n_relevant == 0:
            logger.warning(f"Query '{ranking.query_id}' has no same-subject candidate; left out of mAP")
            continue
        values.append(average_precision(ranking))
    if not values:
        raise ValueError("no query has a relevant candidate; mAP is undefined")
    return float(np.mean(values))


def chance_level(rankings: Sequence[RetrievalRanking]) -> float:
    """Mean per-query fraction of same-subject gallery items (expected AP of a random ranking)."""
    fractions = [r.n_relevant / len(r.candidates) for r in rankings if r.candidates and r.n_relevant]
    return float(np.mean(fractions)) if fractions else 0.0


def f1_score(probabilities, labels, threshold: float = Defaults.F1_THRESHOLD) -> float:
    """F1 of the 'same subject' class with predictions p >= threshold."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities for {y.size} labels")
    predicted = p >= threshold
    tp = int((predicted & y).sum())
    fp = int((predicted & ~y).sum())
    fn = int((~predicted & y).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _channels(data: Union[Volume, SegMap]) -> torch.Tensor:
    return data.data.unsqueeze(0) if isinstance(data, Volume) else data.soft


def _stack(items: Sequence[AttackItem]) -> torch.Tensor:
    data = [_channels(it.data) for it in items]
    dims = {tuple(d.shape) for d in data}
    if len(dims) != 1:
        raise ValueError(f"attack items disagree on shape: {sorted(dims)}")
    return torch.stack(data)


def _uniform_kind(items: Sequence[AttackItem]) -> None:
    kinds = {type(it.data).__name__ for it in items}
    if len(kinds) != 1 or not kinds <= {"Volume", "SegMap"}:
        raise ValueError(f"the siamese attacker needs items of a single kind (images or segmentation maps), got {sorted(kinds)}")


def _embeddings(model: SiameseDiscriminator, items: Sequence[AttackItem]) -> torch.Tensor:
    _uniform_kind(items)
    padded = [_channels(pad_to_multiple(it.data, model.config.multiple)) for it in items]
    model.eval()
    with torch.no_grad():
        return model.embed(torch.stack(padded))


def score_matrix(
    queries: Sequence[AttackItem],
    gallery: Sequence[AttackItem],
    similarity: str = "ms-ssim",
    model: Optional[SiameseDiscriminator] = None,
    workers: int = 4,
) -> np.ndarray:
    """(queries, gallery) similarity scores; rows are computed concurrently."""
    if similarity not in SIMILARITIES:
        raise ValueError(f"unknown similarity '{similarity}', expected one of {SIMILARITIES}")
    if similarity == "siamese":
        if model is None:
            raise ValueError("the siamese attacker needs a trained model")
        eq, eg = _embeddings(model, queries), _embeddings(model, gallery)
        with torch.no_grad():
            rows = [model.compare(eq[i:i + 1].expand_as(eg), eg) for i in range(len(queries))]
        return torch.stack(rows).double().numpy()

    if similarity == "dice" and not all(isinstance(it.data, SegMap) for it in (*queries, *gallery)):
        raise ValueError("dice similarity compares segmentation maps")
    g = _stack(gallery)
    q = _stack(queries)
    if q.shape[1:] != g.shape[1:]:
        raise ValueError(f"queries {tuple(q.shape[1:])} and gallery {tuple(g.shape[1:])} disagree")

    def row(i: int) -> np.ndarray:
        query = q[i:i + 1].expand_as(g)
        with torch.no_grad():
            values = ms_ssim(query, g) if similarity == "ms-ssim" else dice_similarity(query, g)
        return values.double().numpy()

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        return np.stack(list(pool.map(row, range(len(queries)))))


@dataclass
class AttackResult:
    similarity: str
    mean_ap: float
    chance: float
    rankings: List[RetrievalRanking]
    f1: Optional[float] = None


def reid_attack(
    gallery: Sequence[AttackItem],
    queries: Optional[Sequence[AttackItem]] = None,
    similarity: str = "ms-ssim",
    model: Optional[SiameseDiscriminator] = None,
    workers: int = 4,
) -> AttackResult:
    """Rank the gallery for every query; without queries every gallery item is queried against the rest."""
    if not gallery:
        raise ValueError("empty gallery")
    queries = list(gallery) if queries is None else list(queries)
    scores = score_matrix(queries, gallery, similarity, model, workers)
    gallery_ids = [it.item_id for it in gallery]
    gallery_subjects = [it.subject_id for it in gallery]
    rankings = [
        rank(q.item_id, q.subject_id, gallery_ids, gallery_subjects, scores[i]) for i, q in enumerate(queries)
    ]
    result = AttackResult(similarity, mean_average_precision(rankings), chance_level(rankings), rankings)
    if similarity == "siamese":
        probs, labels = [], []
        for i, q in enumerate(queries):
            for j, g in enumerate(gallery):
                if g.item_id != q.item_id:
                    probs.append(scores[i, j])
                    labels.append(g.subject_id == q.subject_id)
        result.f1 = f1_score(probs, labels)
    logger.info(
        f"Re-identification ({similarity}) over {len(queries)} queries / {len(gallery)} gallery items: "
        f"mAP {result.mean_ap:.3f} (chance {result.chance:.3f})"
    )
    return result


def _item_pairs(items: Sequence[AttackItem], n: int, rng: np.random.Generator) -> List[Tuple[int, int, int]]:
    by_subject: Dict[str, List[int]] = {}
    for i, it in enumerate(items):
        by_subject.setdefault(it.subject_id, []).append(i)
    repeat = [idx for idx in by_subject.values() if len(idx) >= 2]
    subjects = list(by_subject.values())
    if not repeat or len(subjects) < 2:
        raise ValueError("attacker training needs two subjects and one subject with repeat items")
    pairs = []
    for k in range(n):
        if k % 2 == 0:
            group = repeat[int(rng.integers(len(repeat)))]
            a, b = rng.choice(group, size=2, replace=False)
            pairs.append((int(a), int(b), 1))
        else:
            sa, sb = rng.choice(len(subjects), size=2, replace=False)
            pairs.append((int(rng.choice(subjects[sa])), int(rng.choice(subjects[sb])), 0))
    return pairs


def train_attacker(
    items: Sequence[AttackItem],
    config: Optional[NetworkConfig] = None,
    steps: int = 200,
    pairs_per_step: int = 8,
    learning_rate: float = 1e-4,
    seed: int = 0,
) -> SiameseDiscriminator:
    """Fit a Siamese same/different classifier on the attacked representation using subject labels.

    Images train a single-channel classifier, segmentation maps one with a
    channel per class.
    """
    if not items:
        raise ValueError("the siamese attacker needs training items")
    _uniform_kind(items)
    multiple = config.multiple if config is not None else Defaults.NETWORK_MULTIPLE
    padded = torch.stack([_channels(pad_to_multiple(it.data, multiple)) for it in items])
    if config is None:
        channels = padded.shape[1]
        config = NetworkConfig(dims=tuple(padded.shape[2:]), classes=max(channels, 2), input_channels=channels)
    torch.manual_seed(seed)
    model = SiameseDiscriminator(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    model.train()
    for step in tqdm(range(steps), desc="Training attacker"):
        pairs = _item_pairs(items, pairs_per_step, rng)
        a = padded[[p[0] for p in pairs]]
        b = padded[[p[1] for p in pairs]]
        labels = torch.tensor([p[2] for p in pairs], dtype=padded.dtype)
        loss = -pair_log_likelihood(model(a, b), labels).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if (step + 1) % 50 == 0:
            logger.info(f"Attacker step {step + 1}/{steps}: loss {float(loss):.4f}")
    return model.eval()


@dataclass(frozen=True)
class AttackSplit:
    """Attacker-training items and held-out targets; no subject appears on both sides."""
    train: List[AttackItem]
    held_out: List[AttackItem]

    def __post_init__(self):
        shared = {it.subject_id for it in self.train} & {it.subject_id for it in self.held_out}
        if shared:
            raise ValueError(f"subjects {sorted(shared)} appear in both attacker training and held-out items")


def holdout_split(items: Sequence[AttackItem], held_out_fraction: float = 0.5, seed: int = 0) -> AttackSplit:
    """Split attack items by subject; each side keeps at least two subjects."""
    subjects = sorted({it.subject_id for it in items})
    if len(subjects) < 4:
        raise ValueError(f"a held-out attack needs at least 4 subjects, got {len(subjects)}")
    if not 0.0 < held_out_fraction < 1.0:
        raise ValueError(f"held_out_fraction must lie in (0, 1), got {held_out_fraction}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_held = min(max(int(round(held_out_fraction * len(subjects))), 2), len(subjects) - 2)
    held = {subjects[i] for i in order[:n_held]}
    return AttackSplit(
        train=[it for it in items if it.subject_id not in held],
        held_out=[it for it in items if it.subject_id in held],
    )


def siamese_attack(
    items: Sequence[AttackItem],
    attacker_items: Optional[Sequence[AttackItem]] = None,
    config: Optional[NetworkConfig] = None,
    steps: int = 200,
    pairs_per_step: int = 8,
    seed: int = 0,
    workers: int = 4,
) -> AttackResult:
    """Train the Siamese attacker on subjects disjoint from the targets and attack the targets.

    Without `attacker_items` the targets are split by subject with
    `holdout_split`; mAP and F1 come from held-out pairs only.
    """
    if attacker_items is None:
        split = holdout_split(items, seed=seed)
    else:
        split = AttackSplit(train=list(attacker_items), held_out=list(items))
    logger.info(
        f"Siamese attacker: {len(split.train)} training items, {len(split.held_out)} held-out targets"
    )
    model = train_attacker(split.train, config=config, steps=steps, pairs_per_step=pairs_per_step, seed=seed)
    return reid_attack(split.held_out, similarity="siamese", model=model, workers=workers)


class DscReport(BaseModel):
    """Hard Dice per foreground class, pooled over all volumes, and the size-weighted overall score."""
    per_class: Dict[int, float]
    region_sizes: Dict[int, int]
    absent_classes: List[int] = Field(default_factory=list)
    overall: float


def _labels(x) -> torch.Tensor:
    return x.labels() if isinstance(x, SegMap) else x.long()


def dsc_report(
    preds: Sequence[Union[SegMap, torch.Tensor]],
    truths: Sequence[Union[SegMap, torch.Tensor]],
    classes: Optional[int] = None,
    region_sizes: Optional[Dict[int, int]] = None,
    include_background: bool = False,
) -> DscReport:
    if len(preds) != len(truths) or not preds:
        raise ValueError(f"need matching non-empty prediction/truth lists, got {len(preds)} and {len(truths)}")
    if classes is None:
        first = truths[0] if isinstance(truths[0], SegMap) else preds[0]
        if not isinstance(first, SegMap):
            raise ValueError("classes must be given for label tensors")
        classes = first.classes
    inter = np.zeros(classes, dtype=np.int64)
    pred_size = np.zeros(classes, dtype=np.int64)
    true_size = np.zeros(classes, dtype=np.int64)
    for pred, truth in zip(preds, truths):
        p, t = _labels(pred), _labels(truth)
        if p.shape != t.shape:
            raise ValueError(f"prediction {tuple(p.shape)} and truth {tuple(t.shape)} disagree")
        for c in range(classes):
            pc, tc = p == c, t == c
            inter[c] += int((pc & tc).sum())
            pred_size[c] += int(pc.sum())
            true_size[c] += int(tc.sum())
    first_class = 0 if include_background else 1
    per_class, absent = {}, []
    for c in range(first_class, classes):
        denom = pred_size[c] + true_size[c]
        if denom == 0:
            per_class[c] = 1.0
            absent.append(c)
        else:
            per_class[c] = float(2 * inter[c] / denom)
    sizes = region_sizes or {c: int(true_size[c]) for c in per_class}
    weight = sum(sizes.get(c, 0) for c in per_class)
    if weight > 0:
        overall = sum(per_class[c] * sizes.get(c, 0) for c in per_class) / weight
    else:
        overall = float(np.mean(list(per_class.values())))
    if absent:
        logger.warning(f"Classes {absent} are absent from both predictions and truths; reported as Dice 1")
    return DscReport(per_class=per_class, region_sizes=sizes, absent_classes=absent, overall=float(overall))


class HistogramPair(BaseModel):
    """Intra- and inter-subject similarity distributions over shared uniform bins on [0, 1]."""
    name: str
    metric: str
    edges: List[float]
    intra: List[float]
    inter: List[float]
    n_intra: int
    n_inter: int
    intersection: float


def histogram_pair(name: str, metric: str, intra, inter, bins: int = Defaults.HISTOGRAM_BINS) -> HistogramPair:
    intra, inter = np.asarray(intra, dtype=np.float64), np.asarray(inter, dtype=np.float64)
    if intra.size == 0 or inter.size == 0:
        raise ValueError(f"histogram '{name}' needs both intra- and inter-subject values")
    edges = np.linspace(0.0, 1.0, bins + 1)
    h_intra = np.histogram(np.clip(intra, 0, 1), bins=edges)[0] / intra.size
    h_inter = np.histogram(np.clip(inter, 0, 1), bins=edges)[0] / inter.size
    return HistogramPair(
        name=name,
        metric=metric,
        edges=edges.tolist(),
        intra=h_intra.tolist(),
        inter=h_inter.tolist(),
        n_intra=int(intra.size),
        n_inter=int(inter.size),
        intersection=float(np.minimum(h_intra, h_inter).sum()),
    )


def pairwise_values(items: Sequence[AttackItem], similarity: str, workers: int = 4) -> Tuple[List[float], List[float]]:
    """Similarity of every unordered item pair, split into same-subject and different-subject lists."""
    scores = score_matrix(items, items, similarity, workers=workers)
    intra, inter = [], []
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            (intra if items[i].subject_id == items[j].subject_id else inter).append(float(scores[i, j]))
    return intra, inter


def similarity_histograms(
    corpus: Corpus, deformed: Optional[Corpus] = None, bins: int = Defaults.HISTOGRAM_BINS, workers: int = 4
) -> Dict[str, HistogramPair]:
    """MS-SSIM histograms of images and Dice histograms of segmentations, clean and (optionally) deformed."""
    if sum(len(s.scans) >= 2 for s in corpus.subjects) < 1 or len(corpus) < 2:
        raise ValueError("histograms need at least two subjects and repeat scans")
    sources = [("clean", corpus)] + ([("deformed", deformed)] if deformed is not None else [])
    result = {}
    for prefix, source in sources:
        for representation, metric in (("image", "ms-ssim"), ("segmap", "dice")):
            intra, inter = pairwise_values(items_from_corpus(source, representation), metric, workers)
            name = f"{prefix}_{representation}s"
            result[name] = histogram_pair(name, metric, intra, inter, bins)
            logger.info(f"Histogram {name}: intra/inter intersection {result[name].intersection:.3f}")
    return result


def _scan_key(key_dim: int, seed: int, index: int) -> PrivateKey:
    return PrivateKey.generate(key_dim, seed=int(np.random.SeedSequence([seed, index]).generate_state(1)[0]))


def deform_corpus(
    generator: GeneratorNet, corpus: Corpus, seed: int = 0, segmenter: Optional[SegmentationNet] = None
) -> Corpus:
    """What the server observes: every scan warped under its own fresh key.

    With a segmenter the segmentation maps are the server's predictions on the
    proxy volumes; otherwise they are the warped ground truth. Results are
    cropped back to the corpus grid.
    """
    subjects, index = [], 0
    for subject in corpus.subjects:
        scans = []
        for scan in subject.scans:
            encoded = client_encode(generator, scan.volume, _scan_key(generator.config.key_dim, seed, index))
            index += 1
            x_d = encoded.deformed.volume
            if segmenter is not None:
                y_d = segment(segmenter, x_d)
            else:
                y_d = warp(pad_to(scan.segmap, x_d.dims), encoded.forward_flow)
            scans.append(Scan(scan.scan_id, crop_to(x_d, scan.volume.dims), crop_to(y_d, scan.volume.dims)))
        subjects.append(SubjectRecord(subject.subject_id, tuple(scans)))
    return Corpus(tuple(subjects), dict(corpus.seeds), corpus.spec)


class ReconstructionReport(BaseModel):
    """Round-trip quality: mean MS-SSIM, mean soft Dice and pooled hard Dice per foreground class."""
    ms_ssim: float
    dice: float
    per_class: Dict[int, float] = Field(default_factory=dict)


def reconstruction_report(generator: GeneratorNet, corpus: Corpus, seed: int = 0) -> ReconstructionReport:
    """Mean MS-SSIM(x, f_inv(f(x))) and soft Dice(y, f_inv(f(y))) over the corpus, plus argmax Dice per class."""
    dims = tuple(generator.config.dims)
    images, segmaps, reconstructions, truths = [], [], [], []
    for index, (_, scan) in enumerate(corpus.scans()):
        x, y = pad_to(scan.volume, dims), pad_to(scan.segmap, dims)
        forward_flow, inverse_flow = generate_flows(generator, x, _scan_key(generator.config.key_dim, seed, index))
        images.append(compose_roundtrip(x, forward_flow, inverse_flow).value)
        roundtrip = compose_roundtrip(y, forward_flow, inverse_flow)
        segmaps.append(roundtrip.value)
        reconstructions.append(roundtrip.reconstruction)
        truths.append(y)
    hard = dsc_report(reconstructions, truths)
    return ReconstructionReport(ms_ssim=float(np.mean(images)), dice=float(np.mean(segmaps)), per_class=hard.per_class)


class ReidSummary(BaseModel):
    representation: str
    similarity: str
    mean_ap: float
    chance: float
    f1: Optional[float] = None
    n_queries: int


class EvalReport(BaseModel):
    dsc: Optional[DscReport] = None
    reid: Dict[str, ReidSummary] = Field(default_factory=dict)
    reconstruction: Optional[ReconstructionReport] = None
    histograms: Dict[str, HistogramPair] = Field(default_factory=dict)

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    def write_csv(self, path: Union[str, Path]) -> Path:
        """One row per histogram bin: name, metric, bin_low, bin_high, intra, inter."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "metric", "bin_low", "bin_high", "intra", "inter"])
            for hist in self.histograms.values():
                for i in range(len(hist.intra)):
                    writer.writerow([hist.name, hist.metric, hist.edges[i], hist.edges[i + 1], hist.intra[i], hist.inter[i]])
        return path


def summarize_attack(result: AttackResult, representation: str) -> ReidSummary:
    return ReidSummary(
        representation=representation,
        similarity=result.similarity,
        mean_ap=result.mean_ap,
        chance=result.chance,
        f1=result.f1,
        n_queries=len(result.rankings),
    )


def evaluate_system(
    generator: GeneratorNet,
    segmenter: SegmentationNet,
    corpus: Corpus,
    seed: int = 0,
    attacker_steps: int = 0,
    histograms: bool = True,
    workers: int = 4,
    attacker_corpus: Optional[Corpus] = None,
) -> EvalReport:
    """Utility through the proxy pipeline, privacy against re-identification, and invertibility, on one corpus.

    With `attacker_steps` a Siamese attacker is trained on deformed images and
    on deformed segmentation maps and scored on held-out subjects: the
    `attacker_corpus` subjects when given (deformed under fresh keys), else
    half of this corpus's subjects.
    """
    preds, truths = [], []
    for index, (_, scan) in enumerate(corpus.scans()):
        preds.append(proxy_segment(generator, segmenter, scan.volume, _scan_key(generator.config.key_dim, seed, index)))
        truths.append(scan.segmap)
    report = EvalReport(dsc=dsc_report(preds, truths))

    view = deform_corpus(generator, corpus, seed, segmenter=segmenter)
    attacks = [
        ("clean_image", items_from_corpus(corpus, "image"), "ms-ssim"),
        ("deformed_image", items_from_corpus(view, "image"), "ms-ssim"),
        ("deformed_segmap", items_from_corpus(view, "segmap"), "dice"),
    ]
    for name, items, similarity in attacks:
        report.reid[name] = summarize_attack(reid_attack(items, similarity=similarity, workers=workers), name)
    if attacker_steps:
        attacker_view = None
        if attacker_corpus is not None:
            attacker_view = deform_corpus(generator, attacker_corpus, seed + 1, segmenter=segmenter)
        for representation in ("image", "segmap"):
            name = f"deformed_{representation}"
            result = siamese_attack(
                items_from_corpus(view, representation),
                items_from_corpus(attacker_view, representation) if attacker_view is not None else None,
                steps=attacker_steps,
                seed=seed,
                workers=workers,
            )
            report.reid[f"{name}_siamese"] = summarize_attack(result, name)
    report.reconstruction = reconstruction_report(generator, corpus, seed)
    if histograms:
        report.histograms = similarity_histograms(corpus, view, workers=workers)
    logger.info(
        f"Evaluation: overall DSC {report.dsc.overall:.3f}, deformed-image mAP "
        f"{report.reid['deformed_image'].mean_ap:.3f}, round-trip MS-SSIM {report.reconstruction.ms_ssim:.3f}"
    )
    return report
