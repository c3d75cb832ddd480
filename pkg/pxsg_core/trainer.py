# Joint adversarial training of the generator and segmenter against the
# Siamese discriminator. Each step alternates one discriminator update on real
# ground-truth pairs plus the generated pair, then one generator+segmenter
# update on the weighted objective with the discriminator frozen.

import hashlib
import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint
from .evaluation import evaluate_system
from .errors import DimensionMismatchError, TrainingDivergedError, UnsatisfiablePairsError
from .losses import (
    LossReport,
    adversarial_loss,
    dice_loss,
    diversity_from_flows,
    invertibility_loss,
    smoothness_loss,
    total_loss,
)
from .networks import GeneratorNet, SegmentationNet, SiameseDiscriminator
from .phantom import Corpus
from .settings import NetworkConfig, TrainConfig
from .volume import SegMap, pad_to
from .warp import warp_tensor

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
STATE_FILE = "state.pt"
CHECKPOINT_NAMES = {"generator": "g.ckpt", "segmenter": "s.ckpt", "discriminator": "d.ckpt"}


class LabeledPair(NamedTuple):
    subject_a: str
    scan_a: str
    subject_b: str
    scan_b: str
    same: int
    y_a: SegMap
    y_b: SegMap


def sample_pairs(
    corpus: Corpus, n: int, balance: float = 0.5, rng: Optional[np.random.Generator] = None
) -> List[LabeledPair]:
    """Draw `n` ground-truth pairs, round(n * balance) of them same-subject; same = 1 iff subject ids match."""
    if n < 0 or not 0.0 <= balance <= 1.0:
        raise ValueError(f"need n >= 0 and balance in [0, 1], got n={n}, balance={balance}")
    rng = rng if rng is not None else np.random.default_rng()
    n_same = int(round(n * balance))
    n_diff = n - n_same
    repeat = [s for s in corpus.subjects if len(s.scans) >= 2]
    if n_same and not repeat:
        raise UnsatisfiablePairsError("same-subject", "no subject has two or more scans")
    if n_diff and len(corpus.subjects) < 2:
        raise UnsatisfiablePairsError("different-subject", f"corpus has {len(corpus.subjects)} subject(s)")

    pairs = []
    for _ in range(n_same):
        subject = repeat[int(rng.integers(len(repeat)))]
        i, j = rng.choice(len(subject.scans), size=2, replace=False)
        a, b = subject.scans[int(i)], subject.scans[int(j)]
        pairs.append(LabeledPair(subject.subject_id, a.scan_id, subject.subject_id, b.scan_id, 1, a.segmap, b.segmap))
    for _ in range(n_diff):
        i, j = rng.choice(len(corpus.subjects), size=2, replace=False)
        sa, sb = corpus.subjects[int(i)], corpus.subjects[int(j)]
        a = sa.scans[int(rng.integers(len(sa.scans)))]
        b = sb.scans[int(rng.integers(len(sb.scans)))]
        pairs.append(LabeledPair(sa.subject_id, a.scan_id, sb.subject_id, b.scan_id, 0, a.segmap, b.segmap))
    return [pairs[int(k)] for k in rng.permutation(len(pairs))]


@dataclass
class TrainBatch:
    x: torch.Tensor
    y: torch.Tensor
    pair_a: torch.Tensor
    pair_b: torch.Tensor
    labels: torch.Tensor
    index: int = 0


class _PaddedCorpus:
    """Scans padded once to the network grid, addressable by (subject, scan)."""

    def __init__(self, corpus: Corpus, dims):
        self.keys: List[Tuple[str, str]] = []
        self.images: Dict[Tuple[str, str], torch.Tensor] = {}
        self.segmaps: Dict[Tuple[str, str], torch.Tensor] = {}
        for subject_id, scan in corpus.scans():
            key = (subject_id, scan.scan_id)
            self.keys.append(key)
            self.images[key] = pad_to(scan.volume, dims).data.unsqueeze(0)
            self.segmaps[key] = pad_to(scan.segmap, dims).soft


def iterate_batches(
    corpus: Corpus, padded: _PaddedCorpus, config: TrainConfig, epoch: int
) -> Iterator[TrainBatch]:
    """Deterministic batches of one epoch; the RNG depends only on (seed, epoch)."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(padded.keys))
    steps = config.steps_per_epoch or math.ceil(len(order) / config.batch_size)
    dtype = torch.float32
    for step in range(steps):
        picks = [padded.keys[int(order[(step * config.batch_size + i) % len(order)])] for i in range(config.batch_size)]
        pairs = sample_pairs(corpus, config.pairs_per_step, config.pair_balance, rng)
        yield TrainBatch(
            x=torch.stack([padded.images[k] for k in picks]).to(dtype),
            y=torch.stack([padded.segmaps[k] for k in picks]).to(dtype),
            pair_a=torch.stack([padded.segmaps[(p.subject_a, p.scan_a)] for p in pairs]).to(dtype),
            pair_b=torch.stack([padded.segmaps[(p.subject_b, p.scan_b)] for p in pairs]).to(dtype),
            labels=torch.tensor([p.same for p in pairs], dtype=dtype),
            index=step,
        )


_DONE = object()


def prefetch(batches: Iterable, depth: int = 2) -> Iterator:
    """Produce items on a worker thread through a bounded queue; order is preserved."""
    buffer: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        try:
            for item in batches:
                while not stop.is_set():
                    try:
                        buffer.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            buffer.put(_DONE)
        except Exception as e:
            buffer.put(e)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


def parameter_digest(net: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _set_trainable(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit: networks, optimizers, RNG and progress."""
    config: TrainConfig
    generator: GeneratorNet
    segmenter: SegmentationNet
    discriminator: SiameseDiscriminator
    opt_gs: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    key_rng: torch.Generator
    epoch: int = 0
    step: int = 0
    running: Dict[str, float] = field(default_factory=dict)
    running_count: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig, generator: Optional[GeneratorNet] = None) -> "TrainState":
        torch.manual_seed(config.seed)
        network = config.network
        if generator is None:
            generator = GeneratorNet(network)
        elif tuple(generator.config.dims) != tuple(network.dims):
            raise DimensionMismatchError(
                f"pretrained generator works on {tuple(generator.config.dims)}, run is configured for {tuple(network.dims)}"
            )
        segmenter = SegmentationNet(network)
        discriminator = SiameseDiscriminator(network)
        gs_params = list(segmenter.parameters())
        if config.freeze_generator:
            _set_trainable(generator, False)
        else:
            gs_params += list(generator.parameters())
        opt_gs = torch.optim.Adam(gs_params, lr=config.learning_rate, betas=config.betas)
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=config.betas)
        key_rng = torch.Generator().manual_seed(config.seed)
        return cls(config, generator, segmenter, discriminator, opt_gs, opt_d, key_rng)

    def record(self, report: LossReport) -> None:
        for name, value in report.as_floats().items():
            self.running[name] = self.running.get(name, 0.0) + value
        self.running_count += 1

    def close_epoch(self) -> Dict[str, float]:
        count = max(self.running_count, 1)
        summary = {"epoch": self.epoch + 1, **{name: self.running.get(name, 0.0) / count for name in LossReport.TERMS}}
        self.history.append(summary)
        self.running, self.running_count = {}, 0
        self.epoch += 1
        return summary

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "config": self.config.model_dump(mode="json"),
                "generator_config": self.generator.config.model_dump(mode="json"),
                "generator": self.generator.state_dict(),
                "segmenter": self.segmenter.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "opt_gs": self.opt_gs.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "key_rng": self.key_rng.get_state(),
                "torch_rng": torch.get_rng_state(),
                "epoch": self.epoch,
                "step": self.step,
                "running": self.running,
                "running_count": self.running_count,
                "history": self.history,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        payload = torch.load(Path(path), weights_only=False)
        config = TrainConfig.model_validate(payload["config"])
        generator = GeneratorNet(NetworkConfig.model_validate(payload["generator_config"]))
        generator.load_state_dict(payload["generator"])
        state = cls.create(config, generator)
        state.segmenter.load_state_dict(payload["segmenter"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.opt_gs.load_state_dict(payload["opt_gs"])
        state.opt_d.load_state_dict(payload["opt_d"])
        state.key_rng.set_state(payload["key_rng"])
        torch.set_rng_state(payload["torch_rng"])
        state.epoch = payload["epoch"]
        state.step = payload["step"]
        state.running = dict(payload["running"])
        state.running_count = payload["running_count"]
        state.history = list(payload["history"])
        logger.info(f"Resumed training state from {path} at epoch {state.epoch}")
        return state


def _clip(parameters, max_norm: Optional[float]) -> None:
    if max_norm:
        torch.nn.utils.clip_grad_norm_(parameters, max_norm)


def _check_finite(value: torch.Tensor, term: str, batch_index: int) -> None:
    if not torch.isfinite(value.detach()).all():
        raise TrainingDivergedError(term, batch_index)


def discriminator_step(state: TrainState, batch: TrainBatch, key: torch.Tensor) -> torch.Tensor:
    """Update D on the real pairs and the generated pair, with G and S frozen."""
    G, S, D = state.generator, state.segmenter, state.discriminator
    with torch.no_grad():
        flow, inverse = G(batch.x, key)
        y_d = S(warp_tensor(batch.x, flow))
        y_hat = warp_tensor(y_d, inverse)
    _set_trainable(D, True)
    terms = adversarial_loss(D, batch.pair_a, batch.pair_b, batch.labels, y_d, y_hat)
    _check_finite(terms.discriminator_loss, "adv", batch.index)
    state.opt_d.zero_grad(set_to_none=True)
    terms.discriminator_loss.backward()
    _clip(D.parameters(), state.config.grad_clip)
    state.opt_d.step()
    return terms.discriminator_loss.detach()


def generator_step(state: TrainState, batch: TrainBatch, key: torch.Tensor, other_key: torch.Tensor) -> LossReport:
    """Update G and S on the weighted objective, with D frozen."""
    G, S, D = state.generator, state.segmenter, state.discriminator
    weights = state.config.effective_weights()
    frozen = state.config.freeze_generator
    zero = torch.zeros((), dtype=batch.x.dtype)
    _set_trainable(D, False)
    try:
        flow, inverse = G(batch.x, key)
        x_d = warp_tensor(batch.x, flow)
        y_d = S(x_d)
        y_hat = warp_tensor(y_d, inverse)
        seg = dice_loss(y_hat, batch.y)
        adv = torch.log(1 - D(y_d, y_hat)).mean() if weights.adversarial else zero
        inv = invertibility_loss(batch.x, batch.y, flow, inverse, x_d) if weights.invertibility and not frozen else zero
        smt = smoothness_loss(flow) if weights.smoothness and not frozen else zero
        if weights.diversity and not frozen:
            other_flow, _ = G(batch.x, other_key)
            div = diversity_from_flows(batch.x, batch.y, flow, other_flow)
        else:
            div = zero
        report = total_loss(seg, adv, inv, smt, div, weights)
        bad = report.non_finite_term()
        if bad is not None:
            raise TrainingDivergedError(bad, batch.index)
        state.opt_gs.zero_grad(set_to_none=True)
        report.total.backward()
        params = [p for group in state.opt_gs.param_groups for p in group["params"]]
        _clip(params, state.config.grad_clip)
        state.opt_gs.step()
    finally:
        _set_trainable(D, True)
    return report


def train_step(state: TrainState, batch: TrainBatch) -> Tuple[TrainState, LossReport]:
    """One alternating step; fresh keys k, k' ~ N(0, I) are drawn from the state's key RNG."""
    state.generator.train()
    state.segmenter.train()
    state.discriminator.train()
    shape = (batch.x.shape[0], state.generator.config.key_dim)
    key = torch.randn(shape, generator=state.key_rng).to(batch.x.dtype)
    other_key = torch.randn(shape, generator=state.key_rng).to(batch.x.dtype)
    if state.config.effective_weights().adversarial:
        discriminator_step(state, batch, key)
    report = generator_step(state, batch, key, other_key)
    state.record(report)
    state.step += 1
    return state, report


@dataclass
class RunResult:
    out_dir: Path
    history: List[Dict[str, float]]
    checkpoints: Dict[str, Path]
    evaluation: Optional[Dict] = None


def _save_networks(state: TrainState, out_dir: Path, complete: bool) -> Dict[str, Path]:
    extra = {"epoch": state.epoch, "seed": state.config.seed}
    return {
        kind: save_checkpoint(out_dir / name, getattr(state, kind), complete=complete, **extra)
        for kind, name in CHECKPOINT_NAMES.items()
    }


def run(
    config: TrainConfig,
    corpus: Corpus,
    out_dir: Union[str, Path],
    test_corpus: Optional[Corpus] = None,
    generator: Optional[GeneratorNet] = None,
    resume: Optional[Union[str, Path]] = None,
) -> RunResult:
    """Train for `config.epochs`, appending one metrics record per epoch and checkpointing as it goes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True, warn_only=True)
    state = TrainState.load(resume) if resume else TrainState.create(config, generator)
    if not resume:
        (out_dir / METRICS_FILE).write_text("")
    padded = _PaddedCorpus(corpus, config.network.dims)
    weights = config.effective_weights()
    logger.info(
        f"Training {config.epochs} epochs on {len(corpus)} subjects / {corpus.n_scans} scans, "
        f"weights {weights.model_dump()}, frozen generator: {config.freeze_generator}"
    )
    try:
        while state.epoch < config.epochs:
            for batch in prefetch(iterate_batches(corpus, padded, config, state.epoch), config.prefetch):
                train_step(state, batch)
            summary = state.close_epoch()
            with open(out_dir / METRICS_FILE, "a") as fh:
                fh.write(json.dumps(summary) + "\n")
            _save_networks(state, out_dir, complete=False)
            state.save(out_dir / STATE_FILE)
            logger.info(
                f"Epoch {summary['epoch']}/{config.epochs}: total {summary['total']:.4f} "
                f"seg {summary['seg']:.4f} adv {summary['adv']:.4f} inv {summary['inv']:.4f} "
                f"smt {summary['smt']:.4f} div {summary['div']:.4f}"
            )
    except Exception as e:
        logger.error(f"Training stopped at epoch {state.epoch + 1}: {e}", exc_info=True)
        raise
    checkpoints = _save_networks(state, out_dir, complete=True)
    result = RunResult(out_dir, list(state.history), checkpoints)
    if test_corpus is not None:
        report = evaluate_system(state.generator, state.segmenter, test_corpus, seed=config.seed)
        result.evaluation = report.model_dump(mode="json")
        report.write_json(out_dir / "evaluation.json")
    return result


def read_metrics(out_dir: Union[str, Path]) -> List[Dict[str, float]]:
    path = Path(out_dir) / METRICS_FILE
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
