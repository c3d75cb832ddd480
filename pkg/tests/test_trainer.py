import numpy as np
import pytest
import torch

from pxsg_core.checkpoint import load_checkpoint
from pxsg_core.errors import TrainingDivergedError, UnsatisfiablePairsError
from pxsg_core.networks import generate_flows
from pxsg_core.phantom import Corpus
from pxsg_core.settings import TrainConfig
from pxsg_core.trainer import (
    STATE_FILE,
    TrainState,
    _PaddedCorpus,
    discriminator_step,
    generator_step,
    iterate_batches,
    parameter_digest,
    prefetch,
    read_metrics,
    run,
    sample_pairs,
    train_step,
)
from pxsg_core.volume import PrivateKey, SubjectRecord


def _first_batch(corpus, config, epoch=0):
    padded = _PaddedCorpus(corpus, config.network.dims)
    return next(iterate_batches(corpus, padded, config, epoch))


def _keys(config, batch_size=1, seed=0):
    gen = torch.Generator().manual_seed(seed)
    shape = (batch_size, config.network.key_dim)
    return torch.randn(shape, generator=gen), torch.randn(shape, generator=gen)


def test_pairs_follow_the_requested_balance(corpus):
    pairs = sample_pairs(corpus, 100, 0.5, np.random.default_rng(0))
    assert sum(p.same for p in pairs) == 50
    for p in pairs:
        assert p.same == int(p.subject_a == p.subject_b)
        assert (p.subject_a, p.scan_a) != (p.subject_b, p.scan_b)


def test_only_repeat_subject_provides_same_pairs(corpus):
    two_scans, one_scan = corpus.subjects[0], corpus.subjects[1]
    small = Corpus((two_scans, SubjectRecord(one_scan.subject_id, one_scan.scans[:1])))
    pairs = sample_pairs(small, 20, 0.5, np.random.default_rng(1))
    same = [p for p in pairs if p.same]
    assert len(same) == 10
    assert all(p.subject_a == two_scans.subject_id for p in same)
    assert all({p.scan_a, p.scan_b} == {"scan00", "scan01"} for p in same)


def test_unsatisfiable_balance_names_the_missing_class(corpus):
    singles = Corpus(tuple(SubjectRecord(s.subject_id, s.scans[:1]) for s in corpus.subjects))
    with pytest.raises(UnsatisfiablePairsError) as info:
        sample_pairs(singles, 4, 1.0)
    assert info.value.deficient == "same-subject"
    with pytest.raises(UnsatisfiablePairsError) as info:
        sample_pairs(Corpus(corpus.subjects[:1]), 4, 0.0)
    assert info.value.deficient == "different-subject"


def test_batches_depend_only_on_seed_and_epoch(corpus, train_config):
    a, b = _first_batch(corpus, train_config), _first_batch(corpus, train_config)
    assert torch.equal(a.x, b.x) and torch.equal(a.labels, b.labels)
    assert a.x.shape == (1, 1, *train_config.network.dims)
    assert a.pair_a.shape == (train_config.pairs_per_step, 3, *train_config.network.dims)


def test_prefetch_preserves_order_and_raises():
    assert list(prefetch(iter(range(10)), depth=2)) == list(range(10))

    def failing():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(failing()))


def test_one_step_is_reproducible(corpus, train_config):
    digests, reports = [], []
    for _ in range(2):
        state = TrainState.create(train_config)
        _, report = train_step(state, _first_batch(corpus, train_config))
        digests.append([parameter_digest(net) for net in (state.generator, state.segmenter, state.discriminator)])
        reports.append(report.as_floats())
    assert digests[0] == digests[1]
    assert reports[0] == reports[1]


def test_discriminator_half_step_only_moves_d(corpus, train_config):
    state = TrainState.create(train_config)
    batch = _first_batch(corpus, train_config)
    before = [parameter_digest(n) for n in (state.generator, state.segmenter, state.discriminator)]
    key, _ = _keys(train_config)
    discriminator_step(state, batch, key)
    after = [parameter_digest(n) for n in (state.generator, state.segmenter, state.discriminator)]
    assert after[:2] == before[:2]
    assert after[2] != before[2]


def test_generator_half_step_leaves_d_alone(corpus, train_config):
    state = TrainState.create(train_config)
    batch = _first_batch(corpus, train_config)
    before = [parameter_digest(n) for n in (state.generator, state.segmenter, state.discriminator)]
    key, other = _keys(train_config)
    report = generator_step(state, batch, key, other)
    after = [parameter_digest(n) for n in (state.generator, state.segmenter, state.discriminator)]
    assert after[0] != before[0] and after[1] != before[1]
    assert after[2] == before[2]
    assert all(p.requires_grad for p in state.discriminator.parameters())
    assert np.isfinite(list(report.as_floats().values())).all()


def test_no_proxy_preset_is_plain_supervised_dice(corpus, net_config):
    config = TrainConfig.no_proxy(epochs=1, batch_size=1, pairs_per_step=2, steps_per_epoch=1, network=net_config)
    state = TrainState.create(config)
    g_before = parameter_digest(state.generator)
    d_before = parameter_digest(state.discriminator)
    _, report = train_step(state, _first_batch(corpus, config))
    values = report.as_floats()
    assert values["adv"] == values["inv"] == values["smt"] == values["div"] == 0.0
    assert values["total"] == values["seg"]
    assert parameter_digest(state.generator) == g_before
    assert parameter_digest(state.discriminator) == d_before


def test_non_finite_loss_aborts_the_step(corpus, net_config):
    config = TrainConfig.no_proxy(epochs=1, batch_size=1, pairs_per_step=2, steps_per_epoch=1, network=net_config)
    state = TrainState.create(config)
    batch = _first_batch(corpus, config)
    batch.y[0, 0, 0, 0, 0] = float("nan")
    batch.index = 7
    with pytest.raises(TrainingDivergedError) as info:
        train_step(state, batch)
    assert info.value.term == "seg"
    assert info.value.batch_index == 7


def test_ablations_zero_their_weights():
    config = TrainConfig().with_ablations(["inv", "div"])
    weights = config.effective_weights()
    assert weights.invertibility == 0.0 and weights.diversity == 0.0
    assert weights.smoothness == 10.0 and weights.adversarial == 0.5
    with pytest.raises(ValueError):
        TrainConfig().with_ablations(["adv"])


def test_run_writes_metrics_and_complete_checkpoints(tmp_path, corpus, train_config):
    config = train_config.model_copy(update={"epochs": 2})
    result = run(config, corpus, tmp_path / "run")
    history = read_metrics(tmp_path / "run")
    assert [row["epoch"] for row in history] == [1, 2]
    assert history == result.history
    for kind, path in result.checkpoints.items():
        net, descriptor = load_checkpoint(path, kind=kind)
        assert descriptor["complete"] is True
        assert descriptor["extra"]["epoch"] == 2


def test_identical_runs_log_identical_losses(tmp_path, corpus, train_config):
    config = train_config.model_copy(update={"epochs": 2})
    run(config, corpus, tmp_path / "a")
    run(config, corpus, tmp_path / "b")
    assert read_metrics(tmp_path / "a") == read_metrics(tmp_path / "b")


def test_resumed_run_matches_an_uninterrupted_one(tmp_path, corpus, train_config):
    full = train_config.model_copy(update={"epochs": 2})
    run(full, corpus, tmp_path / "full")
    run(train_config, corpus, tmp_path / "resumed")
    run(full, corpus, tmp_path / "resumed", resume=tmp_path / "resumed" / STATE_FILE)
    assert read_metrics(tmp_path / "resumed") == read_metrics(tmp_path / "full")


def test_frozen_pretrained_generator_is_not_updated(tmp_path, corpus, train_config, shifting_generator):
    config = train_config.model_copy(update={"freeze_generator": True})
    before = parameter_digest(shifting_generator)
    result = run(config, corpus, tmp_path / "transfer", generator=shifting_generator)
    generator, _ = load_checkpoint(result.checkpoints["generator"])
    assert parameter_digest(generator) == before


def _group_norms(state):
    G, S, D = state.generator, state.segmenter, state.discriminator
    groups = {
        "generator.body": G.body,
        "generator.key_stem": G.key_stem,
        "generator.key_upsamplers": G.key_upsamplers,
        "generator.refine": G.refine,
        "generator.forward_head": G.forward_head,
        "generator.inverse_head": G.inverse_head,
        "segmenter.body": S.body,
        "segmenter.head": S.head,
        "discriminator.encoder": D.encoder,
        "discriminator.embedding": D.embedding,
        "discriminator.head": D.head,
    }
    norms = {}
    for name, module in groups.items():
        grads = [p.grad for p in module.parameters() if p.grad is not None]
        norms[name] = float(torch.stack([g.norm() for g in grads]).norm()) if grads else 0.0
    return norms


def test_every_parameter_group_receives_gradient(corpus, train_config):
    # zero flow heads block the key path on the first step; measured after the second
    state = TrainState.create(train_config)
    batch = _first_batch(corpus, train_config)
    train_step(state, batch)
    assert _group_norms(state)["generator.forward_head"] > 0.0
    train_step(state, batch)
    dead = [name for name, norm in _group_norms(state).items() if not norm > 0.0]
    assert dead == []


def test_briefly_trained_generator_separates_keys(corpus, train_config, random_volume):
    state = TrainState.create(train_config)
    batch = _first_batch(corpus, train_config)
    for _ in range(3):
        train_step(state, batch)
    volume = random_volume(train_config.network.dims)
    key_dim = train_config.network.key_dim
    flow_a, inverse_a = generate_flows(state.generator, volume, PrivateKey.generate(key_dim, seed=1))
    flow_b, inverse_b = generate_flows(state.generator, volume, PrivateKey.generate(key_dim, seed=2))
    assert (flow_a.vectors - flow_b.vectors).abs().max() > 0.0
    assert (inverse_a.vectors - inverse_b.vectors).abs().max() > 0.0
