import numpy as np
import pytest
import torch

from pxsg_core.evaluation import items_from_corpus, pairwise_values
from pxsg_core.phantom import (
    Corpus,
    check_spec,
    read_corpus,
    split,
    subject_geometry,
    synthesize_corpus,
    synthesize_subject,
    write_corpus,
)
from pxsg_core.settings import PhantomSpec
from pxsg_core.volume import SubjectRecord, Scan, Volume, one_hot


def test_same_seed_gives_identical_subjects(phantom_spec):
    a = synthesize_subject(phantom_spec, subject_seed=123)
    b = synthesize_subject(phantom_spec, subject_seed=123)
    geometry_a, geometry_b = subject_geometry(phantom_spec, 123), subject_geometry(phantom_spec, 123)
    assert np.array_equal(geometry_a.deformation, geometry_b.deformation)
    assert np.array_equal(geometry_a.semi_axes, geometry_b.semi_axes)
    for scan_a, scan_b in zip(a.scans, b.scans):
        assert torch.equal(scan_a.volume.data, scan_b.volume.data)
        assert torch.equal(scan_a.segmap.soft, scan_b.segmap.soft)


def test_corpus_shape_and_ground_truth(corpus, phantom_spec):
    assert len(corpus) == phantom_spec.n_subjects
    assert corpus.n_scans == phantom_spec.n_subjects * phantom_spec.scans_per_subject
    assert corpus.dims == phantom_spec.dims
    seen = set()
    for _, scan in corpus.scans():
        assert scan.volume.is_normalized()
        assert scan.segmap.is_normalized(0.0)
        seen.update(scan.segmap.labels().unique().tolist())
    assert seen == set(range(phantom_spec.classes))


def test_threaded_synthesis_matches_sequential(phantom_spec, corpus):
    threaded = synthesize_corpus(phantom_spec, workers=3)
    assert threaded.seeds == corpus.seeds
    for (_, a), (_, b) in zip(threaded.scans(), corpus.scans()):
        assert torch.equal(a.volume.data, b.volume.data)


def test_repeat_scans_are_more_alike_than_other_subjects():
    spec = PhantomSpec(n_subjects=10, scans_per_subject=2, dims=(16, 16, 16), classes=3, shell_radii=(0.5, 1.0), seed=3)
    intra, inter = pairwise_values(items_from_corpus(synthesize_corpus(spec), "image"), "ms-ssim")
    assert len(intra) == 10
    assert np.mean(intra) > np.mean(inter)


def test_degenerate_spec_is_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        check_spec(PhantomSpec(dims=(4, 4, 4)))


def test_spec_needs_one_radius_per_foreground_class():
    with pytest.raises(ValueError):
        PhantomSpec(classes=4, shell_radii=(0.5, 1.0))


def test_split_is_subject_disjoint(corpus):
    train, test = split(corpus, 0.75, seed=0)
    assert (len(train), len(test)) == (3, 1)
    train_ids = {s.subject_id for s in train.subjects}
    test_ids = {s.subject_id for s in test.subjects}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {s.subject_id for s in corpus.subjects}


def _tiny_corpus(n):
    scan = Scan("scan00", Volume(torch.zeros(1, 1, 1)), one_hot(torch.zeros(1, 1, 1), 2))
    return Corpus(tuple(SubjectRecord(f"s{i}", (scan,)) for i in range(n)))


def test_split_sizes_at_scale():
    train, test = split(_tiny_corpus(350), 0.75, seed=1)
    assert len(train) in (262, 263)
    assert len(train) + len(test) == 350


def test_split_needs_two_subjects():
    with pytest.raises(ValueError):
        split(_tiny_corpus(1), 0.75)


def test_corpus_survives_a_disk_round_trip(tmp_path, corpus):
    root = write_corpus(corpus, tmp_path / "corpus")
    assert (root / "manifest.json").exists()
    restored = read_corpus(root)
    assert restored.seeds == corpus.seeds
    assert restored.spec == corpus.spec
    for (sid_a, a), (sid_b, b) in zip(restored.scans(), corpus.scans()):
        assert (sid_a, a.scan_id) == (sid_b, b.scan_id)
        assert torch.equal(a.volume.data, b.volume.data)
        assert torch.equal(a.segmap.labels(), b.segmap.labels())
