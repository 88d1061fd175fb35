import csv

import numpy as np
import pytest

from embedding_align_lab.cli import load_corpus, load_model
from embedding_align_lab.config import DetectConfig, RunConfig
from embedding_align_lab.errors import ContractError
from embedding_align_lab.lab_tools.corpus import class_captions
from embedding_align_lab.lab_tools.detect import (
    DetectionVerdict,
    detection_sweep,
    noise_probe,
    probe_batch,
    probe_noise,
    sweep_rates,
)
from embedding_align_lab.lab_tools.metrics import caption_embeddings

CAPTIONS = ["a red circle", "a blue circle", "a red square", "a blue square"]


@pytest.fixture
def text_embs(tiny_params, vocab):
    return caption_embeddings(tiny_params, CAPTIONS, vocab)


def _verdict(modified, sigma=0.03):
    labels = [0, 1, 1] if modified else [0, 0, 1]
    return DetectionVerdict(verdict="modified" if modified else "unmodified", agreement=labels.count(0),
                            base_label=0, trial_labels=labels, sigma=sigma)


def test_negligible_noise_never_flags(tiny_params, rng, text_embs):
    cfg = DetectConfig(sigma=1e-6, trials=5)
    for index in range(4):
        verdict = noise_probe(rng.uniform(0.1, 0.9, size=(8, 8, 3)), tiny_params, cfg, text_embs, index=index)
        assert verdict.verdict == "unmodified" and verdict.agreement == 5


def test_probe_is_deterministic(tiny_params, random_image, text_embs):
    cfg = DetectConfig(sigma=0.3, trials=7, seed=11)
    a = noise_probe(random_image, tiny_params, cfg, text_embs, index=3)
    b = noise_probe(random_image, tiny_params, cfg, text_embs, index=3)
    assert a == b


def test_verdict_follows_majority_of_trial_labels(tiny_params, random_image, text_embs):
    cfg = DetectConfig(sigma=0.5, trials=9)
    verdict = noise_probe(random_image, tiny_params, cfg, text_embs)
    assert len(verdict.trial_labels) == 9
    assert verdict.agreement == sum(label == verdict.base_label for label in verdict.trial_labels)
    assert verdict.modified == (verdict.agreement <= 9 / 2)


def test_single_trial_is_a_plain_comparison(tiny_params, random_image, text_embs):
    verdict = noise_probe(random_image, tiny_params, DetectConfig(sigma=0.2, trials=1), text_embs)
    assert verdict.modified == (verdict.trial_labels[0] != verdict.base_label)


def test_noise_is_seeded_per_image():
    a = probe_noise((2, 2, 3), 3, seed=5, index=0)
    assert np.array_equal(a, probe_noise((2, 2, 3), 3, seed=5, index=0))
    assert not np.array_equal(a, probe_noise((2, 2, 3), 3, seed=5, index=1))
    assert a.shape == (3, 2, 2, 3)


def test_out_of_range_image_is_rejected(tiny_params, text_embs):
    with pytest.raises(ContractError):
        noise_probe(np.full((8, 8, 3), 1.2), tiny_params, DetectConfig(), text_embs)


def test_probe_batch_parallel_matches_serial(tiny_params, rng, text_embs):
    images = [rng.uniform(size=(8, 8, 3)) for _ in range(3)]
    cfg = DetectConfig(trials=3)
    serial = probe_batch(images, tiny_params, cfg, text_embs, sigmas=[0.05, 0.4], jobs=1)
    parallel = probe_batch(images, tiny_params, cfg, text_embs, sigmas=[0.05, 0.4], jobs=2)
    assert serial == parallel
    assert [v.sigma for v in serial[0]] == [0.05, 0.4]


def test_sweep_rates_count_against_provenance():
    verdicts = [[_verdict(True), _verdict(False)], [_verdict(True), _verdict(True)],
                [_verdict(False), _verdict(True)], [_verdict(False), _verdict(False)]]
    rows = sweep_rates(verdicts, [True, True, False, False], [0.01, 0.1])
    assert (rows[0].true_positive_rate, rows[0].false_positive_rate) == (1.0, 0.0)
    assert (rows[1].true_positive_rate, rows[1].false_positive_rate) == (0.5, 0.5)
    assert rows[1].true_positives == 1 and rows[1].negatives == 2


def test_sweep_needs_both_classes(tiny_params, random_image, text_embs):
    with pytest.raises(ContractError):
        sweep_rates([[_verdict(True)]], [True], [0.03])
    with pytest.raises(ContractError):
        detection_sweep([random_image], [False], tiny_params, [0.03], DetectConfig(), text_embs)


def test_detection_sweep_with_negligible_noise(tiny_params, rng, text_embs):
    images = [rng.uniform(size=(8, 8, 3)) for _ in range(4)]
    rows = detection_sweep(images, [True, False, True, False], tiny_params, [1e-6], DetectConfig(trials=3),
                           text_embs)
    assert len(rows) == 1
    assert rows[0].true_positive_rate == 0.0 and rows[0].false_positive_rate == 0.0


@pytest.fixture(scope="module")
def trained_run(pipeline_run):
    cfg = RunConfig(out_dir=str(pipeline_run))
    model, vocab = load_model(cfg)
    return cfg, model, vocab, load_corpus(cfg)


@pytest.mark.slow
def test_default_sigma_separates_clean_from_attacked(pipeline_run):
    with open(pipeline_run / "detect" / "detection_report.csv", newline="") as handle:
        report = list(csv.DictReader(handle))
    assert {float(r["sigma"]) for r in report} == {0.03}
    clean = [r["verdict"] == "unmodified" for r in report if r["provenance"] == "clean"]
    attacked = [r["verdict"] == "modified" for r in report if r["provenance"] == "attacked"]
    assert np.mean(clean) >= 0.95
    assert np.mean(attacked) >= 0.9


@pytest.mark.slow
def test_heavy_noise_flags_clean_images(trained_run):
    cfg, model, vocab, items = trained_run
    text_embs = caption_embeddings(model, class_captions(cfg.corpus), vocab)
    held_out = [item for item in items if item.split == "held-out"][:20]
    verdicts = probe_batch([item.image for item in held_out], model, DetectConfig(sigma=1.0), text_embs)
    flagged = [v[0].verdict == "modified" for v in verdicts]
    assert np.mean(flagged) >= 0.5
