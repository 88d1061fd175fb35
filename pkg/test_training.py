import numpy as np
import pytest

from embedding_align_lab.cli import load_corpus, load_model
from embedding_align_lab.config import CorpusConfig, RunConfig, TrainConfig
from embedding_align_lab.errors import ConfigurationError, ContractError, TrainingDivergedError
from embedding_align_lab.lab_tools import training
from embedding_align_lab.lab_tools.corpus import Vocabulary, class_captions, generate_corpus
from embedding_align_lab.lab_tools.encoders import encode_images, normalize_embedding
from embedding_align_lab.lab_tools.metrics import caption_embeddings
from embedding_align_lab.lab_tools.tensor import Tensor
from embedding_align_lab.lab_tools.training import (
    Adam,
    SGD,
    augment,
    contrastive_train,
    distinct_class_batches,
    evaluate_contrastive_loss,
    evaluate_zero_shot,
    info_nce_loss,
    zero_shot_accuracy,
)


@pytest.fixture
def tiny_corpus(tiny_corpus_config, tiny_config):
    return generate_corpus(tiny_corpus_config, image_size=tiny_config.image_size)


def test_info_nce_single_pair_is_zero(rng):
    v = Tensor(normalize_embedding(rng.normal(size=6))[None, :])
    assert info_nce_loss(v, v, 0.07).item() == 0.0


def test_info_nce_prefers_matched_pairs():
    eye = Tensor(np.eye(4))
    shuffled = Tensor(np.eye(4)[[1, 2, 3, 0]])
    assert info_nce_loss(eye, eye, 0.1).item() < info_nce_loss(eye, shuffled, 0.1).item()


def test_info_nce_shape_mismatch():
    with pytest.raises(ContractError):
        info_nce_loss(Tensor(np.eye(3)), Tensor(np.eye(4)), 0.07)


def test_batches_hold_distinct_classes(rng):
    labels = np.repeat(np.arange(4), 6)
    batches = distinct_class_batches(labels, 4, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(24))
    for batch in batches:
        assert len(set(labels[batch].tolist())) == len(batch)


def test_augment_keeps_range_and_shape(rng):
    images = rng.uniform(size=(3, 8, 8, 3)).astype(np.float32)
    out = augment(images, rng, pixel_jitter=0.2, position_jitter=2)
    assert out.shape == images.shape and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_disabled_is_identity(rng):
    images = rng.uniform(size=(2, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(augment(images, rng, 0.0, 0), images)


def test_sgd_and_adam_step_against_gradient():
    for optimizer in (SGD(0.1), Adam(0.1)):
        weights = {"w": np.array([1.0, -1.0], dtype=np.float32)}
        optimizer.step(weights, {"w": np.array([2.0, -2.0], dtype=np.float32)})
        assert weights["w"][0] < 1.0 and weights["w"][1] > -1.0


def test_adam_first_step_has_learning_rate_magnitude():
    weights = {"w": np.zeros(3, dtype=np.float32)}
    Adam(0.01).step(weights, {"w": np.array([5.0, -0.1, 300.0], dtype=np.float32)})
    np.testing.assert_allclose(weights["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_training_lowers_contrastive_loss(tiny_params, tiny_corpus, vocab):
    train_items = [item for item in tiny_corpus if item.split == "train"]
    before = evaluate_contrastive_loss(tiny_params, train_items, vocab, 0.1, batch_size=4)
    cfg = TrainConfig(epochs=15, batch_size=4, learning_rate=1e-2, temperature=0.1, pixel_jitter=0.0,
                      position_jitter=0)
    trained, history = contrastive_train(tiny_params, tiny_corpus, cfg, vocab, progress=False)
    after = evaluate_contrastive_loss(trained, train_items, vocab, 0.1, batch_size=4)
    assert len(history) == 15
    assert after < before
    assert history[-1] < history[0]
    assert trained.metadata["epochs"] == 15 and trained.metadata["vocabulary"] == list(vocab.tokens)


def test_training_leaves_input_model_untouched(tiny_params, tiny_corpus, vocab):
    snapshot = {name: w.copy() for name, w in tiny_params.weights.items()}
    contrastive_train(tiny_params, tiny_corpus, TrainConfig(epochs=1, batch_size=4), vocab, progress=False)
    assert all(np.array_equal(snapshot[n], tiny_params.weights[n]) for n in snapshot)


def test_training_is_seeded(tiny_params, tiny_corpus, vocab):
    cfg = TrainConfig(epochs=2, batch_size=4)
    a, _ = contrastive_train(tiny_params, tiny_corpus, cfg, vocab, progress=False)
    b, _ = contrastive_train(tiny_params, tiny_corpus, cfg, vocab, progress=False)
    assert all(np.array_equal(a.weights[n], b.weights[n]) for n in a.names())


def test_training_needs_train_split(tiny_params, tiny_corpus, vocab):
    held_out = [item for item in tiny_corpus if item.split == "held-out"]
    with pytest.raises(ContractError):
        contrastive_train(tiny_params, held_out, TrainConfig(epochs=1), vocab, progress=False)


def test_non_finite_loss_raises_diverged(tiny_params, tiny_corpus, vocab, monkeypatch):
    monkeypatch.setattr(training, "info_nce_loss", lambda *args: Tensor(np.array(np.nan)))
    with pytest.raises(TrainingDivergedError):
        contrastive_train(tiny_params, tiny_corpus, TrainConfig(epochs=1, batch_size=4), vocab, progress=False)


def test_oversized_vocabulary_is_configuration_error(tiny_params, tiny_corpus):
    big = Vocabulary.from_words([f"w{i}" for i in range(60)])
    with pytest.raises(ConfigurationError):
        contrastive_train(tiny_params, tiny_corpus, TrainConfig(epochs=1), big, progress=False)


def test_zero_shot_accuracy_with_oracle_embeddings():
    texts = np.eye(5)
    labels = np.array([0, 1, 2, 3, 4, 2, 1])
    assert zero_shot_accuracy(texts[labels], labels, texts) == 1.0


def test_zero_shot_accuracy_counts_mistakes():
    texts = np.eye(3)
    assert zero_shot_accuracy(texts[[0, 1, 1]], [0, 1, 2], texts) == pytest.approx(2 / 3)


def test_untrained_model_is_near_chance(tiny_params, vocab, tiny_config):
    cfg = CorpusConfig(per_class=10, seed=7)
    items = generate_corpus(cfg, image_size=tiny_config.image_size)
    accuracy = evaluate_zero_shot(tiny_params, items, class_captions(cfg), vocab)
    # 16 classes: chance is 1/16
    assert accuracy < 0.4


def test_zero_shot_needs_every_class_caption(tiny_params, tiny_corpus, tiny_corpus_config, vocab):
    captions = class_captions(tiny_corpus_config)[:2]
    with pytest.raises(ContractError):
        evaluate_zero_shot(tiny_params, tiny_corpus, captions, vocab)


@pytest.fixture(scope="module")
def trained_run(pipeline_run):
    cfg = RunConfig(out_dir=str(pipeline_run))
    model, vocab = load_model(cfg)
    return cfg, model, vocab, load_corpus(cfg)


@pytest.mark.slow
def test_trained_images_cluster_by_class(trained_run):
    _, model, _, items = trained_run
    held_out = [item for item in items if item.split == "held-out"]
    embs = encode_images(np.stack([item.image for item in held_out]), model).astype(np.float64)
    labels = np.array([item.class_id for item in held_out])
    sims = embs @ embs.T
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    assert sims[same & off_diagonal].mean() > sims[~same].mean()


@pytest.mark.slow
def test_trained_captions_stay_distinguishable(trained_run):
    cfg, model, vocab, _ = trained_run
    embs = caption_embeddings(model, class_captions(cfg.corpus), vocab).astype(np.float64)
    sims = embs @ embs.T
    assert sims[~np.eye(len(embs), dtype=bool)].max() < 0.99
