"""Contrastive (InfoNCE) training of the two-tower model on the shapes corpus."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..config import TrainConfig
from ..errors import ConfigurationError, ContractError, TrainingDivergedError
from ..logging_utils import track_stage
from . import tensor as T
from .corpus import CorpusItem, Vocabulary, tokenize
from .encoders import ModelParams, encode_images, encode_texts, text_forward, vision_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


def info_nce_loss(image_embs: Tensor, text_embs: Tensor, temperature: float) -> Tensor:
    """Symmetric cross-entropy over the in-batch similarity matrix."""
    if image_embs.shape != text_embs.shape:
        raise ContractError(f"embedding batches differ: {image_embs.shape} vs {text_embs.shape}")
    batch = image_embs.shape[0]
    logits = T.scale(T.matmul(image_embs, T.transpose(text_embs)), 1.0 / temperature)
    eye = np.eye(batch)
    image_to_text = T.sum(T.mul_const(T.log_softmax_rows(logits), eye))
    text_to_image = T.sum(T.mul_const(T.log_softmax_rows(T.transpose(logits)), eye))
    return T.scale(T.add(image_to_text, text_to_image), -1.0 / (2.0 * batch))


def distinct_class_batches(labels: Sequence[int], batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle, then interleave classes so consecutive items come from distinct classes."""
    labels = np.asarray(labels)
    pools = [rng.permutation(np.flatnonzero(labels == c)).tolist() for c in np.unique(labels)]
    order = []
    for r in range(max(len(p) for p in pools)):
        for c in rng.permutation(len(pools)):
            if r < len(pools[c]):
                order.append(pools[c][r])
    order = np.asarray(order, dtype=np.int64)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def augment(images: np.ndarray, rng: np.random.Generator, pixel_jitter: float, position_jitter: int) -> np.ndarray:
    """Random translation (edge padded) plus Gaussian pixel noise, clipped to [0, 1]."""
    out = np.array(images, dtype=np.float32, copy=True)
    if position_jitter > 0:
        j = position_jitter
        size = out.shape[1]
        padded = np.pad(out, ((0, 0), (j, j), (j, j), (0, 0)), mode="edge")
        shifts = rng.integers(0, 2 * j + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(shifts):
            out[i] = padded[i, dy:dy + size, dx:dx + size]
    if pixel_jitter > 0:
        out += rng.normal(0.0, pixel_jitter, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


class SGD:
    """Momentum-free gradient descent with a fixed step."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            weights[name] -= self.learning_rate * grad


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            weights[name] -= (self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)).astype(weights[name].dtype)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


def caption_token_rows(captions: Sequence[str], vocab: Vocabulary, max_length: int) -> np.ndarray:
    return np.asarray([tokenize(c, vocab, max_length) for c in captions], dtype=np.int64)


def _check_vocab(model: ModelParams, vocab: Vocabulary) -> None:
    if len(vocab) > model.config.vocab_size:
        raise ConfigurationError(f"vocabulary of {len(vocab)} tokens exceeds model vocab_size {model.config.vocab_size}")


def evaluate_contrastive_loss(model: ModelParams, items: Sequence[CorpusItem], vocab: Vocabulary,
                              temperature: float, batch_size: int = 16, seed: int = 0) -> float:
    """Mean InfoNCE over distinct-class batches of clean images, no updates."""
    _check_vocab(model, vocab)
    rng = np.random.default_rng(seed)
    images = np.stack([item.image for item in items])
    ids = caption_token_rows([item.caption for item in items], vocab, model.config.max_text_length)
    bank = model.bank()
    losses = []
    for batch in distinct_class_batches([item.class_id for item in items], batch_size, rng):
        img = vision_forward(Tensor(images[batch]), bank, model.config)
        txt = text_forward(ids[batch], bank, model.config)
        losses.append(info_nce_loss(img, txt, temperature).item())
    return float(np.mean(losses))


@track_stage("contrastive_train")
def contrastive_train(model: ModelParams, corpus: Sequence[CorpusItem], cfg: TrainConfig,
                      vocab: Optional[Vocabulary] = None, progress: bool = True) -> Tuple[ModelParams, List[float]]:
    """Train both towers with symmetric InfoNCE; returns the frozen model and per-epoch mean loss."""
    vocab = vocab or Vocabulary.default()
    _check_vocab(model, vocab)
    items = [item for item in corpus if item.split == "train"]
    if not items:
        raise ContractError("contrastive training needs a non-empty training split")

    mcfg = model.config
    rng = np.random.default_rng(cfg.seed)
    images = np.stack([item.image for item in items])
    labels = [item.class_id for item in items]
    ids = caption_token_rows([item.caption for item in items], vocab, mcfg.max_text_length)
    weights = {name: np.array(array, dtype=np.float32, copy=True) for name, array in model.weights.items()}
    optimizer = make_optimizer(cfg)
    history: List[float] = []

    logger.info(f"Training on {len(items)} pairs, {cfg.epochs} epochs, batch {cfg.batch_size}, "
                f"{cfg.optimizer} lr={cfg.learning_rate}")
    epochs = tqdm(range(cfg.epochs), desc="contrastive training", disable=not progress)
    for epoch in epochs:
        losses = []
        for batch in distinct_class_batches(labels, cfg.batch_size, rng):
            batch_images = augment(images[batch], rng, cfg.pixel_jitter, cfg.position_jitter)
            bank = {name: Tensor(w, requires_grad=True) for name, w in weights.items()}
            img = vision_forward(Tensor(batch_images), bank, mcfg)
            txt = text_forward(ids[batch], bank, mcfg)
            loss = info_nce_loss(img, txt, cfg.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            T.backward(loss)
            grads = {name: t.grad for name, t in bank.items() if t.grad is not None}
            optimizer.step(weights, grads)
            if not all(np.all(np.isfinite(w)) for w in weights.values()):
                raise TrainingDivergedError(epoch, float("nan"))
            losses.append(value)
        history.append(float(np.mean(losses)))
        epochs.set_postfix(loss=f"{history[-1]:.4f}")
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean InfoNCE loss {history[-1]:.4f}")

    trained = model.with_weights(weights, train_seed=cfg.seed, epochs=cfg.epochs,
                                 final_loss=history[-1], vocabulary=list(vocab.tokens))
    return trained, history


def zero_shot_accuracy(image_embs, labels, text_embs) -> float:
    """Fraction of rows whose nearest text (by dot product) is their own label."""
    image_embs = np.asarray(image_embs, dtype=np.float64)
    if len(image_embs) == 0:
        return 0.0
    predictions = np.argmax(image_embs @ np.asarray(text_embs, dtype=np.float64).T, axis=1)
    return float(np.mean(predictions == np.asarray(labels)))


def evaluate_zero_shot(model: ModelParams, items: Sequence[CorpusItem], captions: Sequence[str],
                       vocab: Optional[Vocabulary] = None) -> float:
    """Share of items whose argmax caption is their class caption (captions[class_id])."""
    vocab = vocab or Vocabulary.default()
    if items and max(item.class_id for item in items) >= len(captions):
        raise ContractError("caption set does not cover every class id")
    text_embs = encode_texts(caption_token_rows(captions, vocab, model.config.max_text_length), model)
    image_embs = encode_images(np.stack([item.image for item in items]), model) if items else []
    accuracy = zero_shot_accuracy(image_embs, [item.class_id for item in items], text_embs)
    logger.info(f"Zero-shot accuracy {accuracy:.3f} over {len(items)} items and {len(captions)} captions")
    return accuracy
