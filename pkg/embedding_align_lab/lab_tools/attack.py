"""Embedding alignment: gradient descent on image pixels until the image
embedding matches the embedding of a chosen target text."""

import csv
import logging
from dataclasses import dataclass
from multiprocessing import Pool
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ..config import AttackConfig
from ..errors import ConfigurationError, ContractError, NumericError
from ..logging_utils import track_stage
from . import tensor as T
from .corpus import Vocabulary, tokenize
from .encoders import ModelParams, encode_text, vision_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-3


class TraceRecord(BaseModel):
    step: int = Field(description="Number of updates applied when the record was taken (0 = original image)")
    loss: float = Field(description="Alignment loss 0.5*||f_I(x) - t||^2")
    cosine: float = Field(description="Cosine similarity of f_I(x) to the target embedding")
    mean_abs_diff: float = Field(description="Mean |x - x0| over all scalars")


class AttackTrace(BaseModel):
    initial: TraceRecord = Field(description="Measurement of the unmodified image")
    records: List[TraceRecord] = Field(default_factory=list, description="One record per executed step")

    def final(self) -> TraceRecord:
        return self.records[-1] if self.records else self.initial

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss", "cosine", "mean_abs_diff"])
            for record in [self.initial, *self.records]:
                writer.writerow([record.step, f"{record.loss:.8f}", f"{record.cosine:.8f}",
                                 f"{record.mean_abs_diff:.8f}"])


class AttackResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(description="Returned image x0 + dx, float32 in [0, 1]")
    original: np.ndarray = Field(description="Unmodified image x0")
    target_text: str = Field(description="Target caption the image was aligned to")
    converged: bool = Field(description="Final cosine reached tau")
    steps: int = Field(description="Updates applied")
    final_loss: float
    final_cosine: float
    trace: AttackTrace

    @property
    def perturbation(self) -> np.ndarray:
        return self.image.astype(np.float64) - self.original.astype(np.float64)


@dataclass
class AttackState:
    """x0, the running perturbation dx and the fixed target embedding."""
    x0: np.ndarray
    delta: np.ndarray
    target_tokens: List[int]
    target_emb: np.ndarray
    step: int = 0
    loss: Optional[Tensor] = None  # loss at x0 + delta, still on the tape
    pixels: Optional[Tensor] = None
    cosine: float = float("nan")

    @property
    def image(self) -> np.ndarray:
        return self.x0 + self.delta

    def record(self) -> TraceRecord:
        return TraceRecord(step=self.step, loss=self.loss.item(), cosine=self.cosine,
                           mean_abs_diff=float(np.mean(np.abs(self.delta), dtype=np.float64)))


def clamp_to_domain(image) -> np.ndarray:
    return np.clip(image, 0.0, 1.0)


def _check_image(image: np.ndarray, model: ModelParams) -> np.ndarray:
    image = np.asarray(image)
    cfg = model.config
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if image.shape != expected:
        raise ConfigurationError(f"expected image of shape {expected}, got {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return image


def _check_target(target_emb, model: ModelParams) -> np.ndarray:
    target_emb = np.asarray(target_emb, dtype=np.float64)
    if target_emb.shape != (model.config.embed_dim,):
        raise ContractError(f"target embedding must have shape ({model.config.embed_dim},), got {target_emb.shape}")
    if abs(np.linalg.norm(target_emb) - 1.0) > UNIT_NORM_TOLERANCE:
        raise ContractError("target embedding must be unit norm")
    return target_emb


def _forward(image: np.ndarray, target_emb: np.ndarray, model: ModelParams) -> Tuple[Tensor, Tensor, float]:
    """Loss on the tape for one image; returns (loss, pixel leaf, cosine)."""
    pixels = Tensor(image[None], requires_grad=True)
    embedding = vision_forward(pixels, model.bank(), model.config)
    target = Tensor(target_emb[None])
    diff = T.sub(embedding, target)
    loss = T.scale(T.sum(T.mul(diff, diff)), 0.5)
    cosine = float(embedding.data[0].astype(np.float64) @ target_emb)
    return loss, pixels, cosine


def align_loss(image, target_emb, model: ModelParams) -> float:
    """0.5*||f_I(x) - t||^2, which equals 1 - cos(f_I(x), t) for unit vectors."""
    image = _check_image(image, model)
    loss, _, _ = _forward(image, _check_target(target_emb, model), model)
    return loss.item()


def alignment_gradient(image, target_emb, model: ModelParams) -> Tuple[float, np.ndarray]:
    """Loss and its gradient with respect to every pixel (one backward pass).

    Args:
        image (np.ndarray): S x S x C pixels in [0, 1]
        target_emb (np.ndarray): Unit-norm target embedding
        model (ModelParams): Trained encoder

    Returns:
        tuple: (loss, gradient shaped like the image)
    """
    image = _check_image(image, model)
    loss, pixels, _ = _forward(image, _check_target(target_emb, model), model)
    T.backward(loss)
    return loss.item(), pixels.grad[0]


def init_state(image, target_tokens: Sequence[int], model: ModelParams) -> AttackState:
    x0 = _check_image(image, model).astype(np.float32)
    target_emb = encode_text(target_tokens, model).astype(np.float64)
    state = AttackState(x0=x0, delta=np.zeros_like(x0), target_tokens=list(target_tokens), target_emb=target_emb)
    state.loss, state.pixels, state.cosine = _forward(state.image, target_emb, model)
    return state


def align_step(state: AttackState, cfg: AttackConfig, model: ModelParams) -> TraceRecord:
    """One update dx <- dx - lr*dL/dx, then clamping; the state is updated in place."""
    if state.loss is None:
        state.loss, state.pixels, state.cosine = _forward(state.image, state.target_emb, model)
    # backward accumulates; a caller may already have run it on this loss
    state.pixels.zero_grad()
    T.backward(state.loss)
    grad = state.pixels.grad[0]
    if not np.all(np.isfinite(grad)):
        raise NumericError(state.step)

    direction = np.sign(grad) if cfg.update == "sign" else grad
    delta = state.delta - cfg.learning_rate * direction
    if cfg.epsilon_inf is not None:
        delta = np.clip(delta, -cfg.epsilon_inf, cfg.epsilon_inf)
    if cfg.clamp_mode == "per-step":
        delta = clamp_to_domain(state.x0 + delta) - state.x0
    state.delta = delta.astype(np.float32)
    state.step += 1

    state.loss, state.pixels, state.cosine = _forward(state.image, state.target_emb, model)
    if not np.isfinite(state.loss.item()):
        raise NumericError(state.step, "non-finite loss")
    record = state.record()
    logger.debug(f"step {record.step}: loss={record.loss:.6f} cos={record.cosine:.6f} "
                 f"mean|dx|={record.mean_abs_diff:.6f}")
    return record


def run_alignment(image, target_text: str, model: ModelParams, cfg: AttackConfig,
                  vocab: Optional[Vocabulary] = None, progress: bool = False) -> AttackResult:
    """Align one image to one text; stops at cosine >= tau or after max_steps.

    Non-convergence is reported through ``converged`` rather than raised.

    Args:
        image (np.ndarray): Unmodified image x0 in [0, 1]
        target_text (str): Caption whose embedding the image should reach
        model (ModelParams): Trained encoder
        cfg (AttackConfig): Step size, threshold, clamping and update rule
        vocab (Vocabulary): Tokenizer vocabulary (default vocabulary when omitted)
        progress (bool): Show a per-step progress bar

    Returns:
        AttackResult: Returned image, convergence flag and full trace
    """
    vocab = vocab or Vocabulary.default()
    tokens = tokenize(target_text, vocab, model.config.max_text_length, pad=False)
    if not tokens:
        raise ContractError(f"target text {target_text!r} has no tokens")
    state = init_state(image, tokens, model)
    trace = AttackTrace(initial=state.record())

    with tqdm(total=cfg.max_steps, desc=f"align {target_text!r}", leave=False, disable=not progress) as bar:
        while state.cosine < cfg.tau and state.step < cfg.max_steps:
            trace.records.append(align_step(state, cfg, model))
            bar.update(1)
            bar.set_postfix(cos=f"{state.cosine:.4f}")

    if cfg.clamp_mode == "final":
        clamped = clamp_to_domain(state.image) - state.x0
        if not np.array_equal(clamped, state.delta):
            state.delta = clamped.astype(np.float32)
            state.loss, state.pixels, state.cosine = _forward(state.image, state.target_emb, model)
            # the last record must describe the returned image
            if trace.records:
                trace.records[-1] = state.record()
            else:
                trace.initial = state.record()

    final = trace.final()
    result = AttackResult(
        image=clamp_to_domain(state.image).astype(np.float32),
        original=state.x0,
        target_text=target_text,
        converged=bool(final.cosine >= cfg.tau),
        steps=state.step,
        final_loss=final.loss,
        final_cosine=final.cosine,
        trace=trace,
    )
    logger.info(f"Alignment to {target_text!r}: converged={result.converged} after {result.steps} steps "
                f"(cos {trace.initial.cosine:.4f} -> {result.final_cosine:.4f})")
    return result


class AttackPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pair_id: int
    image_id: int
    source_caption: str = Field(description="Caption of the unmodified image")
    target_text: str
    image: np.ndarray


def _align_pair(args) -> AttackResult:
    pair, model, cfg, vocab = args
    return run_alignment(pair.image, pair.target_text, model, cfg, vocab)


@track_stage("run_attack_batch")
def run_attack_batch(model: ModelParams, pairs: Sequence[AttackPair], cfg: AttackConfig,
                     vocab: Optional[Vocabulary] = None, jobs: int = 1, progress: bool = True) -> List[AttackResult]:
    """Run every pair independently; results keep the order of ``pairs``.

    Args:
        model (ModelParams): Trained encoder, shipped to each worker
        pairs (Sequence[AttackPair]): Images and their target texts
        cfg (AttackConfig): Attack settings shared by every pair
        vocab (Vocabulary): Tokenizer vocabulary
        jobs (int): Worker processes; 1 runs in-process
        progress (bool): Show a progress bar over pairs

    Returns:
        list: One AttackResult per pair
    """
    vocab = vocab or Vocabulary.default()
    work = [(pair, model, cfg, vocab) for pair in pairs]
    if jobs > 1 and len(work) > 1:
        with Pool(min(jobs, len(work))) as pool:
            results = list(tqdm(pool.imap(_align_pair, work), total=len(work), desc="alignment", disable=not progress))
    else:
        results = [_align_pair(args) for args in tqdm(work, desc="alignment", disable=not progress)]
    converged = sum(r.converged for r in results)
    logger.info(f"Attack batch: {converged}/{len(results)} pairs converged")
    return results
