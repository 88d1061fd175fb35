"""Distortion, image quality, success rate, cosine distributions and PCA projections."""

import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import convolve2d

from ..errors import ContractError
from .attack import AttackResult, clamp_to_domain
from .corpus import Vocabulary
from .encoders import ModelParams, cosine, encode_images, encode_texts, zero_shot_classify
from .training import caption_token_rows

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.03, 0.05, 0.08, 0.1, 0.2)


def _pair(original, modified) -> Tuple[np.ndarray, np.ndarray]:
    original = np.asarray(original, dtype=np.float64)
    modified = np.asarray(modified, dtype=np.float64)
    if original.shape != modified.shape:
        raise ContractError(f"images differ in shape: {original.shape} vs {modified.shape}")
    return original, modified


# ---------------------------------------------------------------------------
# distortion and quality
# ---------------------------------------------------------------------------

class DistortionStats(BaseModel):
    l2: float = Field(description="Euclidean norm of the flattened difference")
    linf: float = Field(description="Largest absolute scalar difference")
    mean_abs: float = Field(description="Mean absolute scalar difference")
    pixels_above: Dict[float, int] = Field(description="Threshold -> number of scalars with |diff| above it")


class QualityStats(BaseModel):
    psnr: float = Field(description="Peak signal-to-noise ratio in dB, capped")
    ssim: float = Field(description="Mean structural similarity on channel-mean grayscale")


def distortion(original, modified, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> DistortionStats:
    original, modified = _pair(original, modified)
    diff = np.abs(modified - original).reshape(-1)
    return DistortionStats(
        l2=float(np.sqrt(np.sum(diff ** 2))),
        linf=float(diff.max()) if diff.size else 0.0,
        mean_abs=float(diff.mean()) if diff.size else 0.0,
        pixels_above={float(t): int(np.count_nonzero(diff > t)) for t in sorted(thresholds)},
    )


def psnr(original, modified, peak: float = 1.0, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB; capped at ``cap`` for (near) identical images."""
    original, modified = _pair(original, modified)
    mse = float(np.mean((original - modified) ** 2))
    if mse < peak ** 2 * 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(peak ** 2 / mse))


def _grayscale(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=-1) if image.ndim == 3 else image


def ssim(original, modified, window: int = 8, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over every window x window position (stride 1, uniform weights).

    Color images are compared on their channel mean.

    Args:
        original (np.ndarray): Reference image
        modified (np.ndarray): Image of the same shape
        window (int): Side of the square window
        k1 (float): Luminance stabilizer
        k2 (float): Contrast stabilizer
        data_range (float): Pixel value range

    Returns:
        float: SSIM in [-1, 1]; 1 for identical images
    """
    original, modified = _pair(original, modified)
    x, y = _grayscale(original), _grayscale(modified)
    if min(x.shape) < window:
        raise ContractError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    kernel = np.full((window, window), 1.0 / window ** 2)

    def local_mean(a):
        return convolve2d(a, kernel, mode="valid")

    mu_x, mu_y = local_mean(x), local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov_xy = local_mean(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def quality(original, modified, window: int = 8, k1: float = 0.01, k2: float = 0.03,
            cap: float = 100.0) -> QualityStats:
    return QualityStats(psnr=psnr(original, modified, cap=cap), ssim=ssim(original, modified, window, k1, k2))


def amplify_diff(original, modified, factor: float = 25.0) -> np.ndarray:
    """Difference image centered on mid-gray: 0.5 + factor*(modified - original), clipped."""
    original, modified = _pair(original, modified)
    return clamp_to_domain(0.5 + factor * (modified - original)).astype(np.float32)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def caption_embeddings(model: ModelParams, captions: Sequence[str], vocab: Optional[Vocabulary] = None) -> np.ndarray:
    vocab = vocab or Vocabulary.default()
    return encode_texts(caption_token_rows(captions, vocab, model.config.max_text_length), model)


def classification_matrix(model: ModelParams, images, captions: Sequence[str],
                          vocab: Optional[Vocabulary] = None, temperature: Optional[float] = None) -> np.ndarray:
    """One zero-shot softmax row per image over the caption set."""
    temperature = temperature or model.config.temperature
    text_embs = caption_embeddings(model, captions, vocab)
    image_embs = encode_images(np.asarray(images), model)
    return np.stack([zero_shot_classify(e, text_embs, temperature) for e in image_embs]) if len(image_embs) \
        else np.zeros((0, len(captions)))


def success_rate(results: Sequence[AttackResult], model: ModelParams, captions: Sequence[str],
                 vocab: Optional[Vocabulary] = None) -> Tuple[float, List[bool]]:
    """An attack succeeds when its returned image classifies as its target text.

    Args:
        results (Sequence[AttackResult]): Attack outputs
        model (ModelParams): Encoder used as the classifier
        captions (Sequence[str]): Caption set; must contain every target text
        vocab (Vocabulary): Tokenizer vocabulary

    Returns:
        tuple: (success fraction, per-result success flags)
    """
    index = {caption: i for i, caption in enumerate(captions)}
    missing = [r.target_text for r in results if r.target_text not in index]
    if missing:
        raise ContractError(f"caption set lacks targets {sorted(set(missing))[:3]}")
    if not results:
        return 0.0, []
    probabilities = classification_matrix(model, np.stack([r.image for r in results]), captions, vocab)
    flags = [bool(np.argmax(row) == index[r.target_text]) for row, r in zip(probabilities, results)]
    return float(np.mean(flags)), flags


# ---------------------------------------------------------------------------
# cosine distributions
# ---------------------------------------------------------------------------

class CosineReport(BaseModel):
    text_pairs: List[float] = Field(description="Cosine of every unordered pair of distinct caption slots")
    aligned: List[float] = Field(description="Attacked image vs its target text")
    original: List[float] = Field(description="Unmodified image vs the same target text")
    bin_edges: List[float]
    histograms: Dict[str, List[int]] = Field(description="Sample label -> counts per bin")
    overlap: bool = Field(description="min(aligned) <= max(text_pairs)")


def cosine_histogram(values: Sequence[float], bin_width: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    bins = int(round(2.0 / bin_width))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0), bins=edges)
    return counts, edges


def cosine_report(model: ModelParams, texts: Sequence[str], results: Sequence[AttackResult],
                  vocab: Optional[Vocabulary] = None, bin_width: float = 0.01) -> CosineReport:
    if len(texts) < 2:
        raise ContractError("cosine report needs at least two texts")
    text_embs = caption_embeddings(model, texts, vocab)
    text_pairs = [float(np.clip(cosine(text_embs[i], text_embs[j]), -1.0, 1.0))
                  for i in range(len(texts)) for j in range(i + 1, len(texts))]

    aligned, original = [], []
    if results:
        targets = caption_embeddings(model, [r.target_text for r in results], vocab)
        aligned_embs = encode_images(np.stack([r.image for r in results]), model)
        original_embs = encode_images(np.stack([r.original for r in results]), model)
        aligned = [float(np.clip(cosine(a, t), -1.0, 1.0)) for a, t in zip(aligned_embs, targets)]
        original = [float(np.clip(cosine(o, t), -1.0, 1.0)) for o, t in zip(original_embs, targets)]

    samples = {"text_pairs": text_pairs, "aligned": aligned, "original": original}
    histograms = {}
    edges = None
    for label, values in samples.items():
        counts, edges = cosine_histogram(values, bin_width)
        histograms[label] = counts.tolist()
    overlap = bool(aligned) and min(aligned) <= max(text_pairs)
    logger.info(f"Cosine report: max text-pair {max(text_pairs):.4f}, "
                f"min aligned {min(aligned) if aligned else float('nan'):.4f}, overlap={overlap}")
    return CosineReport(text_pairs=text_pairs, aligned=aligned, original=original,
                        bin_edges=edges.tolist(), histograms=histograms, overlap=overlap)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

class ProjectionBasis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray = Field(description="Mean of the fitting sample, length e")
    components: np.ndarray = Field(description="K x e orthonormal rows, by descending eigenvalue")
    eigenvalues: np.ndarray = Field(description="Top-K covariance eigenvalues, descending")
    total_variance: float = Field(description="Trace of the sample covariance")

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(embeddings, k: int = 6) -> ProjectionBasis:
    """Top-K eigenvectors of the (ddof=1) sample covariance.

    Each component is signed so its largest-magnitude entry is positive.
    """
    data = np.asarray(embeddings, dtype=np.float64)
    if data.ndim != 2:
        raise ContractError(f"expected an (n, e) sample, got {data.shape}")
    n, e = data.shape
    if k > e:
        raise ContractError(f"cannot take {k} components of {e}-dimensional data")
    if n < k + 1:
        raise ContractError(f"need at least {k + 1} samples for {k} components, got {n}")
    mean = data.mean(axis=0)
    covariance = np.cov(data - mean, rowvar=False, ddof=1).reshape(e, e)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1][:k]
    components = eigenvectors[:, order].T
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    components = components * np.where(signs == 0, 1.0, signs)[:, None]
    return ProjectionBasis(mean=mean, components=components, eigenvalues=eigenvalues[order],
                           total_variance=float(np.trace(covariance)))


def project(emb, basis: ProjectionBasis) -> np.ndarray:
    """components . (emb - mean); accepts one vector or a stack of rows."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[-1] != basis.mean.shape[0]:
        raise ContractError(f"embedding width {emb.shape[-1]} does not match basis width {basis.mean.shape[0]}")
    return (emb - basis.mean) @ basis.components.T


def closer_to_target(basis: ProjectionBasis, aligned_emb, target_emb, source_emb) -> bool:
    """Projected aligned image is strictly nearer the target text than its own caption."""
    p = project(aligned_emb, basis)
    return bool(np.linalg.norm(p - project(target_emb, basis)) < np.linalg.norm(p - project(source_emb, basis)))


# ---------------------------------------------------------------------------
# report rows and summaries
# ---------------------------------------------------------------------------

class EvalRow(BaseModel):
    pair_id: int
    image_id: int
    source_caption: str
    target_text: str
    target_tokens: int
    converged: bool
    success: bool
    steps: int
    final_cosine: float
    l2: float
    linf: float
    mean_abs: float
    psnr: float
    ssim: float
    quantization_survived: bool
    pixels_above: Dict[float, int]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


def summarize_rows(rows: Sequence[EvalRow], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict:
    """Aggregates in the layout of a success-rate / distortion / quality table."""
    l2_mean, l2_std = _mean_std([r.l2 for r in rows])
    return {
        "count": len(rows),
        "success_rate": float(np.mean([r.success for r in rows])) if rows else 0.0,
        "converged_rate": float(np.mean([r.converged for r in rows])) if rows else 0.0,
        "l2_mean": l2_mean,
        "l2_std": l2_std,
        "linf_mean": _mean_std([r.linf for r in rows])[0],
        "mean_abs_mean": _mean_std([r.mean_abs for r in rows])[0],
        "psnr_mean": _mean_std([r.psnr for r in rows])[0],
        "ssim_mean": _mean_std([r.ssim for r in rows])[0],
        "steps_mean": _mean_std([r.steps for r in rows])[0],
        "quantization_survival": float(np.mean([r.quantization_survived for r in rows])) if rows else 0.0,
        "pixels_above_mean": {str(t): _mean_std([r.pixels_above[float(t)] for r in rows])[0] for t in thresholds},
    }


def summarize_by_token_count(rows: Sequence[EvalRow], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict:
    groups = defaultdict(list)
    for row in rows:
        groups[row.target_tokens].append(row)
    return {f"{n}-token": summarize_rows(groups[n], thresholds) for n in sorted(groups)}