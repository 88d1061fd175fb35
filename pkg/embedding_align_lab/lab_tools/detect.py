"""Gaussian-noise probe: an image whose zero-shot label flips under small
noise is judged modified."""

import logging
from multiprocessing import Pool
from typing import List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from ..config import DetectConfig
from ..errors import ContractError
from ..logging_utils import track_stage
from .attack import clamp_to_domain
from .encoders import ModelParams, classify_images

logger = logging.getLogger(__name__)


class DetectionVerdict(BaseModel):
    verdict: Literal["modified", "unmodified"]
    agreement: int = Field(description="Trials whose label equals the clean label")
    base_label: int = Field(description="Label of the image without noise")
    trial_labels: List[int]
    sigma: float

    @property
    def modified(self) -> bool:
        return self.verdict == "modified"


class SweepRow(BaseModel):
    sigma: float
    true_positive_rate: float = Field(description="Attacked images judged modified")
    false_positive_rate: float = Field(description="Clean images judged modified")
    true_positives: int
    false_positives: int
    positives: int
    negatives: int


def probe_noise(shape, trials: int, seed: int, index: int) -> np.ndarray:
    """Standard normal draws for image ``index``; scaled by sigma at use so a sweep reuses them."""
    rng = np.random.default_rng(seed ^ index)
    return rng.standard_normal((trials, *shape))


def _verdict(base_label: int, trial_labels: Sequence[int], sigma: float) -> DetectionVerdict:
    agreement = int(sum(label == base_label for label in trial_labels))
    return DetectionVerdict(
        verdict="unmodified" if agreement > len(trial_labels) / 2 else "modified",
        agreement=agreement,
        base_label=int(base_label),
        trial_labels=[int(label) for label in trial_labels],
        sigma=float(sigma),
    )


def _probe_sigmas(image: np.ndarray, model: ModelParams, text_embs: np.ndarray, sigmas: Sequence[float],
                  trials: int, seed: int, index: int) -> List[DetectionVerdict]:
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    z = probe_noise(image.shape, trials, seed, index)
    base_label = int(classify_images(image[None].astype(np.float32), model, text_embs)[0])
    verdicts = []
    for sigma in sigmas:
        noisy = clamp_to_domain(image[None] + sigma * z).astype(np.float32)
        verdicts.append(_verdict(base_label, classify_images(noisy, model, text_embs), sigma))
    return verdicts


def noise_probe(image, model: ModelParams, cfg: DetectConfig, text_embs, index: int = 0) -> DetectionVerdict:
    """Classify clean and noisy copies; majority agreement with the clean label means unmodified.

    Args:
        image (np.ndarray): Image in [0, 1]
        model (ModelParams): Encoder used as the classifier
        cfg (DetectConfig): Noise level, trial count and base seed
        text_embs (np.ndarray): Caption embeddings, one per row
        index (int): Image index mixed into the seed

    Returns:
        DetectionVerdict: Verdict, agreement count and per-trial labels
    """
    return _probe_sigmas(image, model, np.asarray(text_embs), [cfg.sigma], cfg.trials, cfg.seed, index)[0]


def _probe_worker(args) -> List[DetectionVerdict]:
    index, image, model, text_embs, sigmas, trials, seed = args
    return _probe_sigmas(image, model, text_embs, sigmas, trials, seed, index)


def probe_batch(images: Sequence[np.ndarray], model: ModelParams, cfg: DetectConfig, text_embs,
                sigmas: Optional[Sequence[float]] = None, jobs: int = 1,
                progress: bool = False) -> List[List[DetectionVerdict]]:
    """Verdicts per image (outer) and per sigma (inner); image i is seeded with seed ^ i."""
    sigmas = list(sigmas) if sigmas is not None else [cfg.sigma]
    text_embs = np.asarray(text_embs)
    work = [(i, image, model, text_embs, sigmas, cfg.trials, cfg.seed) for i, image in enumerate(images)]
    if jobs > 1 and len(work) > 1:
        with Pool(min(jobs, len(work))) as pool:
            return list(tqdm(pool.imap(_probe_worker, work), total=len(work), desc="noise probe",
                             disable=not progress))
    return [_probe_worker(args) for args in tqdm(work, desc="noise probe", disable=not progress)]


def sweep_rates(verdicts: Sequence[Sequence[DetectionVerdict]], attacked: Sequence[bool],
                sigmas: Sequence[float]) -> List[SweepRow]:
    attacked = np.asarray(attacked, dtype=bool)
    positives, negatives = int(attacked.sum()), int((~attacked).sum())
    if positives == 0 or negatives == 0:
        raise ContractError("detection sweep needs both clean and attacked images")
    rows = []
    for j, sigma in enumerate(sigmas):
        flagged = np.asarray([per_image[j].modified for per_image in verdicts])
        tp = int(np.sum(flagged & attacked))
        fp = int(np.sum(flagged & ~attacked))
        rows.append(SweepRow(sigma=float(sigma), true_positive_rate=tp / positives,
                             false_positive_rate=fp / negatives, true_positives=tp, false_positives=fp,
                             positives=positives, negatives=negatives))
        logger.info(f"sigma={sigma:g}: TPR={tp / positives:.3f} FPR={fp / negatives:.3f}")
    return rows


@track_stage("detection_sweep")
def detection_sweep(images: Sequence[np.ndarray], attacked: Sequence[bool], model: ModelParams,
                    sigmas: Sequence[float], cfg: DetectConfig, text_embs, jobs: int = 1) -> List[SweepRow]:
    """True/false positive rates per sigma against known provenance.

    Args:
        images (Sequence[np.ndarray]): Images to probe
        attacked (Sequence[bool]): Ground truth, True for aligned images
        model (ModelParams): Encoder used as the classifier
        sigmas (Sequence[float]): Noise levels to evaluate
        cfg (DetectConfig): Trial count and base seed
        text_embs (np.ndarray): Caption embeddings
        jobs (int): Worker processes

    Returns:
        list: One SweepRow per sigma, in the given order
    """
    if len(images) != len(attacked):
        raise ContractError(f"{len(images)} images but {len(attacked)} provenance flags")
    if not any(attacked) or all(attacked):
        raise ContractError("detection sweep needs both clean and attacked images")
    verdicts = probe_batch(images, model, cfg, text_embs, sigmas, jobs)
    return sweep_rates(verdicts, attacked, sigmas)
