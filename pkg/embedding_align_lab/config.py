import os
import logging
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_OUT_ROOT = os.getenv("ALIGN_LAB_OUT_ROOT", "runs")


class ModelConfig(BaseModel):
    """Shape of the two-tower encoder"""
    image_size: int = Field(32, description="Side S of the square S×S×3 input image")
    patch_size: int = Field(4, description="Side p of the non-overlapping image patches")
    channels: int = Field(3, description="Image channels")
    vision_width: int = Field(64, description="Token width d of the vision tower")
    text_width: int = Field(64, description="Token width d_t of the text tower")
    embed_dim: int = Field(32, description="Shared embedding dimension e")
    heads: int = Field(4, description="Attention heads H per block")
    head_width: int = Field(16, description="Per-head width k")
    vision_depth: int = Field(3, description="Number of vision blocks L_v")
    text_depth: int = Field(2, description="Number of text blocks L_t")
    mlp_width: int = Field(128, description="Hidden width m of the feed-forward layer")
    vocab_size: int = Field(40, description="Vocabulary size V including reserved ids")
    max_text_length: int = Field(8, description="Maximum caption length in tokens")
    temperature: float = Field(0.07, description="Zero-shot softmax temperature")
    pixel_mean: float = Field(0.5, description="Pixel standardization mean applied inside the vision tower")
    pixel_std: float = Field(0.25, description="Pixel standardization std applied inside the vision tower")
    ln_eps: float = Field(1e-5, description="Layer normalization epsilon")

    @model_validator(mode="after")
    def _check_layout(self):
        positive = ("image_size", "patch_size", "channels", "vision_width", "text_width", "embed_dim",
                    "heads", "head_width", "vision_depth", "text_depth", "mlp_width", "vocab_size",
                    "max_text_length")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.temperature <= 0 or self.pixel_std <= 0 or self.ln_eps <= 0:
            raise ValueError("temperature, pixel_std and ln_eps must be positive")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


class CorpusConfig(BaseModel):
    """Synthetic shapes corpus"""
    shapes: List[str] = Field(default_factory=lambda: ["circle", "square", "triangle", "cross"],
                              description="Shape names, each from {circle, square, triangle, cross}")
    colors: List[str] = Field(default_factory=lambda: ["red", "green", "blue", "yellow"],
                              description="Color names from the fixed palette")
    per_class: int = Field(50, description="Items rendered per (shape, color) class")
    held_out_fraction: float = Field(0.2, description="Fraction of each class reserved for evaluation")
    seed: int = Field(0, description="Seed for rendering jitter and split assignment")

    @field_validator("per_class")
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError("per_class must be positive")
        return value

    @field_validator("held_out_fraction")
    @classmethod
    def _fraction(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("held_out_fraction must lie in [0, 1)")
        return value


class TrainConfig(BaseModel):
    """Contrastive training run"""
    epochs: int = Field(40, description="Passes over the training split")
    batch_size: int = Field(16, description="Image-text pairs per batch")
    learning_rate: float = Field(2e-3, description="Optimizer step size")
    temperature: float = Field(0.07, description="InfoNCE temperature")
    seed: int = Field(0, description="Seed for initialization, batching and augmentation")
    optimizer: Literal["adam", "sgd"] = Field("adam", description="adam, or sgd for momentum-free fixed-step descent")
    pixel_jitter: float = Field(0.03, description="Std of Gaussian pixel noise added to training images (0 disables)")
    position_jitter: int = Field(2, description="Max random translation in pixels (0 disables)")

    @model_validator(mode="after")
    def _check(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        if self.pixel_jitter < 0 or self.position_jitter < 0:
            raise ValueError("augmentation amplitudes must be non-negative")
        return self


class AttackConfig(BaseModel):
    """Embedding alignment attack"""
    learning_rate: float = Field(0.02, description="Pixel step size; the working range is roughly 0.001-0.09")
    max_steps: int = Field(5000, description="Upper bound on gradient steps")
    tau: float = Field(0.995, description="Convergence threshold on cosine similarity to the target")
    clamp_mode: Literal["per-step", "final"] = Field("per-step", description="When to project onto [0,1]")
    epsilon_inf: Optional[float] = Field(None, description="Optional l-infinity cap on the perturbation")
    update: Literal["gradient", "sign"] = Field("gradient", description="Raw gradient step or signed-gradient step")
    seed: int = Field(0, description="Seed for pair sampling")

    @model_validator(mode="after")
    def _check(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.epsilon_inf is not None and self.epsilon_inf <= 0:
            raise ValueError("epsilon_inf must be positive when set")
        return self


class DetectConfig(BaseModel):
    """Gaussian-noise modification detector"""
    sigma: float = Field(0.03, description="Noise standard deviation in pixel units")
    trials: int = Field(11, description="Noisy reclassifications per image (odd avoids ties)")
    seed: int = Field(0, description="Base seed; image i uses seed xor i")
    sigmas: List[float] = Field(default_factory=lambda: [0.01, 0.02, 0.03, 0.05, 0.08],
                                description="Sweep grid for detection_sweep")
    captions: Optional[List[str]] = Field(None, description="Caption set the probe classifies over; "
                                         "defaults to the corpus class captions plus every attack target")

    @model_validator(mode="after")
    def _check(self):
        if self.sigma <= 0 or any(s <= 0 for s in self.sigmas):
            raise ValueError("sigma values must be positive")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.captions is not None and len(set(self.captions)) < 2:
            raise ValueError("captions must hold at least two distinct texts")
        return self


class EvalConfig(BaseModel):
    """Metric parameters"""
    thresholds: List[float] = Field(default_factory=lambda: [0.03, 0.05, 0.08, 0.1, 0.2],
                                    description="Per-scalar |diff| thresholds for pixel counts")
    psnr_cap: float = Field(100.0, description="PSNR reported for (near) identical images, dB")
    ssim_window: int = Field(8, description="Side of the square SSIM window")
    ssim_k1: float = Field(0.01, description="SSIM luminance stabilizer")
    ssim_k2: float = Field(0.03, description="SSIM contrast stabilizer")
    histogram_bin_width: float = Field(0.01, description="Cosine histogram bin width over [-1, 1]")
    pca_components: int = Field(6, description="Principal components K")
    diff_factor: float = Field(25.0, description="Amplification of difference images")


class RunConfig(BaseModel):
    """Fully resolved configuration of one pipeline run"""
    seed: int = Field(0, description="Master seed, propagated to every stage")
    jobs: int = Field(1, description="Worker processes for attack and detect batches")
    out_dir: str = Field(DEFAULT_OUT_ROOT, description="Root directory for all stage outputs")
    num_pairs: int = Field(50, description="Random (image, mismatched caption) pairs when no manifest is given")
    model: ModelConfig = Field(default_factory=ModelConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    detect: DetectConfig = Field(default_factory=DetectConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("jobs")
    @classmethod
    def _jobs(cls, value):
        if value < 1:
            raise ValueError("jobs must be at least 1")
        return value

    @model_validator(mode="after")
    def _propagate_seed(self):
        # a stage seed given explicitly wins over the master seed
        for name in ("corpus", "train", "attack", "detect"):
            stage = getattr(self, name)
            if "seed" not in stage.model_fields_set:
                setattr(self, name, stage.model_copy(update={"seed": self.seed}))
        return self

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        logger.info(f"Loaded run configuration from {path}")
        return cls.model_validate(raw)

    def with_overrides(self, seed=None, out_dir=None, jobs=None) -> "RunConfig":
        """Apply command-line flags on top of file values."""
        update = {}
        if out_dir is not None:
            update["out_dir"] = str(out_dir)
        if jobs is not None:
            update["jobs"] = jobs
        if seed is not None:
            update["seed"] = seed
            update["corpus"] = self.corpus.model_copy(update={"seed": seed})
            update["train"] = self.train.model_copy(update={"seed": seed})
            update["attack"] = self.attack.model_copy(update={"seed": seed})
            update["detect"] = self.detect.model_copy(update={"seed": seed})
        resolved = self.model_copy(update=update)
        # model_copy skips validation
        return type(self).model_validate(resolved.model_dump())

    def stage_dir(self, stage: str) -> Path:
        return Path(self.out_dir) / stage

    def echo(self, directory) -> Path:
        """Write the resolved configuration next to a stage's outputs."""
        path = Path(directory) / "config.yaml"
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(self.model_dump(mode="json"), handle, sort_keys=True)
        return path
