"""Two-tower joint encoder: a patch transformer for images, a token transformer
for text, both projected into one unit-normalized embedding space."""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..config import ModelConfig
from ..errors import ConfigurationError, ContractError, DegenerateEmbeddingError, DimensionError, VocabularyError
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
MASKED_LOGIT = -1e9


def _block_shapes(prefix: str, width: int, cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    for h in range(cfg.heads):
        head = f"{prefix}.attn.head{h}"
        shapes += [(f"{head}.w_q", (width, cfg.head_width)),
                   (f"{head}.w_k", (width, cfg.head_width)),
                   (f"{head}.w_v", (width, cfg.head_width)),
                   (f"{head}.w_c", (cfg.head_width, width))]
    shapes += [(f"{prefix}.ln1.gamma", (width,)), (f"{prefix}.ln1.beta", (width,)),
               (f"{prefix}.mlp.w1", (width, cfg.mlp_width)), (f"{prefix}.mlp.b1", (cfg.mlp_width,)),
               (f"{prefix}.mlp.w2", (cfg.mlp_width, width)), (f"{prefix}.mlp.b2", (width,)),
               (f"{prefix}.ln2.gamma", (width,)), (f"{prefix}.ln2.beta", (width,))]
    return shapes


def parameter_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every named weight of the model, in initialization order."""
    d, dt = cfg.vision_width, cfg.text_width
    shapes = [("vision.patch_embed.w", (cfg.patch_dim, d)),
              ("vision.patch_embed.b", (d,)),
              ("vision.pos", (cfg.num_patches, d))]
    for i in range(cfg.vision_depth):
        shapes += _block_shapes(f"vision.block{i}", d, cfg)
    shapes += [("vision.proj", (d, cfg.embed_dim)),
               ("text.token_embed", (cfg.vocab_size, dt)),
               ("text.pos", (cfg.max_text_length, dt))]
    for i in range(cfg.text_depth):
        shapes += _block_shapes(f"text.block{i}", dt, cfg)
    shapes += [("text.proj", (dt, cfg.embed_dim))]
    return shapes


def _init_std(name: str, shape: Tuple[int, ...], cfg: ModelConfig) -> Optional[float]:
    """None means a constant init (zeros, or ones for LN gains)."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gamma", "beta", "b", "b1", "b2"):
        return None
    if leaf == "pos":
        return 0.02
    if leaf == "token_embed":
        return 1.0
    if leaf == "w_c":
        return 1.0 / math.sqrt(cfg.head_width * cfg.heads)
    if leaf == "w1":
        return math.sqrt(2.0 / shape[0])
    return 1.0 / math.sqrt(shape[0])


@dataclass(frozen=True)
class ModelParams:
    """All weights of the two-tower encoder; read-only once built."""
    config: ModelConfig
    weights: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(parameter_shapes(self.config))
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ConfigurationError(f"parameter table mismatch (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            array = self.weights[name]
            if array.shape != shape:
                raise DimensionError(name, shape, array.shape)
            if not np.all(np.isfinite(array)):
                raise ConfigurationError(f"parameter {name} holds non-finite values")
            array.setflags(write=False)

    def names(self) -> List[str]:
        return [name for name, _ in parameter_shapes(self.config)]

    def bank(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        """Fresh leaf tensors over the weights (one set per forward graph)."""
        return {name: Tensor(array, requires_grad=requires_grad) for name, array in self.weights.items()}

    def with_weights(self, weights: Mapping[str, np.ndarray], **metadata) -> "ModelParams":
        merged = dict(self.metadata)
        merged.update(metadata)
        return ModelParams(self.config, {k: np.array(v, dtype=np.float32) for k, v in weights.items()}, merged)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.weights.values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(cfg):
        std = _init_std(name, shape, cfg)
        if std is None:
            fill = 1.0 if name.endswith("gamma") else 0.0
            weights[name] = np.full(shape, fill, dtype=np.float32)
        else:
            weights[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    params = ModelParams(cfg, weights, {"init_seed": seed})
    logger.info(f"Initialized two-tower model with {params.num_parameters()} parameters (seed={seed})")
    return params


@dataclass
class AttentionParams:
    """Per-head projections of one attention layer."""
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: List[Tensor]
    w_c: List[Tensor]

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def head_width(self) -> int:
        return self.w_q[0].shape[1]


@dataclass
class BlockParams:
    attention: AttentionParams
    ln1: Tuple[Tensor, Tensor]
    ln2: Tuple[Tensor, Tensor]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    eps: float = 1e-5

    @classmethod
    def from_bank(cls, bank: Mapping[str, Tensor], prefix: str, heads: int, eps: float = 1e-5) -> "BlockParams":
        attn = AttentionParams(
            w_q=[bank[f"{prefix}.attn.head{h}.w_q"] for h in range(heads)],
            w_k=[bank[f"{prefix}.attn.head{h}.w_k"] for h in range(heads)],
            w_v=[bank[f"{prefix}.attn.head{h}.w_v"] for h in range(heads)],
            w_c=[bank[f"{prefix}.attn.head{h}.w_c"] for h in range(heads)],
        )
        return cls(attention=attn,
                   ln1=(bank[f"{prefix}.ln1.gamma"], bank[f"{prefix}.ln1.beta"]),
                   ln2=(bank[f"{prefix}.ln2.gamma"], bank[f"{prefix}.ln2.beta"]),
                   w1=bank[f"{prefix}.mlp.w1"], b1=bank[f"{prefix}.mlp.b1"],
                   w2=bank[f"{prefix}.mlp.w2"], b2=bank[f"{prefix}.mlp.b2"], eps=eps)


def attention_block(x: Tensor, block: BlockParams, mask_bias: Optional[np.ndarray] = None,
                    attention_out: Optional[list] = None) -> Tensor:
    """Multi-head attention, residual + LN, ReLU feed-forward, residual + LN.

    ``mask_bias`` is added to the attention logits (0 for visible keys, a large
    negative value for padding). Attention weight matrices are appended to
    ``attention_out`` when a list is supplied.
    """
    attn = block.attention
    if x.shape[-1] != attn.w_q[0].shape[0]:
        raise DimensionError("attention_block", x.shape, attn.w_q[0].shape)
    inv_sqrt_k = 1.0 / math.sqrt(attn.head_width)
    mixed = None
    for h in range(attn.heads):
        q = T.matmul(x, attn.w_q[h])
        k = T.matmul(x, attn.w_k[h])
        v = T.matmul(x, attn.w_v[h])
        logits = T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_k)
        if mask_bias is not None:
            logits = T.add_const(logits, mask_bias)
        alpha = T.softmax_rows(logits)
        if attention_out is not None:
            attention_out.append(alpha.data)
        head = T.matmul(T.matmul(alpha, v), attn.w_c[h])
        mixed = head if mixed is None else T.add(mixed, head)
    h1 = T.layer_norm(T.add(x, mixed), *block.ln1, eps=block.eps)
    hidden = T.relu(T.add(T.matmul(h1, block.w1), block.b1))
    ff = T.add(T.matmul(hidden, block.w2), block.b2)
    return T.layer_norm(T.add(h1, ff), *block.ln2, eps=block.eps)


# ---------------------------------------------------------------------------
# vision tower
# ---------------------------------------------------------------------------

def patchify(image, patch: int) -> Tensor:
    """Split S×S×C images into raster-ordered, row-major flattened p×p×C patches.

    Accepts one image (S, S, C) or a batch (B, S, S, C); differentiable when
    ``image`` is a tensor on the tape.
    """
    image = T.as_tensor(image)
    if image.data.ndim not in (3, 4):
        raise ContractError(f"patchify expects (S,S,C) or (B,S,S,C), got {image.shape}")
    size, channels = image.shape[-2], image.shape[-1]
    if image.shape[-3] != size:
        raise ConfigurationError(f"image must be square, got {image.shape}")
    if patch < 1 or size % patch:
        raise ConfigurationError(f"image size {size} not divisible by patch size {patch}")
    grid = size // patch
    if image.data.ndim == 3:
        blocks = T.reshape(image, (grid, patch, grid, patch, channels))
        blocks = T.permute(blocks, (0, 2, 1, 3, 4))
        return T.reshape(blocks, (grid * grid, patch * patch * channels))
    batch = image.shape[0]
    blocks = T.reshape(image, (batch, grid, patch, grid, patch, channels))
    blocks = T.permute(blocks, (0, 1, 3, 2, 4, 5))
    return T.reshape(blocks, (batch, grid * grid, patch * patch * channels))


def unpatchify(patches: np.ndarray, size: int, patch: int, channels: int = 3) -> np.ndarray:
    grid = size // patch
    blocks = np.asarray(patches).reshape(grid, grid, patch, patch, channels)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(size, size, channels)


def vision_forward(images: Tensor, bank: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, S, S, C) images -> (B, e) unit embeddings, on the tape."""
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.data.ndim != 4 or images.shape[1:] != expected:
        raise ConfigurationError(f"expected images of shape (B, {expected}), got {images.shape}")
    patches = patchify(images, cfg.patch_size)
    patches = T.add_const(T.scale(patches, 1.0 / cfg.pixel_std), -cfg.pixel_mean / cfg.pixel_std)
    x = T.add(T.matmul(patches, bank["vision.patch_embed.w"]), bank["vision.patch_embed.b"])
    x = T.add(x, bank["vision.pos"])
    for i in range(cfg.vision_depth):
        x = attention_block(x, BlockParams.from_bank(bank, f"vision.block{i}", cfg.heads, cfg.ln_eps))
    pooled = T.mean(x, axis=1)
    return T.l2_normalize(T.matmul(pooled, bank["vision.proj"]))


def encode_images(images, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Embed a stack of images (N, S, S, C) without recording gradients."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    bank = params.bank()
    chunks = [vision_forward(Tensor(images[i:i + batch_size]), bank, params.config).data
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, params.config.embed_dim), np.float32)


def encode_image(image, params: ModelParams) -> np.ndarray:
    """f_I(x): unit embedding of one image.

    Args:
        image (np.ndarray): S x S x C pixels with values in [0, 1]
        params (ModelParams): Encoder weights and configuration

    Returns:
        np.ndarray: Unit-norm embedding of length embed_dim
    """
    image = np.asarray(image)
    expected = (params.config.image_size, params.config.image_size, params.config.channels)
    if image.shape != expected:
        raise ConfigurationError(f"expected image of shape {expected}, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return encode_images(image[None], params)[0]


# ---------------------------------------------------------------------------
# text tower
# ---------------------------------------------------------------------------

def _check_tokens(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ContractError(f"token ids must be (B, L), got {ids.shape}")
    if ids.shape[1] > cfg.max_text_length:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max {cfg.max_text_length}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise VocabularyError(f"token ids must be integers, got {ids.dtype}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if not np.all((ids != PAD_ID).any(axis=1)):
        raise ContractError("every sequence needs at least one non-pad token")
    return ids.astype(np.int64)


def text_forward(ids, bank: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, L) token ids -> (B, e) unit embeddings; pad positions are masked
    out of attention and pooling."""
    ids = _check_tokens(ids, cfg)
    length = ids.shape[1]
    mask = (ids != PAD_ID)
    x = T.take_rows(bank["text.token_embed"], ids)
    x = T.add(x, T.take_rows(bank["text.pos"], np.arange(length)))
    mask_bias = np.where(mask, 0.0, MASKED_LOGIT)[:, None, :]
    for i in range(cfg.text_depth):
        x = attention_block(x, BlockParams.from_bank(bank, f"text.block{i}", cfg.heads, cfg.ln_eps), mask_bias)
    weights = (mask / mask.sum(axis=1, keepdims=True))[:, :, None]
    pooled = T.sum(T.mul_const(x, weights), axis=1)
    return T.l2_normalize(T.matmul(pooled, bank["text.proj"]))


def encode_texts(token_rows, params: ModelParams) -> np.ndarray:
    """Embed several token sequences; rows are padded to a common length."""
    rows = [list(r) for r in token_rows]
    if not rows:
        return np.zeros((0, params.config.embed_dim), np.float32)
    length = max(len(r) for r in rows)
    ids = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
    return text_forward(ids, params.bank(), params.config).data


def encode_text(tokens: Sequence[int], params: ModelParams) -> np.ndarray:
    """f_T(t): unit embedding of one token-id sequence.

    Args:
        tokens (Sequence[int]): Token ids, padded or not
        params (ModelParams): Encoder weights and configuration

    Returns:
        np.ndarray: Unit-norm embedding of length embed_dim
    """
    return text_forward(np.asarray([list(tokens)], dtype=np.int64), params.bank(), params.config).data[0]


# ---------------------------------------------------------------------------
# shared space
# ---------------------------------------------------------------------------

def normalize_embedding(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    return v / norm


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def zero_shot_logits(img_emb, text_embs, temperature: float) -> np.ndarray:
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if text_embs.ndim != 2 or text_embs.shape[0] == 0:
        raise ContractError("zero-shot classification needs at least one candidate text")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    img_emb = np.asarray(img_emb, dtype=np.float64)
    if img_emb.shape != text_embs.shape[1:]:
        raise DimensionError("zero_shot_logits", img_emb.shape, text_embs.shape)
    return text_embs @ img_emb / temperature


def zero_shot_classify(img_emb, text_embs, temperature: float = 0.07) -> np.ndarray:
    """Softmax over temperature-scaled dot products with each candidate text.

    Args:
        img_emb (np.ndarray): Image embedding of length e
        text_embs (np.ndarray): One candidate text embedding per row, shape (n, e)
        temperature (float): Softmax temperature, positive

    Returns:
        np.ndarray: Probabilities over the n candidates

    Raises:
        DimensionError: the image and text embedding widths differ
    """
    logits = zero_shot_logits(img_emb, text_embs, temperature)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def predict_label(probabilities) -> int:
    """Argmax with the lowest index winning ties."""
    return int(np.argmax(probabilities))


def classify_images(images, params: ModelParams, text_embs) -> np.ndarray:
    """Predicted caption index for each image in a stack."""
    embeddings = encode_images(images, params)
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if text_embs.ndim != 2 or text_embs.shape[1] != embeddings.shape[1]:
        raise DimensionError("classify_images", embeddings.shape, text_embs.shape)
    logits = embeddings.astype(np.float64) @ text_embs.T
    return np.argmax(logits, axis=1)
