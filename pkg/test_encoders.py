import numpy as np
import pytest

from embedding_align_lab.errors import (
    ConfigurationError,
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    VocabularyError,
)
from embedding_align_lab.lab_tools import tensor as T
from embedding_align_lab.lab_tools.encoders import (
    PAD_ID,
    BlockParams,
    attention_block,
    classify_images,
    encode_image,
    encode_images,
    encode_text,
    encode_texts,
    init_params,
    normalize_embedding,
    patchify,
    predict_label,
    unpatchify,
    vision_forward,
    zero_shot_classify,
)
from embedding_align_lab.lab_tools.tensor import Tensor, finite_diff_gradient, precision, relative_error


def test_single_patch_is_flattened_image():
    image = np.arange(48, dtype=np.float32).reshape(4, 4, 3) / 47
    patches = patchify(image, 4).data
    assert patches.shape == (1, 48)
    np.testing.assert_array_equal(patches[0], image.reshape(-1))


def test_patch_zero_is_top_left_block():
    image = np.arange(48, dtype=np.float32).reshape(4, 4, 3)
    patches = patchify(image, 2).data
    assert patches.shape == (4, 12)
    np.testing.assert_array_equal(patches[0], image[:2, :2, :].reshape(-1))
    np.testing.assert_array_equal(patches[1], image[:2, 2:, :].reshape(-1))


def test_unpatchify_restores_image(rng):
    image = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(unpatchify(patchify(image, 4).data, 8, 4), image)


def test_indivisible_patch_size_is_configuration_error():
    with pytest.raises(ConfigurationError):
        patchify(np.zeros((6, 6, 3)), 4)


def _block(params):
    return BlockParams.from_bank(params.bank(), "vision.block0", params.config.heads)


def test_attention_weights_are_row_stochastic(tiny_params, rng):
    weights = []
    attention_block(Tensor(rng.normal(size=(5, 8))), _block(tiny_params), attention_out=weights)
    assert len(weights) == tiny_params.config.heads
    for alpha in weights:
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_block_is_permutation_equivariant(tiny_params, rng):
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    block = _block(tiny_params)
    out = attention_block(Tensor(x), block).data
    permuted = attention_block(Tensor(x[perm]), block).data
    np.testing.assert_allclose(permuted, out[perm], atol=1e-5)


def test_single_token_attends_to_itself(tiny_params, rng):
    weights = []
    attention_block(Tensor(rng.normal(size=(1, 8))), _block(tiny_params), attention_out=weights)
    for alpha in weights:
        assert alpha.shape == (1, 1) and alpha[0, 0] == 1.0


def test_image_embedding_is_unit_and_deterministic(tiny_params, random_image):
    a = encode_image(random_image, tiny_params)
    b = encode_image(random_image, tiny_params)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-5
    assert a.tobytes() == b.tobytes()


def test_batched_and_single_image_encodings_agree(tiny_params, rng):
    images = rng.uniform(size=(3, 8, 8, 3)).astype(np.float32)
    batch = encode_images(images, tiny_params)
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_image(images[i], tiny_params), atol=1e-6)


def test_encode_image_checks_shape_and_range(tiny_params):
    with pytest.raises(ConfigurationError):
        encode_image(np.zeros((16, 16, 3)), tiny_params)
    with pytest.raises(ContractError):
        encode_image(np.full((8, 8, 3), 1.5), tiny_params)


def test_text_embedding_is_unit(tiny_params):
    emb = encode_text([2, 5, 9], tiny_params)
    assert abs(np.linalg.norm(emb) - 1.0) < 1e-5


def test_padding_does_not_change_text_embedding(tiny_params):
    short = encode_text([4, 7, 11], tiny_params)
    padded = encode_text([4, 7, 11, PAD_ID, PAD_ID, PAD_ID], tiny_params)
    np.testing.assert_allclose(short, padded, atol=1e-5)


def test_ragged_text_batch_matches_single_encodings(tiny_params):
    rows = [[3, 4], [5, 6, 7, 8]]
    batch = encode_texts(rows, tiny_params)
    for row, emb in zip(rows, batch):
        np.testing.assert_allclose(emb, encode_text(row, tiny_params), atol=1e-5)


def test_unknown_token_id_is_vocabulary_error(tiny_params):
    with pytest.raises(VocabularyError):
        encode_text([2, 40], tiny_params)


def test_all_pad_sequence_is_rejected(tiny_params):
    with pytest.raises(ContractError):
        encode_text([PAD_ID, PAD_ID], tiny_params)


def test_zero_shot_single_candidate():
    np.testing.assert_allclose(zero_shot_classify(np.array([1.0, 0.0]), np.array([[0.0, 1.0]])), [1.0])


def test_zero_shot_equal_candidates_are_uniform():
    v = normalize_embedding([1.0, 2.0, 2.0])
    probs = zero_shot_classify(v, np.stack([v, v, v, v]))
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)
    assert predict_label(probs) == 0


def test_zero_shot_empty_candidates():
    with pytest.raises(ContractError):
        zero_shot_classify(np.array([1.0, 0.0]), np.zeros((0, 2)))


def test_embedding_width_mismatch_is_a_dimension_error(tiny_params, random_image):
    with pytest.raises(DimensionError):
        zero_shot_classify(np.ones(3) / np.sqrt(3), np.eye(4))
    with pytest.raises(DimensionError):
        classify_images(random_image[None], tiny_params, np.eye(tiny_params.config.embed_dim + 1))


def test_zero_shot_argmax_ignores_logit_shift(rng):
    img = normalize_embedding(rng.normal(size=6))
    texts = np.stack([normalize_embedding(rng.normal(size=6)) for _ in range(5)])
    probs = zero_shot_classify(img, texts)
    assert abs(probs.sum() - 1.0) < 1e-6
    assert predict_label(probs) == int(np.argmax(texts @ img))


def test_normalize_embedding():
    np.testing.assert_allclose(normalize_embedding([3.0, 4.0]), [0.6, 0.8])
    np.testing.assert_allclose(normalize_embedding([0.6, 0.8]), [0.6, 0.8])
    np.testing.assert_allclose(normalize_embedding([30.0, 40.0]), normalize_embedding([3.0, 4.0]))
    with pytest.raises(DegenerateEmbeddingError):
        normalize_embedding([0.0, 0.0])


def test_params_are_read_only(tiny_params):
    with pytest.raises(ValueError):
        tiny_params.weights["vision.proj"][0, 0] = 1.0


def test_init_is_seeded(tiny_config):
    a = init_params(tiny_config, seed=5)
    b = init_params(tiny_config, seed=5)
    c = init_params(tiny_config, seed=6)
    assert all(np.array_equal(a.weights[n], b.weights[n]) for n in a.names())
    assert not np.array_equal(a.weights["vision.proj"], c.weights["vision.proj"])


def test_vision_tower_gradient_matches_finite_differences(tiny_params, rng):
    with precision(np.float64):
        bank = tiny_params.bank()
        weights = rng.normal(size=(1, tiny_params.config.embed_dim))

        def f(x):
            return T.sum(T.mul_const(vision_forward(x, bank, tiny_params.config), weights))

        x = Tensor(rng.uniform(0.2, 0.8, size=(1, 8, 8, 3)), requires_grad=True)
        T.backward(f(x))
        indices = rng.choice(x.data.size, size=10, replace=False)
        numeric = finite_diff_gradient(f, x, indices=indices)
    assert relative_error(x.grad.reshape(-1)[indices], numeric) < 1e-3
