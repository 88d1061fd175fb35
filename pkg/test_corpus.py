import numpy as np
import pytest

from embedding_align_lab.config import CorpusConfig
from embedding_align_lab.errors import ConfigurationError
from embedding_align_lab.lab_tools.corpus import (
    PAD_TOKEN,
    SHAPES,
    UNK_TOKEN,
    Vocabulary,
    class_captions,
    generate_corpus,
    shape_mask,
    split_items,
    tokenize,
)
from embedding_align_lab.lab_tools.encoders import PAD_ID, UNK_ID


def test_default_corpus_size():
    items = generate_corpus(CorpusConfig(per_class=50))
    assert len(items) == 800
    assert len({item.class_id for item in items}) == 16
    assert len(split_items(items, "held-out")) == 160


def test_corpus_is_deterministic(tiny_corpus_config):
    a = generate_corpus(tiny_corpus_config, image_size=16)
    b = generate_corpus(tiny_corpus_config, image_size=16)
    assert [i.image.tobytes() for i in a] == [i.image.tobytes() for i in b]
    assert [i.split for i in a] == [i.split for i in b]


def test_different_seed_changes_images(tiny_corpus_config):
    a = generate_corpus(tiny_corpus_config, image_size=16)
    b = generate_corpus(tiny_corpus_config.model_copy(update={"seed": 4}), image_size=16)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))


def test_pixels_in_unit_range_and_captions_match_class(tiny_corpus_config):
    captions = class_captions(tiny_corpus_config)
    for item in generate_corpus(tiny_corpus_config, image_size=16):
        assert item.image.shape == (16, 16, 3)
        assert item.image.min() >= 0.0 and item.image.max() <= 1.0
        assert item.caption == captions[item.class_id]


def test_caption_order_follows_shape_then_color():
    cfg = CorpusConfig(shapes=["square", "cross"], colors=["green", "red"])
    assert class_captions(cfg) == ["a green square", "a red square", "a green cross", "a red cross"]


@pytest.mark.parametrize("update", [{"shapes": []}, {"colors": []}, {"shapes": ["hexagon"]}, {"colors": ["teal"]}])
def test_invalid_corpus_config(update):
    with pytest.raises(ConfigurationError):
        generate_corpus(CorpusConfig(**update))


@pytest.mark.parametrize("shape", SHAPES)
def test_shape_masks_cover_center_not_corners(shape):
    mask = shape_mask(shape, 32, 16.0, 16.0, 9.0)
    assert mask.shape == (32, 32)
    assert 0.0 <= mask.min() and mask.max() <= 1.0
    assert mask[16, 16] > 0.5
    assert mask[0, 0] == 0.0 and mask[31, 31] == 0.0


def test_shapes_render_differently():
    masks = [shape_mask(shape, 32, 16.0, 16.0, 9.0) for shape in SHAPES]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert np.abs(masks[i] - masks[j]).sum() > 5.0


def test_vocabulary_layout(vocab):
    assert vocab.tokens[:2] == (PAD_TOKEN, UNK_TOKEN)
    assert len(vocab) == 40
    assert vocab.id_of(PAD_TOKEN) == PAD_ID and vocab.id_of("zebra") == UNK_ID
    assert vocab.word_of(vocab.id_of("circle")) == "circle"


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ConfigurationError):
        Vocabulary((PAD_TOKEN, UNK_TOKEN, "a", "a"))


def test_tokenize_caption(vocab):
    ids = tokenize("a red circle", vocab)
    assert ids == [vocab.id_of("a"), vocab.id_of("red"), vocab.id_of("circle")] + [PAD_ID] * 5


def test_tokenize_edge_cases(vocab):
    assert tokenize("", vocab) == [PAD_ID] * 8
    assert tokenize("A RED zebra", vocab, pad=False) == [vocab.id_of("a"), vocab.id_of("red"), UNK_ID]
    assert len(tokenize(" ".join(["red"] * 12), vocab)) == 8


def test_tokenize_is_injective_over_captions(vocab):
    captions = class_captions(CorpusConfig(colors=["red", "green", "blue", "yellow", "purple", "orange"]))
    assert len({tuple(tokenize(c, vocab)) for c in captions}) == len(captions)
