from collections import Counter

import numpy as np
import pytest
import runez

from prealign import ConfigError
from prealign.corpus import (
    build_corpus,
    COLORS,
    Corpus,
    CorpusFormatError,
    CorpusSettings,
    gen_caption,
    gen_image,
    gen_instruction_sample,
    gen_text_sample,
    load_corpus,
    MAGIC,
    save_corpus,
    SHAPES,
    SPLITS,
    VOCAB,
    VQA_KINDS,
)

from .conftest import TINY_SIZES, tiny_settings


def test_vocab():
    assert len(VOCAB) == 64
    assert VOCAB.decode(VOCAB.encode("what color is the square ?")) == "what color is the square ?"
    assert VOCAB.successor(VOCAB.ids["red"]) == VOCAB.ids["green"]
    assert VOCAB.successor(VOCAB.ids["9"]) == VOCAB.ids["a"]
    assert VOCAB.successor(VOCAB.ids["after"]) == VOCAB.ids["red"]  # Cycle wraps around, skipping special tokens
    assert VOCAB.used_size == 44


def test_images():
    image = gen_image(7, 3, 2, 3, density=0.5, noise=0.0)
    assert image == gen_image(7, 3, 2, 3, density=0.5, noise=0.0)
    assert image.objects()
    assert image.patches.shape == (9, 5)

    # Noiseless patches are exactly the one-hot encoding of shape and color
    for row, col, shape, color in image.objects():
        expected = np.zeros(5)
        expected[shape] = 1
        expected[2 + color] = 1
        assert np.array_equal(image.patches[row * 3 + col], expected)

    # At least one object, even with a tiny density
    assert gen_image(1, 2, 2, 3, density=0.01).objects()

    with pytest.raises(ConfigError):
        gen_image(1, 2, 7, 3)


def test_samples():
    image = gen_image(3, 2, 2, 3, density=1.0, noise=0.0)
    prompt, answer = gen_caption(image)
    assert VOCAB.decode(prompt) == "describe the image"
    assert answer[-1] == VOCAB.eos
    assert VOCAB.decode(answer).startswith("a ")
    assert VOCAB.decode(answer).count(" at row ") == 4  # Density 1: all 4 cells occupied

    count = gen_instruction_sample(5, image, kind="vqa_count")
    text = VOCAB.decode(count.prompt)
    shape = SHAPES.index(text.split()[2])
    expected = sum(1 for _, _, s, _ in image.objects() if s == shape)
    assert VOCAB.decode(count.answer) == f"{expected} <eos>"

    color = gen_instruction_sample(5, image, kind="vqa_color")
    assert VOCAB.decode(color.prompt).startswith("what color is the ")
    assert color.tokens == [VOCAB.bos] + color.prompt + color.answer

    add = gen_text_sample(11, "text_add")
    words = VOCAB.decode(add.prompt).split()
    assert words[0] == "add"
    assert VOCAB.decode(add.answer) == f"{(int(words[1]) + int(words[2])) % 10} <eos>"
    assert not add.is_multimodal

    succ = gen_text_sample(11, "text_succ")
    assert succ.answer == [VOCAB.successor(succ.prompt[-1]), VOCAB.eos]

    with pytest.raises(ConfigError):
        gen_text_sample(1, "caption")


def test_settings():
    with pytest.raises(ConfigError):
        CorpusSettings(shapes=0)

    with pytest.raises(ConfigError):
        CorpusSettings(seed=1 << 24)

    with pytest.raises(ConfigError):
        CorpusSettings(density=0)

    settings = tiny_settings()
    assert settings.patch_dim == 5
    assert str(settings) == "corpus G=2 S=2 C=3 seed=0"
    seeds = {settings.sample_seed(split, i) for split in SPLITS for i in range(8)}
    assert len(seeds) == len(SPLITS) * 8

    with pytest.raises(ConfigError):
        build_corpus(CorpusSettings(grid=2, shapes=2, colors=3, sizes=dict(stage0=1)))


def test_corpus(temp_folder):
    corpus = build_corpus(tiny_settings())
    assert list(corpus.splits) == SPLITS
    assert all(s.kind == "caption" for s in corpus.splits["stage1"])
    assert all(s.kind == "vqa_count" for s in corpus.splits["eval_counting"])
    assert all(s.kind in ("vqa_color", "vqa_shape") for s in corpus.splits["eval_general_vqa"])
    assert all(not s.is_multimodal for s in corpus.splits["stage0"] + corpus.splits["eval_text"])
    assert corpus.meta["split_sizes"]["stage0"] == 8

    # Generation is deterministic, and saved files are byte-identical
    data = save_corpus(corpus, "a.dpacorp")
    assert save_corpus(build_corpus(tiny_settings()), "b.dpacorp") == data
    assert data.startswith(MAGIC)
    loaded = load_corpus("a.dpacorp")
    assert loaded == corpus
    assert loaded.hash == corpus.hash
    assert build_corpus(tiny_settings(seed=1)).hash != corpus.hash


def test_corrupted(temp_folder):
    data = build_corpus(tiny_settings()).to_bytes()
    with pytest.raises(CorpusFormatError) as exc:
        Corpus.from_bytes(b"DPACORP9" + data[8:])
    assert exc.value.offset == 0

    with pytest.raises(CorpusFormatError) as exc:
        Corpus.from_bytes(data[:-3])
    assert "Truncated" in str(exc.value)

    with pytest.raises(CorpusFormatError) as exc:
        Corpus.from_bytes(data + b"\0")
    assert exc.value.offset == len(data)

    runez.write("bogus.dpacorp", "not a corpus", logger=False)
    with pytest.raises(CorpusFormatError):
        load_corpus("bogus.dpacorp")


def test_crowded_count(temp_folder):
    # Every shape appears more often than a digit can tell: a shape question is asked instead
    image = gen_image(3, 4, 1, 2, density=1.0, noise=0.0)
    assert len(image.objects()) == 16
    sample = gen_instruction_sample(3, image, kind="vqa_count")
    assert sample.kind == "vqa_shape"
    assert VOCAB.decode(sample.answer) == "square <eos>"
    assert gen_instruction_sample(3, image, kind="vqa_count") == sample

    corpus = build_corpus(CorpusSettings(grid=4, shapes=1, colors=2, density=1.0, sizes=dict(TINY_SIZES)))
    assert {s.kind for s in corpus.splits["eval_counting"]} == {"vqa_shape"}
    save_corpus(corpus, "crowded.dpacorp")
    assert load_corpus("crowded.dpacorp") == corpus


CHI2_CRITICAL = {5: 15.086, 7: 18.475, 99: 134.642}  # alpha = 0.01, by degrees of freedom


def chi_square(counts):
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.sum() / len(counts)
    return float(((counts - expected) ** 2 / expected).sum())


def occupancy(images):
    return sum(len(image.objects()) for image in images) / (len(images) * images[0].grid ** 2)


def test_image_statistics():
    images = [gen_image(seed, 4, 6, 8, density=0.5) for seed in range(2000)]
    assert occupancy(images) == pytest.approx(0.5, abs=0.01)
    objects = [o for image in images for o in image.objects()]
    assert chi_square(np.bincount([o[2] for o in objects], minlength=6)) < CHI2_CRITICAL[5]
    assert chi_square(np.bincount([o[3] for o in objects], minlength=8)) < CHI2_CRITICAL[7]

    # Redrawing empty images barely moves the occupancy of sparse ones
    sparse = [gen_image(seed, 4, 6, 8, density=0.25) for seed in range(5000)]
    assert occupancy(sparse) == pytest.approx(0.25, abs=0.01)


def test_text_statistics():
    counts = np.zeros(100)
    for seed in range(3000):
        words = VOCAB.decode(gen_text_sample(seed, "text_add").prompt).split()
        counts[10 * int(words[1]) + int(words[2])] += 1

    assert chi_square(counts) < CHI2_CRITICAL[99]


def recomputed_answer(sample):
    """str: Answer to 'sample' worked out from the objects of its image, target object must be unique"""
    words = VOCAB.decode(sample.prompt).split()
    objects = sample.image.objects()
    if sample.kind == "vqa_count":
        shape = SHAPES.index(words[2])
        return str(sum(1 for o in objects if o[2] == shape))

    row, col = int(words[-4]), int(words[-2])
    matches = [o for o in objects if (o[0], o[1]) == (row, col)]
    assert len(matches) == 1
    _, _, shape, color = matches[0]
    if sample.kind == "vqa_color":
        assert words[4] == SHAPES[shape]
        return COLORS[color]

    return SHAPES[shape]


def test_questions():
    samples = [gen_instruction_sample(seed, gen_image(seed, 4, 6, 8, density=0.5)) for seed in range(1500)]
    families = Counter(s.kind for s in samples)
    assert sorted(families) == sorted(VQA_KINDS)
    assert max(families.values()) < 0.4 * len(samples)

    answers = Counter(VOCAB.decode(s.answer) for s in samples)
    assert max(answers.values()) < 0.6 * len(samples)
    for sample in samples:
        assert VOCAB.decode(sample.answer) == f"{recomputed_answer(sample)} <eos>", sample
