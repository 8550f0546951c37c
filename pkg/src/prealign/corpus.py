"""
Closed synthetic world: grid images of colored shapes, captions, visual questions and small text tasks.

Every sample is a pure function of (kind, seed) and the corpus settings, so files only store cells and tokens,
patches are re-rendered on load.
"""

import logging
import os
import struct

import numpy as np
import runez

from prealign import ConfigError, fnv1a_64, hex_hash, PrealignError
from prealign.tensor import Rng


LOG = logging.getLogger(__name__)
MAGIC = b"DPACORP1"
FORMAT_VERSION = 1
GENERATOR_VERSION = 1

SPECIALS = ["<pad>", "<bos>", "<eos>"]
COLORS = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"]
SHAPES = ["square", "circle", "triangle", "star", "cross", "diamond"]
DIGITS = [str(i) for i in range(10)]
WORDS = ["a", "at", "row", "col", "describe", "the", "image", "what", "color", "shape", "is", "how", "many", "?", "add", "next", "after"]
RESERVED = [f"<unused{i}>" for i in range(20)]

KINDS = ["caption", "vqa_color", "vqa_shape", "vqa_count", "text_add", "text_succ"]
VQA_KINDS = ("vqa_color", "vqa_shape", "vqa_count")
TEXT_KINDS = ("text_add", "text_succ")
SPLITS = ["stage0", "stage1", "stage2", "eval_general_vqa", "eval_counting", "eval_text"]
EVAL_GROUPS = {"eval_general_vqa": "general_vqa", "eval_counting": "counting", "eval_text": "text"}


class CorpusFormatError(PrealignError):
    """Raised when a corpus file can't be decoded"""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Vocab:
    """Closed vocabulary, ids are positions in 'tokens'"""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ConfigError("Vocabulary tokens must be unique")

        self.pad = self.ids["<pad>"]
        self.bos = self.ids["<bos>"]
        self.eos = self.ids["<eos>"]
        self.cycle = [self.ids[t] for t in self.tokens if not t.startswith("<")]  # successor cycle, in vocab order

    def __repr__(self):
        return f"vocab ({len(self)} tokens, {hex_hash(self.hash)})"

    def __len__(self):
        return len(self.tokens)

    @runez.cached_property
    def hash(self):
        return fnv1a_64("\n".join(self.tokens))

    @property
    def used_size(self):
        """int: Number of ids generated samples can contain (reserved tokens excluded)"""
        return 1 + max(self.ids[t] for t in self.tokens if not t.startswith("<unused"))

    def encode(self, text):
        return [self.ids[t] for t in text.split()]

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    def successor(self, token_id):
        i = self.cycle.index(token_id)
        return self.cycle[(i + 1) % len(self.cycle)]


VOCAB = Vocab(SPECIALS + COLORS + SHAPES + DIGITS + WORDS + RESERVED)


class CorpusSettings:
    """What to generate, see 'corpus' section of run config"""

    def __init__(self, seed=0, grid=4, shapes=6, colors=8, density=0.25, noise=0.05, text_fraction=0.2, sizes=None):
        if not 0 < shapes <= len(SHAPES) or not 0 < colors <= len(COLORS):
            raise ConfigError(f"corpus: shapes must be in 1..{len(SHAPES)} and colors in 1..{len(COLORS)}")

        if not 0 <= seed < 1 << 24:
            raise ConfigError("corpus.seed: must be < 2^24")

        if not 0 < density <= 1 or not 0 <= text_fraction <= 1:
            raise ConfigError("corpus: density must be in (0, 1], text_fraction in [0, 1]")

        self.seed = seed
        self.grid = grid
        self.shapes = shapes
        self.colors = colors
        self.density = density
        self.noise = noise
        self.text_fraction = text_fraction
        self.sizes = sizes or {}

    def __repr__(self):
        return f"corpus G={self.grid} S={self.shapes} C={self.colors} seed={self.seed}"

    @classmethod
    def from_dict(cls, data):
        sizes = dict(
            stage0=data["stage0"],
            stage1=data["stage1"],
            stage2=data["stage2"],
            eval_general_vqa=data["eval"],
            eval_counting=data["eval"],
            eval_text=data["eval"],
        )
        return cls(
            seed=data["seed"],
            grid=data["grid"],
            shapes=data["shapes"],
            colors=data["colors"],
            density=data["density"],
            noise=data["noise"],
            text_fraction=data["text_fraction"],
            sizes=sizes,
        )

    @property
    def patch_dim(self):
        return self.shapes + self.colors

    def sample_seed(self, split, i):
        """Seed ranges never overlap across splits"""
        return (self.seed << 40) | (SPLITS.index(split) << 32) | i


class SynthImage:
    """G x G grid, one patch per cell; empty cells have shape and color -1"""

    def __init__(self, grid, shapes, colors, seed, n_shapes, n_colors, noise):
        self.grid = grid
        self.shapes = np.asarray(shapes, dtype=np.int64)
        self.colors = np.asarray(colors, dtype=np.int64)
        self.seed = seed
        self.n_shapes = n_shapes
        self.n_colors = n_colors
        self.noise = noise

    def __repr__(self):
        return f"image G={self.grid} with {runez.plural(self.objects(), 'object')}"

    def __eq__(self, other):
        return (
            isinstance(other, SynthImage)
            and self.grid == other.grid
            and self.seed == other.seed
            and self.noise == other.noise
            and (self.n_shapes, self.n_colors) == (other.n_shapes, other.n_colors)
            and np.array_equal(self.shapes, other.shapes)
            and np.array_equal(self.colors, other.colors)
        )

    def objects(self):
        """list[(int, int, int, int)]: (row, col, shape, color) of occupied cells, in raster order"""
        result = []
        for cell in np.flatnonzero(self.shapes >= 0):
            row, col = divmod(int(cell), self.grid)
            result.append((row, col, int(self.shapes[cell]), int(self.colors[cell])))

        return result

    @runez.cached_property
    def patches(self):
        """np.ndarray: [P, S + C], one-hot shape and color plus seeded gaussian noise"""
        count = self.grid * self.grid
        result = Rng(self.seed, "image", "noise").normal((count, self.n_shapes + self.n_colors), self.noise)
        occupied = np.flatnonzero(self.shapes >= 0)
        result[occupied, self.shapes[occupied]] += 1.0
        result[occupied, self.n_shapes + self.colors[occupied]] += 1.0
        return result


class Sample:
    def __init__(self, kind, seed, prompt, answer, image=None):
        """
        Args:
            kind (str): One of KINDS
            seed (int): Generation seed
            prompt (list[int]): Prompt token ids
            answer (list[int]): Answer token ids, ending with EOS
            image (SynthImage | None): Image, for multimodal kinds
        """
        self.kind = kind
        self.seed = seed
        self.prompt = list(prompt)
        self.answer = list(answer)
        self.image = image

    def __repr__(self):
        return f"{self.kind}#{self.seed}: {VOCAB.decode(self.prompt)} -> {VOCAB.decode(self.answer)}"

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and (self.kind, self.seed, self.prompt, self.answer) == (other.kind, other.seed, other.prompt, other.answer)
            and self.image == other.image
        )

    @property
    def is_multimodal(self):
        return self.image is not None

    @property
    def tokens(self):
        """list[int]: Full teacher-forced sequence: BOS, prompt, answer"""
        return [VOCAB.bos] + self.prompt + self.answer


def gen_image(seed, grid, n_shapes, n_colors, density=0.25, noise=0.05):
    """
    Args:
        seed (int): Generation seed
        grid (int): G, image has G x G cells
        n_shapes (int): Number of shapes in use (S)
        n_colors (int): Number of colors in use (C)
        density (float): Probability for a cell to be occupied
        noise (float): Std of gaussian noise added to patches

    Returns:
        (SynthImage): Image with at least one object
    """
    if not 0 < n_shapes <= len(SHAPES) or not 0 < n_colors <= len(COLORS):
        raise ConfigError(f"Can't draw from {n_shapes} shapes and {n_colors} colors")

    count = grid * grid
    rng = Rng(seed, "image", "cells")
    while True:
        occupied = rng.random(count) < density
        shapes = rng.integers(0, n_shapes, count)
        colors = rng.integers(0, n_colors, count)
        if occupied.any():
            break

    shapes = np.where(occupied, shapes, -1)
    colors = np.where(occupied, colors, -1)
    return SynthImage(grid, shapes, colors, seed, n_shapes, n_colors, noise)


def _place(row, col):
    return f"at row {row} col {col}"


CAPTION_PROMPT = "describe the image"


def gen_caption(image):
    """(list[int], list[int]): Caption request prompt, and raster-order listing of objects"""
    words = []
    for row, col, shape, color in image.objects():
        words.append(f"a {COLORS[color]} {SHAPES[shape]} {_place(row, col)}")

    return VOCAB.encode(CAPTION_PROMPT), VOCAB.encode(" ".join(words)) + [VOCAB.eos]


def gen_instruction_sample(seed, image, kind=None):
    """
    Args:
        seed (int): Generation seed
        image (SynthImage): Image to ask about
        kind (str | None): Question family (drawn uniformly from VQA_KINDS if not given)

    Returns:
        (Sample): Visual question with its answer
    """
    if kind is None:
        kind = VQA_KINDS[int(Rng(seed, "family").integers(0, len(VQA_KINDS)))]

    rng = Rng(seed, "question")
    objects = image.objects()
    if kind == "vqa_count":
        counts = [int((image.shapes == s).sum()) for s in range(image.n_shapes)]
        candidates = [s for s, n in enumerate(counts) if n <= 9]
        if not candidates:
            # Answers are single digits: crowded images get a shape question instead
            return gen_instruction_sample(seed, image, kind="vqa_shape")

        shape = candidates[int(rng.integers(0, len(candidates)))]
        prompt = f"how many {SHAPES[shape]} ?"
        answer = str(counts[shape])

    else:
        row, col, shape, color = objects[int(rng.integers(0, len(objects)))]
        if kind == "vqa_color":
            prompt = f"what color is the {SHAPES[shape]} {_place(row, col)} ?"
            answer = COLORS[color]

        else:
            prompt = f"what shape is {_place(row, col)} ?"
            answer = SHAPES[shape]

    return Sample(kind, seed, VOCAB.encode(prompt), VOCAB.encode(answer) + [VOCAB.eos], image=image)


def gen_text_sample(seed, kind):
    """
    Args:
        seed (int): Generation seed
        kind (str): 'text_add' or 'text_succ'

    Returns:
        (Sample): Text-only sample
    """
    rng = Rng(seed, "text")
    if kind == "text_add":
        a, b = (int(x) for x in rng.integers(0, 10, 2))
        prompt = VOCAB.encode(f"add {a} {b}")
        answer = [VOCAB.ids[str((a + b) % 10)]]

    elif kind == "text_succ":
        token = VOCAB.cycle[int(rng.integers(0, len(VOCAB.cycle)))]
        prompt = VOCAB.encode("next after") + [token]
        answer = [VOCAB.successor(token)]

    else:
        raise ConfigError(f"'{kind}' is not a text kind")

    return Sample(kind, seed, prompt, answer + [VOCAB.eos])


def make_sample(kind, seed, settings):
    """(Sample): Regenerate sample 'kind' from 'seed'"""
    if kind in TEXT_KINDS:
        return gen_text_sample(seed, kind)

    image = gen_image(seed, settings.grid, settings.shapes, settings.colors, settings.density, settings.noise)
    if kind == "caption":
        prompt, answer = gen_caption(image)
        return Sample(kind, seed, prompt, answer, image=image)

    return gen_instruction_sample(seed, image, kind=kind)


def _split_kind(split, seed, settings):
    if split == "stage0" or split == "eval_text":
        return TEXT_KINDS[int(Rng(seed, "kind").integers(0, 2))]

    if split == "stage1":
        return "caption"

    if split == "eval_counting":
        return "vqa_count"

    if split == "eval_general_vqa":
        return VQA_KINDS[int(Rng(seed, "kind").integers(0, 2))]

    if Rng(seed, "mix").random() < settings.text_fraction:
        return TEXT_KINDS[int(Rng(seed, "kind").integers(0, 2))]

    return VQA_KINDS[int(Rng(seed, "family").integers(0, len(VQA_KINDS)))]


class Corpus:
    def __init__(self, settings, splits):
        """
        Args:
            settings (CorpusSettings): Settings samples were generated with
            splits (dict): Split name -> list of Samples
        """
        self.settings = settings
        self.splits = splits

    def __repr__(self):
        return f"corpus with {runez.plural(self.splits, 'split')}"

    def __eq__(self, other):
        return isinstance(other, Corpus) and self.meta == other.meta and self.splits == other.splits

    @property
    def meta(self):
        s = self.settings
        return dict(
            vocab_hash=hex_hash(VOCAB.hash),
            generator_version=GENERATOR_VERSION,
            split_sizes={k: len(v) for k, v in self.splits.items()},
            master_seed=s.seed,
            grid=s.grid,
            shapes=s.shapes,
            colors=s.colors,
            density=s.density,
            noise=s.noise,
        )

    @runez.cached_property
    def hash(self):
        return hex_hash(fnv1a_64(self.to_bytes()))

    def to_bytes(self):
        s = self.settings
        out = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, VOCAB.hash)]
        out.append(struct.pack("<QBBBdd", s.seed, s.shapes, s.colors, s.grid, s.noise, s.density))
        out.append(struct.pack("<I", len(self.splits)))
        for name, samples in self.splits.items():
            encoded = name.encode("utf-8")
            out.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<I", len(samples)))
            for sample in samples:
                grid = sample.image.grid if sample.image is not None else 0
                out.append(struct.pack("<BQB", KINDS.index(sample.kind), sample.seed, grid))
                if grid:
                    cells = np.stack([sample.image.shapes, sample.image.colors], axis=1).astype("<i1")
                    out.append(cells.tobytes())

                for ids in (sample.prompt, sample.answer):
                    out.append(struct.pack("<H", len(ids)) + np.asarray(ids, dtype="<u2").tobytes())

        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        reader = _Reader(data)
        if reader.take(len(MAGIC)) != MAGIC:
            raise CorpusFormatError("Not a corpus file, bad magic", 0)

        version, vocab_hash = reader.unpack("<IQ")
        if version != FORMAT_VERSION:
            raise CorpusFormatError(f"Unsupported corpus format version {version}", reader.offset - 12)

        if vocab_hash != VOCAB.hash:
            raise CorpusFormatError(f"Corpus built with another vocabulary ({hex_hash(vocab_hash)})", reader.offset - 8)

        seed, shapes, colors, grid, noise, density = reader.unpack("<QBBBdd")
        settings = CorpusSettings(seed=seed, grid=grid, shapes=shapes, colors=colors, density=density, noise=noise)
        splits = {}
        (split_count,) = reader.unpack("<I")
        for _ in range(split_count):
            (length,) = reader.unpack("<H")
            name = reader.take(length).decode("utf-8", errors="replace")
            (count,) = reader.unpack("<I")
            samples = splits[name] = []
            for _ in range(count):
                at = reader.offset
                kind_code, sample_seed, sample_grid = reader.unpack("<BQB")
                if kind_code >= len(KINDS):
                    raise CorpusFormatError(f"Unknown sample kind {kind_code}", at)

                image = None
                if sample_grid:
                    cells = np.frombuffer(reader.take(2 * sample_grid * sample_grid), dtype="<i1").reshape(-1, 2)
                    image = SynthImage(sample_grid, cells[:, 0], cells[:, 1], sample_seed, shapes, colors, noise)

                prompt = reader.ids()
                answer = reader.ids()
                samples.append(Sample(KINDS[kind_code], sample_seed, prompt, answer, image=image))

        if reader.offset != len(data):
            raise CorpusFormatError("Trailing bytes after last split", reader.offset)

        return cls(settings, splits)

    def save(self, path):
        data = self.to_bytes()
        runez.ensure_folder(os.path.dirname(os.path.abspath(path)), logger=False)
        with open(path, "wb") as fh:
            fh.write(data)

        LOG.info("Saved %s to %s", self, runez.short(path))
        return data

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.data):
            raise CorpusFormatError(f"Truncated file, expecting {n} more bytes", self.offset)

        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def ids(self):
        at = self.offset
        (n,) = self.unpack("<H")
        result = np.frombuffer(self.take(2 * n), dtype="<u2").astype(np.int64).tolist()
        if any(i >= len(VOCAB) for i in result):
            raise CorpusFormatError("Token id outside of vocabulary", at)

        return result


def build_corpus(settings):
    """
    Args:
        settings (CorpusSettings): What to generate

    Returns:
        (Corpus): All splits, deterministic for given settings
    """
    splits = {}
    for split in SPLITS:
        size = settings.sizes.get(split, 0)
        if size <= 0:
            raise ConfigError(f"corpus: split '{split}' needs a positive size")

        samples = []
        for i in range(size):
            seed = settings.sample_seed(split, i)
            samples.append(make_sample(_split_kind(split, seed, settings), seed, settings))

        splits[split] = samples
        LOG.debug("Generated split %s: %s", split, runez.plural(samples, "sample"))

    return Corpus(settings, splits)


def save_corpus(corpus, path):
    return corpus.save(path)


def load_corpus(path):
    return Corpus.load(path)
