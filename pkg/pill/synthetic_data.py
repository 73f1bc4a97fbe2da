"""
Procedural multimodal QA data and a toy text corpus.

Every image is a block of K feature rows that encodes three latent attributes
(color, shape, object count) as one-hot channels plus Gaussian jitter. A
question asks about one attribute; its options are the attribute's classes.
The task is solvable by construction: ``decode_attributes`` recovers the
answer from the features alone.
"""

import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from datasets import Dataset
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from pill.model import (
    BOS_ID,
    EOS_ID,
    IMAGE_PLACEHOLDER_ID,
    PAD_ID,
    ModelConfig,
    SequenceError,
    TokenSequence,
    build_interleaved_sequence,
)

logger = logging.getLogger(__name__)

# Constants
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<img>"]
QUESTION_WORDS = ["what", "color", "shape", "is", "the", "object", "how", "many", "objects", "are", "there"]
COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["circle", "square", "triangle"]
COUNTS = ["one", "two", "three"]
NOUNS = ["cat", "dog", "bird", "fish", "tree", "house", "car", "book", "ball", "box"]
VERBS = ["sees", "likes", "finds", "moves", "holds", "takes", "makes", "wants", "has", "needs"]
ADJECTIVES = ["big", "small", "old", "new", "fast", "slow", "happy", "quiet"]
FUNCTION_WORDS = ["a", "and", "on", "in", "near", "under", "with", "it", "this", "that", "."]

ATTRIBUTE_CLASSES: Dict[str, List[str]] = {"color": COLORS, "shape": SHAPES, "count": COUNTS}
QUESTIONS: Dict[str, str] = {
    "color": "what color is the object",
    "shape": "what shape is the object",
    "count": "how many objects are there",
}
# channel offsets of the one-hot blocks inside a feature row
_BLOCK_OFFSETS = {"color": 0, "shape": len(COLORS), "count": len(COLORS) + len(SHAPES)}
ATTRIBUTE_CHANNELS = len(COLORS) + len(SHAPES) + len(COUNTS)
LOUD_CHANNEL = 0


class Vocabulary:
    """
    Bijective token <-> id map with the reserved ids PAD=0, BOS=1, EOS=2, IMG=3.

    Raises:
        ValueError: If a token repeats or the reserved tokens are not first.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:4] != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words = QUESTION_WORDS + COLORS + SHAPES + COUNTS + NOUNS + VERBS + ADJECTIVES + FUNCTION_WORDS
        return cls(RESERVED_TOKENS + words)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def token_id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise SequenceError(f"out-of-vocabulary token '{token}'") from None

    def encode(self, text: str) -> List[int]:
        return [self.token_id(word) for word in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._tokens[i] for i in ids)


class DataConfig(BaseModel):
    """Generator settings. Image blocks are [queries_per_image, d_vis]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_samples: int = Field(5000, ge=1)
    d_vis: int = Field(16, ge=ATTRIBUTE_CHANNELS)
    queries_per_image: int = Field(4, ge=1)
    jitter: float = Field(0.05, ge=0.0)
    loud_channel_scale: float = Field(5.0, gt=0.0)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    disjoint_tuples: bool = False


class SyntheticSample(BaseModel):
    """One (image features, question, answer) triple with its latent attributes."""

    sample_id: int
    color: str
    shape: str
    count: str
    attribute: Literal["color", "shape", "count"]
    image_features: List[List[float]]
    question: str
    options: List[str] = Field(min_length=1)
    answer: str
    split: Literal["train", "test"]

    @field_validator("image_features")
    @classmethod
    def _rectangular(cls, value: List[List[float]]) -> List[List[float]]:
        if not value or len({len(row) for row in value}) != 1:
            raise ValueError("image_features must be a non-empty rectangular block")
        return value

    @model_validator(mode="after")
    def _answer_is_option(self) -> "SyntheticSample":
        if self.answer not in self.options:
            raise ValueError(f"answer '{self.answer}' is not one of {self.options}")
        return self

    @property
    def true_answer(self) -> str:
        return getattr(self, self.attribute)

    @property
    def latent_tuple(self) -> Tuple[str, str, str]:
        return self.color, self.shape, self.count

    def features_array(self) -> np.ndarray:
        return np.array(self.image_features, dtype=np.float64)


# --------------------------------------------------------------------------- #
# Image features
# --------------------------------------------------------------------------- #
def _canonical(values: np.ndarray) -> List[List[float]]:
    # values are fixed to their 6-decimal text form so exports round-trip exactly
    return [[float(f"{v:.6f}") for v in row] for row in values]


def encode_features(color: str, shape: str, count: str, config: DataConfig,
                    rng: np.random.Generator) -> List[List[float]]:
    """Attribute one-hots and a per-row slot code, plus jitter; the loud channel is scaled up."""
    k, d_vis = config.queries_per_image, config.d_vis
    block = np.zeros((k, d_vis))
    block[:, _BLOCK_OFFSETS["color"] + COLORS.index(color)] = 1.0
    block[:, _BLOCK_OFFSETS["shape"] + SHAPES.index(shape)] = 1.0
    block[:, _BLOCK_OFFSETS["count"] + COUNTS.index(count)] = 1.0
    slot_channels = d_vis - ATTRIBUTE_CHANNELS
    if slot_channels:
        for row in range(k):
            block[row, ATTRIBUTE_CHANNELS + row % slot_channels] = 1.0
    block += rng.normal(0.0, config.jitter, block.shape)
    block[:, LOUD_CHANNEL] *= config.loud_channel_scale
    return _canonical(block)


def decode_attributes(features: np.ndarray, loud_channel_scale: float = 5.0) -> Dict[str, str]:
    """Recover the latent attributes of an image block by per-block argmax of the row mean."""
    mean = np.asarray(features, dtype=np.float64).mean(axis=0).copy()
    mean[LOUD_CHANNEL] /= loud_channel_scale
    decoded = {}
    for attribute, classes in ATTRIBUTE_CLASSES.items():
        offset = _BLOCK_OFFSETS[attribute]
        decoded[attribute] = classes[int(np.argmax(mean[offset:offset + len(classes)]))]
    return decoded


# --------------------------------------------------------------------------- #
# Dataset generation
# --------------------------------------------------------------------------- #
def _balanced(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.resize(np.arange(k), n))


def _assign_splits(tuples: List[Tuple[str, str, str]], config: DataConfig,
                   rng: np.random.Generator) -> List[str]:
    n = len(tuples)
    if config.test_fraction == 0.0:
        return ["train"] * n
    if config.disjoint_tuples:
        distinct = sorted(set(tuples))
        n_test = max(1, int(round(len(distinct) * config.test_fraction)))
        if n_test >= len(distinct):
            logger.warning("Only %d distinct attribute tuples; every tuple goes to test", len(distinct))
        test_tuples = {distinct[i] for i in rng.permutation(len(distinct))[:n_test]}
        return ["test" if t in test_tuples else "train" for t in tuples]
    n_test = int(round(n * config.test_fraction))
    test_index = set(rng.permutation(n)[:n_test].tolist())
    return ["test" if i in test_index else "train" for i in range(n)]


def generate_dataset(n: int, seed: int, config: Optional[DataConfig] = None) -> List[SyntheticSample]:
    """
    Generate ``n`` balanced VQA samples, deterministically per seed.

    Colors, shapes, counts and the queried attribute are each spread over
    their classes as evenly as ``n`` allows, then shuffled. With
    ``disjoint_tuples`` the test split holds whole (color, shape, count)
    tuples never seen in training.

    Raises:
        ValueError: If ``n`` < 1.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    config = config or DataConfig()
    rng = np.random.default_rng(seed)
    attributes = list(ATTRIBUTE_CLASSES)
    colors = _balanced(n, len(COLORS), rng)
    shapes = _balanced(n, len(SHAPES), rng)
    counts = _balanced(n, len(COUNTS), rng)
    queried = _balanced(n, len(attributes), rng)
    tuples = [(COLORS[c], SHAPES[s], COUNTS[m]) for c, s, m in zip(colors, shapes, counts)]
    splits = _assign_splits(tuples, config, rng)

    samples = []
    for i, ((color, shape, count), split) in enumerate(zip(tuples, splits)):
        attribute = attributes[queried[i]]
        latent = {"color": color, "shape": shape, "count": count}
        samples.append(SyntheticSample(
            sample_id=i,
            color=color,
            shape=shape,
            count=count,
            attribute=attribute,
            image_features=encode_features(color, shape, count, config, rng),
            question=QUESTIONS[attribute],
            options=list(ATTRIBUTE_CLASSES[attribute]),
            answer=latent[attribute],
            split=split,
        ))
    logger.info("Generated %d samples (%d test) with seed %d", n, splits.count("test"), seed)
    return samples


def split_samples(samples: Sequence[SyntheticSample]) -> Tuple[List[SyntheticSample], List[SyntheticSample]]:
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test


# --------------------------------------------------------------------------- #
# Encoding
# --------------------------------------------------------------------------- #
def prompt_tokens(sample: SyntheticSample, vocab: Vocabulary) -> List[int]:
    return [BOS_ID] + vocab.encode(sample.question) + [IMAGE_PLACEHOLDER_ID]


def encode_prompt(sample: SyntheticSample, vocab: Vocabulary, config: ModelConfig,
                  continuation: Sequence[int] = ()) -> TokenSequence:
    """Unsupervised prompt, optionally followed by already decoded answer tokens."""
    tokens = prompt_tokens(sample, vocab) + list(continuation)
    return build_interleaved_sequence(tokens, [sample.features_array()], config)


def encode_sample(sample: SyntheticSample, vocab: Vocabulary, config: ModelConfig,
                  answer: Optional[str] = None) -> TokenSequence:
    """
    BOS + question + K Vision slots + answer + EOS, supervised on answer and EOS.

    Args:
        sample: The sample to encode.
        vocab: Token map.
        config: Model configuration (K, d_vis, max_seq_len).
        answer: Overrides ``sample.answer``; an empty string encodes the prompt only.

    Raises:
        SequenceError: On an out-of-vocabulary token or an overlong sequence.
    """
    answer = sample.answer if answer is None else answer
    if not answer:
        return encode_prompt(sample, vocab, config)
    prompt = prompt_tokens(sample, vocab)
    tokens = prompt + vocab.encode(answer) + [EOS_ID]
    return build_interleaved_sequence(tokens, [sample.features_array()], config,
                                      answer_span=(len(prompt), len(tokens)))


def decode_text_positions(seq: TokenSequence, vocab: Vocabulary) -> str:
    """Text of a sequence without the reserved tokens."""
    ids = [tid for tid in seq.text_token_ids() if tid not in (PAD_ID, BOS_ID, EOS_ID, IMAGE_PLACEHOLDER_ID)]
    return vocab.decode(ids)


# --------------------------------------------------------------------------- #
# Text corpus
# --------------------------------------------------------------------------- #
# fixed pairings so every answer word has a context that determines it
_NOUN_COLORS = {"fish": "blue", "tree": "green", "car": "red", "ball": "yellow"}
_NOUN_SHAPES = {"box": "square", "ball": "circle", "house": "triangle"}

_CORPUS_TEMPLATES = [
    "the {adj} {noun} {verb} a {noun2} .",
    "a {noun} is near the {noun2} .",
    "the {noun} is {color} and {adj} .",
    "there are {count} {noun} {prep} the {noun2} .",
    "this {shape} is {prep} the {color} {noun} .",
    "this {color_noun} is {noun_color} .",
    "that {shape_noun} is a {noun_shape} .",
    "there is one {noun} {prep} the {noun2} .",
    "one and two and three .",
    "what color is the object",
    "what shape is the object",
    "how many objects are there",
]


def _pairing(color_noun: str, shape_noun: str) -> Dict[str, str]:
    return {
        "color_noun": color_noun, "noun_color": _NOUN_COLORS[color_noun],
        "shape_noun": shape_noun, "noun_shape": _NOUN_SHAPES[shape_noun],
    }


def generate_text_corpus(n: int, seed: int, vocab: Optional[Vocabulary] = None) -> List[List[int]]:
    """
    ``n`` sentences from a small compositional grammar, as token ids wrapped in BOS/EOS.

    Raises:
        ValueError: If ``n`` < 1.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    vocab = vocab or Vocabulary.default()
    rng = np.random.default_rng(seed)

    def pick(words: Sequence[str]) -> str:
        return words[int(rng.integers(len(words)))]

    corpus = []
    for _ in range(n):
        template = _CORPUS_TEMPLATES[int(rng.integers(len(_CORPUS_TEMPLATES)))]
        sentence = template.format(
            adj=pick(ADJECTIVES), noun=pick(NOUNS), noun2=pick(NOUNS), verb=pick(VERBS),
            color=pick(COLORS), shape=pick(SHAPES), count=pick(COUNTS),
            prep=pick(["on", "in", "near", "under", "with"]),
            **_pairing(pick(sorted(_NOUN_COLORS)), pick(sorted(_NOUN_SHAPES))),
        )
        corpus.append([BOS_ID] + vocab.encode(sentence) + [EOS_ID])
    return corpus


def encode_text(token_ids: Sequence[int], config: ModelConfig) -> TokenSequence:
    """Pure-text sequence supervised on every position after the first."""
    seq = build_interleaved_sequence(list(token_ids), [], config)
    seq.loss_mask = [False] + [True] * (len(seq) - 1)
    return seq


# --------------------------------------------------------------------------- #
# Export / import
# --------------------------------------------------------------------------- #
def _features_to_text(block: List[List[float]]) -> str:
    return ";".join(" ".join(f"{v:.6f}" for v in row) for row in block)


def _features_from_text(text: str) -> List[List[float]]:
    return [[float(v) for v in row.split()] for row in text.split(";")]


def export_dataset(samples: Sequence[SyntheticSample], path: str) -> None:
    """Write samples as line-delimited JSON records with the feature block as decimal text."""
    records = []
    for sample in samples:
        record = sample.model_dump()
        record["image_features"] = _features_to_text(sample.image_features)
        records.append(record)
    Dataset.from_list(records).to_json(path, lines=True)
    logger.info("Exported %d samples to %s", len(records), path)


def import_dataset(path: str) -> List[SyntheticSample]:
    """
    Read samples written by ``export_dataset``.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        pydantic.ValidationError: If a record is malformed.
    """
    rows = Dataset.from_json(path, keep_in_memory=True).to_list()
    samples = []
    for row in rows:
        row["image_features"] = _features_from_text(row["image_features"])
        samples.append(SyntheticSample(**row))
    return sorted(samples, key=lambda s: s.sample_id)


def export_corpus(corpus: Sequence[Sequence[int]], vocab: Vocabulary, path: str) -> None:
    texts = [vocab.decode([t for t in ids if t not in (BOS_ID, EOS_ID)]) for ids in corpus]
    Dataset.from_dict({"line": list(range(len(texts))), "text": texts}).to_json(path, lines=True)
    logger.info("Exported %d corpus sentences to %s", len(texts), path)


def import_corpus(path: str, vocab: Vocabulary) -> List[List[int]]:
    rows = sorted(Dataset.from_json(path, keep_in_memory=True).to_list(), key=lambda r: r["line"])
    return [[BOS_ID] + vocab.encode(row["text"]) + [EOS_ID] for row in rows]
