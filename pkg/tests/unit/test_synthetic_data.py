"""
Unit tests for the synthetic_data module.
"""

import os
import tempfile
import unittest
from collections import Counter

import numpy as np
from pydantic import ValidationError

from pill.model import BOS_ID, EOS_ID, IMAGE_PLACEHOLDER_ID, PAD_ID, SequenceError
from pill.synthetic_data import (
    ATTRIBUTE_CLASSES,
    COLORS,
    DataConfig,
    SyntheticSample,
    Vocabulary,
    decode_attributes,
    decode_text_positions,
    encode_sample,
    export_corpus,
    export_dataset,
    generate_dataset,
    generate_text_corpus,
    import_corpus,
    import_dataset,
    split_samples,
)
from tests.unit.fixtures import TINY


class TestVocabulary(unittest.TestCase):
    """Test the Vocabulary token map."""

    def setUp(self):
        self.vocab = Vocabulary.default()

    def test_reserved_ids_and_size(self):
        """PAD, BOS, EOS and the image placeholder hold ids 0-3; the default vocabulary has 64 tokens."""
        self.assertEqual(len(self.vocab), 64)
        self.assertEqual(
            [self.vocab.token_id(t) for t in ["<pad>", "<bos>", "<eos>", "<img>"]],
            [PAD_ID, BOS_ID, EOS_ID, IMAGE_PLACEHOLDER_ID],
        )

    def test_bijective(self):
        """Every token decodes back from its id."""
        ids = list(range(len(self.vocab)))
        self.assertEqual([self.vocab.token_id(t) for t in self.vocab.decode(ids).split(" ")], ids)

    def test_out_of_vocabulary(self):
        """Unknown words raise SequenceError naming the word."""
        with self.assertRaises(SequenceError) as ctx:
            self.vocab.encode("what colour is the object")
        self.assertIn("colour", str(ctx.exception))

    def test_rejects_duplicates_and_missing_reserved(self):
        """Construction validates the token list."""
        with self.assertRaises(ValueError):
            Vocabulary(["<pad>", "<bos>", "<eos>", "<img>", "red", "red"])
        with self.assertRaises(ValueError):
            Vocabulary(["red", "green"])


class TestGenerateDataset(unittest.TestCase):
    """Test dataset generation, balance and learnability."""

    def test_deterministic_per_seed(self):
        """The same seed yields identical samples; another seed does not."""
        first = [s.model_dump() for s in generate_dataset(50, seed=3)]
        second = [s.model_dump() for s in generate_dataset(50, seed=3)]
        self.assertEqual(first, second)
        self.assertNotEqual(first, [s.model_dump() for s in generate_dataset(50, seed=4)])

    def test_balanced_classes(self):
        """With n=1000 every color appears between 225 and 275 times, and attributes are even."""
        samples = generate_dataset(1000, seed=0)
        colors = Counter(s.color for s in samples)
        for color in COLORS:
            self.assertGreaterEqual(colors[color], 225)
            self.assertLessEqual(colors[color], 275)
        attributes = Counter(s.attribute for s in samples)
        self.assertLessEqual(max(attributes.values()) - min(attributes.values()), 1)

    def test_answers_follow_the_latent_attributes(self):
        """The answer is the queried attribute, one of its options, and absent from the question."""
        for sample in generate_dataset(60, seed=1):
            self.assertEqual(sample.answer, sample.true_answer)
            self.assertEqual(sample.options, ATTRIBUTE_CLASSES[sample.attribute])
            self.assertNotIn(sample.answer, sample.question.split())

    def test_features_decode_to_attributes(self):
        """Every image block decodes back to its color, shape and count."""
        for sample in generate_dataset(200, seed=2):
            decoded = decode_attributes(sample.features_array())
            self.assertEqual((decoded["color"], decoded["shape"], decoded["count"]), sample.latent_tuple)

    def test_linear_readout_separates_colors(self):
        """A least-squares readout on the flattened features classifies color perfectly."""
        samples = generate_dataset(400, seed=5)
        x = np.stack([s.features_array().reshape(-1) for s in samples])
        x = np.hstack([x, np.ones((len(samples), 1))])
        y = np.eye(len(COLORS))[[COLORS.index(s.color) for s in samples]]
        weights, *_ = np.linalg.lstsq(x, y, rcond=None)
        predicted = np.argmax(x @ weights, axis=1)
        self.assertEqual(float(np.mean(predicted == y.argmax(axis=1))), 1.0)

    def test_splits(self):
        """The default split holds out about a fifth; disjoint tuples never cross splits."""
        train, test = split_samples(generate_dataset(500, seed=6))
        self.assertEqual(len(test), 100)
        self.assertEqual(len(train), 400)

        config = DataConfig(disjoint_tuples=True)
        train, test = split_samples(generate_dataset(500, seed=6, config=config))
        self.assertTrue(test)
        self.assertFalse({s.latent_tuple for s in train} & {s.latent_tuple for s in test})

    def test_invalid_size(self):
        """n < 1 is rejected."""
        with self.assertRaises(ValueError):
            generate_dataset(0, seed=0)

    def test_sample_validation(self):
        """An answer outside the options is rejected."""
        record = generate_dataset(1, seed=0)[0].model_dump()
        record["answer"] = "purple"
        with self.assertRaises(ValidationError):
            SyntheticSample(**record)


class TestEncoding(unittest.TestCase):
    """Test encode_sample and decode_text_positions."""

    def setUp(self):
        self.vocab = Vocabulary.default()
        self.config = TINY.model_copy(update={"queries_per_image": 4, "d_vis": 16})
        self.sample = generate_dataset(1, seed=0, config=DataConfig(queries_per_image=4, d_vis=16))[0]

    def test_layout(self):
        """BOS + 5 question words + K=4 image slots + answer + EOS, supervised on the last two."""
        seq = encode_sample(self.sample, self.vocab, self.config)
        self.assertEqual(len(seq), 12)
        self.assertEqual(int(seq.vision_mask.sum()), 4)
        self.assertEqual(seq.loss_mask, [False] * 10 + [True, True])
        self.assertEqual(seq.token_ids[-1], EOS_ID)
        self.assertEqual(decode_text_positions(seq, self.vocab), f"{self.sample.question} {self.sample.answer}")

    def test_answer_override_and_prompt_only(self):
        """An explicit answer replaces the stored one; an empty answer encodes the prompt."""
        other = next(o for o in self.sample.options if o != self.sample.answer)
        seq = encode_sample(self.sample, self.vocab, self.config, answer=other)
        self.assertEqual(seq.token_ids[-2], self.vocab.token_id(other))
        prompt = encode_sample(self.sample, self.vocab, self.config, answer="")
        self.assertEqual(len(prompt), 10)
        self.assertFalse(any(prompt.loss_mask))

    def test_out_of_vocabulary_question(self):
        """Questions with unknown words cannot be encoded."""
        broken = self.sample.model_copy(update={"question": "what colour is the object"})
        with self.assertRaises(SequenceError):
            encode_sample(broken, self.vocab, self.config)


class TestTextCorpus(unittest.TestCase):
    """Test the text corpus generator."""

    def test_deterministic_and_in_vocabulary(self):
        """Same seed, same corpus; every id is inside the vocabulary and sentences are BOS/EOS wrapped."""
        vocab = Vocabulary.default()
        corpus = generate_text_corpus(100, seed=9, vocab=vocab)
        self.assertEqual(corpus, generate_text_corpus(100, seed=9, vocab=vocab))
        for ids in corpus:
            self.assertEqual((ids[0], ids[-1]), (BOS_ID, EOS_ID))
            self.assertTrue(all(0 <= t < len(vocab) for t in ids))
            self.assertNotIn(IMAGE_PLACEHOLDER_ID, ids)

    def test_every_answer_word_has_a_determining_context(self):
        """Each color, shape and count follows some three-token context that is never followed by anything else."""
        vocab = Vocabulary.default()
        followers = {}
        for ids in generate_text_corpus(2000, seed=0, vocab=vocab):
            for i in range(1, len(ids)):
                followers.setdefault(tuple(ids[max(0, i - 3):i]), set()).add(ids[i])
        determined = {next(iter(nxt)) for nxt in followers.values() if len(nxt) == 1}
        for words in ATTRIBUTE_CLASSES.values():
            for word in words:
                self.assertIn(vocab.token_id(word), determined, word)


class TestExportImport(unittest.TestCase):
    """Test writing and reading datasets and corpora."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_dataset_round_trip(self):
        """Exported samples import back unchanged, in sample_id order."""
        samples = generate_dataset(30, seed=7)
        path = os.path.join(self.temp_dir.name, "vqa.jsonl")
        export_dataset(samples, path)
        restored = import_dataset(path)
        self.assertEqual([s.model_dump() for s in restored], [s.model_dump() for s in samples])

    def test_corpus_round_trip(self):
        """Exported sentences import back as the same token ids."""
        vocab = Vocabulary.default()
        corpus = generate_text_corpus(25, seed=8, vocab=vocab)
        path = os.path.join(self.temp_dir.name, "corpus.jsonl")
        export_corpus(corpus, vocab, path)
        self.assertEqual(import_corpus(path, vocab), corpus)


if __name__ == '__main__':
    unittest.main()
