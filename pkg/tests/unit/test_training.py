"""
Unit tests for the training module.
"""

import math
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from pill.checkpoint import block_digests
from pill.model import ModalityTag, ParamGroup, TokenSequence, init_params
from pill.synthetic_data import DataConfig, SyntheticSample, Vocabulary, generate_dataset, generate_text_corpus
from pill.tensor_core import EmptyLossError, Tensor
from pill.training import (
    AugmentationError,
    OptimizerError,
    OptimizerState,
    StageName,
    TrainingAbort,
    TrainStageSpec,
    adamw_step,
    autoregressive_loss,
    build_probe_batch,
    clip_grad_norm,
    cosine_lr,
    evaluate,
    exact_match_accuracy,
    predict_answers,
    read_report,
    run_stage,
    text_eval_loss,
    wrong_answer_augment,
)
from tests.unit.fixtures import TINY


def text_only(token_ids, supervised):
    n = len(token_ids)
    return TokenSequence([ModalityTag.TEXT] * n, list(token_ids), [None] * n, list(supervised))


def tiny_samples(n=24, seed=0):
    return generate_dataset(n, seed, DataConfig(d_vis=TINY.d_vis, queries_per_image=TINY.queries_per_image,
                                                test_fraction=0.25))


class TestStageSpec(unittest.TestCase):
    """Test TrainStageSpec defaults and validation."""

    def test_presets(self):
        """Each stage preset trains its own parameter groups."""
        self.assertEqual(TrainStageSpec.stage1().trainable_groups, {ParamGroup.A_V, ParamGroup.PROJECTION})
        self.assertEqual(len(TrainStageSpec.stage2().trainable_groups), 5)
        self.assertEqual(TrainStageSpec.base().trainable_groups, {ParamGroup.BASE})
        self.assertTrue(TrainStageSpec.stage1().excludes_final_vision_adapter)
        self.assertFalse(TrainStageSpec.stage2().excludes_final_vision_adapter)

    def test_wrong_groups_rejected(self):
        """A stage that trains other groups than its own is invalid."""
        with self.assertRaises(ValidationError):
            TrainStageSpec.stage1(trainable_groups=frozenset({ParamGroup.A_V, ParamGroup.GATE}))
        with self.assertRaises(ValidationError):
            TrainStageSpec.stage2(trainable_groups=frozenset({ParamGroup.BASE}))


class TestLoss(unittest.TestCase):
    """Test the answer-masked autoregressive loss."""

    def test_uniform_logits(self):
        """Uniform logits over V=10 cost ln 10 per supervised target."""
        seq = text_only([1, 4, 5, 2], [False, False, True, True])
        loss = autoregressive_loss(Tensor(np.zeros((4, 10))), seq)
        self.assertAlmostEqual(loss.item(), math.log(10), places=12)

    def test_confident_answer(self):
        """A single-token answer predicted with certainty costs 0."""
        seq = text_only([1, 4, 7], [False, False, True])
        logits = np.zeros((3, 10))
        logits[1, 7] = 1000.0
        self.assertEqual(autoregressive_loss(Tensor(logits), seq).item(), 0.0)

    def test_prompt_labels_do_not_matter(self):
        """Changing a prompt token's label leaves the loss unchanged."""
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(5, 10)))
        first = autoregressive_loss(logits, text_only([1, 4, 5, 6, 2], [False, False, False, True, True]))
        second = autoregressive_loss(logits, text_only([1, 8, 9, 6, 2], [False, False, False, True, True]))
        self.assertEqual(first.item(), second.item())

    def test_no_answer_raises(self):
        """A sequence without supervised positions has no loss."""
        with self.assertRaises(EmptyLossError):
            autoregressive_loss(Tensor(np.zeros((3, 10))), text_only([1, 4, 2], [False] * 3))


class TestAugmentation(unittest.TestCase):
    """Test wrong_answer_augment."""

    def setUp(self):
        self.sample = SyntheticSample(
            sample_id=0, color="red", shape="circle", count="one", attribute="color",
            image_features=[[0.0] * 10], question="what color is the object",
            options=["red", "green"], answer="red", split="train",
        )

    def test_probability_extremes(self):
        """p=0 never changes the answer; p=1 always flips a two-option sample."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            self.assertEqual(wrong_answer_augment(self.sample, 0.0, rng).answer, "red")
            self.assertEqual(wrong_answer_augment(self.sample, 1.0, rng).answer, "green")

    def test_rate(self):
        """p=0.1 over 10000 draws replaces between 8% and 12% of answers."""
        rng = np.random.default_rng(1)
        flips = sum(wrong_answer_augment(self.sample, 0.1, rng).answer != "red" for _ in range(10000))
        self.assertGreaterEqual(flips / 10000, 0.08)
        self.assertLessEqual(flips / 10000, 0.12)

    def test_original_untouched(self):
        """Augmentation returns a copy."""
        wrong_answer_augment(self.sample, 1.0, np.random.default_rng(2))
        self.assertEqual(self.sample.answer, "red")

    def test_single_option(self):
        """A single-option sample cannot get a wrong answer."""
        single = self.sample.model_copy(update={"options": ["red"]})
        with self.assertRaises(AugmentationError):
            wrong_answer_augment(single, 1.0, np.random.default_rng(3))


class TestSchedule(unittest.TestCase):
    """Test cosine_lr."""

    def test_shape(self):
        """Base rate at the end of warmup, half at the cosine midpoint, zero at the end."""
        self.assertEqual(cosine_lr(10, 110, 1e-3, 10), 1e-3)
        self.assertAlmostEqual(cosine_lr(60, 110, 1e-3, 10), 5e-4, delta=1e-12)
        self.assertAlmostEqual(cosine_lr(110, 110, 1e-3, 10), 0.0, delta=1e-18)
        self.assertAlmostEqual(cosine_lr(5, 110, 1e-3, 10), 5e-4, delta=1e-18)

    def test_invalid(self):
        """Zero total steps and out-of-range steps are rejected."""
        with self.assertRaises(ValueError):
            cosine_lr(0, 0, 1e-3, 0)
        with self.assertRaises(ValueError):
            cosine_lr(11, 10, 1e-3, 0)


class TestOptimizer(unittest.TestCase):
    """Test adamw_step and clip_grad_norm."""

    def setUp(self):
        self.spec = TrainStageSpec.stage2(weight_decay=0.0)
        self.weight = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
        self.params = {"w": self.weight}
        self.state = OptimizerState.create(self.params, {"w": ParamGroup.A_T}, self.spec)

    def test_zero_gradient_without_decay(self):
        """No gradient signal and no decay leaves the parameter unchanged."""
        before = self.weight.data.copy()
        adamw_step(self.params, {"w": np.zeros((2, 2))}, self.state, lr=1e-2)
        assert_array_equal(self.weight.data, before)

    def test_first_step_is_sign_sized(self):
        """With bias correction the first update is lr * g / (|g| + eps)."""
        grad = np.array([[0.3, -0.1], [2.0, -5.0]])
        before = self.weight.data.copy()
        adamw_step(self.params, {"w": grad}, self.state, lr=1e-2)
        np.testing.assert_allclose(self.weight.data, before - 1e-2 * grad / (np.abs(grad) + 1e-8), rtol=1e-12)

    def test_decoupled_weight_decay(self):
        """Matrices shrink by lr * weight_decay even with a zero gradient; gate maps do not."""
        spec = TrainStageSpec.stage2(weight_decay=0.1)
        gate = Tensor(np.ones((2, 2)), requires_grad=True)
        params = {"w": self.weight, "g": gate}
        state = OptimizerState.create(params, {"w": ParamGroup.A_T, "g": ParamGroup.GATE}, spec)
        before = self.weight.data.copy()
        adamw_step(params, {"w": np.zeros((2, 2)), "g": np.zeros((2, 2))}, state, lr=0.5)
        np.testing.assert_allclose(self.weight.data, before * (1 - 0.05), rtol=1e-14)
        assert_array_equal(gate.data, np.ones((2, 2)))

    def test_untracked_tensor_untouched(self):
        """A tensor outside the optimizer state keeps its bytes."""
        frozen = Tensor(np.arange(4.0))
        params = {"w": self.weight, "frozen": frozen}
        adamw_step(params, {"w": np.ones((2, 2)), "frozen": np.ones(4)}, self.state, lr=1e-2)
        assert_array_equal(frozen.data, np.arange(4.0))

    def test_missing_gradient(self):
        """A tracked parameter without a gradient is an error."""
        with self.assertRaises(OptimizerError):
            adamw_step(self.params, {"w": None}, self.state, lr=1e-2)

    def test_clip_grad_norm(self):
        """Gradients above the limit are rescaled to it; the pre-clip norm is returned."""
        clipped, norm = clip_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        self.assertEqual(norm, 5.0)
        self.assertAlmostEqual(math.hypot(clipped["a"][0], clipped["b"][0]), 1.0, places=12)
        same, _ = clip_grad_norm({"a": np.array([0.3])}, 1.0)
        self.assertEqual(same["a"][0], 0.3)


class TestRunStage(unittest.TestCase):
    """Test run_stage on a tiny model."""

    def setUp(self):
        self.vocab = Vocabulary.default()
        self.samples = tiny_samples()
        self.train = [s for s in self.samples if s.split == "train"]
        self.spec2 = TrainStageSpec.stage2(epochs=1, batch_size=8, seq_len=TINY.max_seq_len)

    def test_zero_epochs(self):
        """Zero epochs produce an empty trace and leave every parameter unchanged."""
        params = init_params(TINY, seed=0)
        before = block_digests(params)
        report = run_stage(params, self.train, TrainStageSpec.stage2(epochs=0), np.random.default_rng(0),
                           self.vocab, progress=False)
        self.assertEqual(report.steps, [])
        self.assertEqual(block_digests(params), before)

    def test_deterministic(self):
        """Two runs with the same seed give identical losses and parameters."""
        results = []
        for _ in range(2):
            params = init_params(TINY, seed=0)
            report = run_stage(params, self.train, self.spec2, np.random.default_rng(5), self.vocab, progress=False)
            results.append((report.losses, block_digests(params)))
        self.assertEqual(results[0], results[1])
        self.assertEqual(len(results[0][0]), math.ceil(len(self.train) / 8))

    def test_stage2_loss_falls(self):
        """The median loss over the last tenth of Stage-2 steps is below the median over the first tenth."""
        params = init_params(TINY, seed=0)
        spec = TrainStageSpec.stage2(epochs=12, batch_size=4, seq_len=TINY.max_seq_len)
        report = run_stage(params, self.train, spec, np.random.default_rng(0), self.vocab, progress=False)
        losses = report.losses
        tenth = max(1, len(losses) // 10)
        self.assertLess(np.median(losses[-tenth:]), np.median(losses[:tenth]))

    def test_stage2_keeps_base_frozen(self):
        """Every base block is bit-identical after Stage 2; the injections moved."""
        params = init_params(TINY, seed=1)
        before = block_digests(params)
        run_stage(params, self.train, self.spec2, np.random.default_rng(0), self.vocab, progress=False)
        after = block_digests(params)
        groups = params.groups()
        for name, group in groups.items():
            if group is ParamGroup.BASE:
                self.assertEqual(after[name], before[name], name)
        self.assertNotEqual(after["projection.weight"], before["projection.weight"])
        self.assertNotEqual(after["layers.0.a_t.up.weight"], before["layers.0.a_t.up.weight"])

    def test_stage1_scope(self):
        """Stage 1 moves only the projection and the non-final vision adapters."""
        params = init_params(TINY, seed=2)
        before = block_digests(params)
        spec = TrainStageSpec.stage1(epochs=1, batch_size=8, seq_len=TINY.max_seq_len)
        report = run_stage(params, self.train, spec, np.random.default_rng(0), self.vocab, progress=False)
        after = block_digests(params)
        last = f"layers.{TINY.n_layers - 1}.a_v."
        for name, group in params.groups().items():
            if group in (ParamGroup.BASE, ParamGroup.A_T, ParamGroup.A_ATTN, ParamGroup.GATE) or name.startswith(last):
                self.assertEqual(after[name], before[name], name)
        self.assertNotEqual(after["projection.bias"], before["projection.bias"])
        self.assertEqual(report.stage, StageName.STAGE1)

    def test_requires_grad_reset_after_stage(self):
        """Parameters are frozen again once a stage finishes."""
        params = init_params(TINY, seed=3)
        run_stage(params, self.train, self.spec2, np.random.default_rng(0), self.vocab, progress=False)
        self.assertFalse(any(t.requires_grad for t in params.parameter_dict().values()))

    def test_non_finite_aborts(self):
        """A NaN in a frozen weight aborts at step 1."""
        params = init_params(TINY, seed=4)
        params.embedding.data[:] = np.nan
        with self.assertRaises(TrainingAbort) as ctx:
            run_stage(params, self.train, self.spec2, np.random.default_rng(0), self.vocab, progress=False)
        self.assertEqual(ctx.exception.step, 1)

    def test_empty_dataset(self):
        """An empty dataset is rejected."""
        with self.assertRaises(ValueError):
            run_stage(init_params(TINY, seed=0), [], self.spec2, np.random.default_rng(0), self.vocab)

    def test_gate_trace_and_report_file(self):
        """Gate magnitudes are tracked per epoch; the report file has one line per step plus a summary."""
        params = init_params(TINY, seed=5)
        probe = build_probe_batch(self.samples, self.vocab, params, size=4)
        spec = TrainStageSpec.stage2(epochs=2, batch_size=8, seq_len=TINY.max_seq_len)
        report = run_stage(params, self.train, spec, np.random.default_rng(0), self.vocab, probe=probe,
                           progress=False)
        self.assertEqual(len(report.gate_trace), 3)
        self.assertEqual(report.gate_trace[0], [0.0] * TINY.n_layers)
        self.assertGreater(max(report.gate_trace[-1]), 0.0)

        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "report.jsonl")
            report.write_jsonl(path)
            frame, summary = read_report(path)
        self.assertEqual(len(frame), len(report.steps))
        self.assertEqual(summary["n_steps"], len(report.steps))
        self.assertNotIn("wall_time_s", summary)

    def test_base_stage_trains_only_base(self):
        """Base pre-training updates base blocks and leaves the injections alone."""
        params = init_params(TINY, seed=6)
        before = block_digests(params)
        corpus = generate_text_corpus(16, seed=0, vocab=self.vocab)
        spec = TrainStageSpec.base(epochs=1, batch_size=8, seq_len=TINY.max_seq_len)
        report = run_stage(params, corpus, spec, np.random.default_rng(0), self.vocab, eval_samples=corpus[:4],
                           progress=False)
        after = block_digests(params)
        self.assertNotEqual(after["embedding"], before["embedding"])
        self.assertEqual(after["layers.0.a_t.up.weight"], before["layers.0.a_t.up.weight"])
        self.assertIn("eval_loss", report.metrics)
        self.assertTrue(math.isfinite(report.metrics["eval_loss"]))


class TestEvaluation(unittest.TestCase):
    """Test decoding and metrics."""

    def setUp(self):
        self.vocab = Vocabulary.default()
        self.samples = tiny_samples(n=12, seed=3)

    def test_oracle_predictions(self):
        """Perfect predictions score 1.0 overall, per attribute and per class."""
        metrics = evaluate(None, self.samples, self.vocab, predictions=[s.answer for s in self.samples])
        self.assertEqual(metrics["accuracy"], 1.0)
        self.assertEqual(metrics["n"], 12)
        self.assertTrue(all(v == 1.0 for v in metrics["per_attribute"].values()))
        self.assertTrue(all(v == 1.0 for v in metrics["per_class"].values()))
        expected_chance = np.mean([1.0 / len(s.options) for s in self.samples])
        self.assertAlmostEqual(metrics["chance"], expected_chance, places=12)

    def test_predictions_are_options(self):
        """Restricted decoding always returns one of the sample's options, deterministically."""
        params = init_params(TINY, seed=0)
        predictions = predict_answers(params, self.samples, self.vocab, batch_size=5)
        self.assertEqual(predictions, predict_answers(params, self.samples, self.vocab, batch_size=5))
        for prediction, sample in zip(predictions, self.samples):
            self.assertIn(prediction, sample.options)

    def test_exact_match_errors(self):
        """Mismatched or empty inputs are rejected."""
        self.assertEqual(exact_match_accuracy(["a", "b"], ["a", "c"]), 0.5)
        with self.assertRaises(ValueError):
            exact_match_accuracy([], [])
        with self.assertRaises(ValueError):
            exact_match_accuracy(["a"], ["a", "b"])

    def test_text_eval_loss(self):
        """The base model's held-out loss is finite and near ln V at init."""
        params = init_params(TINY, seed=0)
        corpus = generate_text_corpus(10, seed=1, vocab=self.vocab)
        loss = text_eval_loss(params, corpus)
        self.assertAlmostEqual(loss, math.log(TINY.vocab_size), delta=0.5)

    def test_sequences_fit_tiny_model(self):
        """Tiny samples encode within the tiny model's length limit."""
        lengths = {1 + len(s.question.split()) + TINY.queries_per_image + 2 for s in self.samples}
        self.assertTrue(all(n <= TINY.max_seq_len for n in lengths))


if __name__ == '__main__':
    unittest.main()
