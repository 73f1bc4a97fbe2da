"""
Two-stage training protocol for the injected model, plus base pre-training.

A stage is described declaratively by ``TrainStageSpec``: which parameter
groups train, for how long and with which schedule. ``run_stage`` freezes
everything else, optimises the answer-masked autoregressive loss with AdamW
under a warmup + cosine learning-rate schedule, and returns a
``TrainingReport``.
"""

import json
import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from pill.checkpoint import save_checkpoint
from pill.model import (
    EOS_ID,
    ParamGroup,
    PillModelParams,
    SequenceBatch,
    SequenceError,
    TokenSequence,
    base_model_forward,
    collate,
    gate_magnitudes,
    model_forward,
    set_trainable,
)
from pill.synthetic_data import (
    SyntheticSample,
    Vocabulary,
    encode_prompt,
    encode_sample,
    encode_text,
)
from pill.tensor_core import (
    NumericError,
    PillError,
    Tensor,
    backward,
    cross_entropy,
    no_grad,
    zero_grad,
)

logger = logging.getLogger(__name__)

INJECTION_GROUPS = frozenset({ParamGroup.A_V, ParamGroup.A_T, ParamGroup.A_ATTN, ParamGroup.GATE, ParamGroup.PROJECTION})
STAGE1_GROUPS = frozenset({ParamGroup.A_V, ParamGroup.PROJECTION})


class AugmentationError(PillError, ValueError):
    """A replacement answer was drawn for a sample with a single option."""


class OptimizerError(PillError, RuntimeError):
    """A trainable parameter has no gradient at update time."""


class TrainingAbort(PillError, RuntimeError):
    """Training hit non-finite values; ``step`` is the 1-based step that failed."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


class StageName(str, Enum):
    BASE = "base"
    STAGE1 = "stage1"
    STAGE2 = "stage2"


_REQUIRED_GROUPS = {
    StageName.BASE: frozenset({ParamGroup.BASE}),
    StageName.STAGE1: STAGE1_GROUPS,
    StageName.STAGE2: INJECTION_GROUPS,
}


class TrainStageSpec(BaseModel):
    """Which parameter groups train in a stage, and the stage's optimisation settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: StageName
    trainable_groups: FrozenSet[ParamGroup]
    epochs: int = Field(ge=0)
    base_lr: float = Field(gt=0.0)
    seq_len: int = Field(gt=0)
    batch_size: int = Field(gt=0)
    wrong_answer_prob: float = Field(0.0, ge=0.0, le=1.0)
    warmup_fraction: float = Field(0.03, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    clip_norm: Optional[float] = Field(1.0, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def _check_groups(self) -> "TrainStageSpec":
        required = _REQUIRED_GROUPS[self.name]
        if self.trainable_groups != required:
            got = sorted(g.value for g in self.trainable_groups)
            want = sorted(g.value for g in required)
            raise ValueError(f"{self.name.value} must train exactly {want}, got {got}")
        return self

    @property
    def excludes_final_vision_adapter(self) -> bool:
        # the last layer's vision adapter has no path to the answer loss in stage 1
        return self.name is StageName.STAGE1

    @classmethod
    def base(cls, **overrides: Any) -> "TrainStageSpec":
        values = dict(name=StageName.BASE, trainable_groups=_REQUIRED_GROUPS[StageName.BASE],
                      epochs=3, base_lr=3e-3, seq_len=32, batch_size=16)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def stage1(cls, **overrides: Any) -> "TrainStageSpec":
        values = dict(name=StageName.STAGE1, trainable_groups=STAGE1_GROUPS,
                      epochs=3, base_lr=1e-3, seq_len=32, batch_size=16)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def stage2(cls, **overrides: Any) -> "TrainStageSpec":
        values = dict(name=StageName.STAGE2, trainable_groups=INJECTION_GROUPS,
                      epochs=20, base_lr=2e-3, seq_len=32, batch_size=8)
        values.update(overrides)
        return cls(**values)


# --------------------------------------------------------------------------- #
# Loss and augmentation
# --------------------------------------------------------------------------- #
def _shifted_targets(token_ids: np.ndarray, loss_mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.zeros_like(token_ids)
    mask = np.zeros_like(loss_mask)
    targets[..., :-1] = token_ids[..., 1:]
    mask[..., :-1] = loss_mask[..., 1:]
    return targets, mask


def autoregressive_loss(logits: Tensor, seq: Union[TokenSequence, SequenceBatch]) -> Tensor:
    """
    Mean next-token NLL over the positions whose target is supervised.

    Position i predicts position i+1, and counts only when ``loss_mask[i+1]``
    holds; prompt and vision positions act as context only.

    Raises:
        EmptyLossError: If no position is supervised.
    """
    if isinstance(seq, TokenSequence):
        token_ids = np.array([t if t is not None else 0 for t in seq.token_ids], dtype=np.int64)
        loss_mask = np.array(seq.loss_mask, dtype=bool)
    else:
        token_ids, loss_mask = seq.token_ids, seq.loss_mask
    targets, mask = _shifted_targets(token_ids, loss_mask)
    return cross_entropy(logits, targets, mask)


def wrong_answer_augment(sample: SyntheticSample, p: float, rng: np.random.Generator) -> SyntheticSample:
    """
    With probability ``p`` supervise a uniformly drawn wrong option instead of the answer.

    One uniform draw is consumed per call whatever ``p`` is.

    Raises:
        AugmentationError: If a replacement is drawn but the sample has no other option.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if rng.random() >= p:
        return sample
    others = [option for option in sample.options if option != sample.answer]
    if not others:
        raise AugmentationError(f"sample {sample.sample_id} has a single option; cannot replace its answer")
    return sample.model_copy(update={"answer": others[int(rng.integers(len(others)))]})


# --------------------------------------------------------------------------- #
# Schedule and optimizer
# --------------------------------------------------------------------------- #
def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """
    Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``.

    Raises:
        ValueError: If ``total_steps`` is 0 or ``step``/``warmup_steps`` fall outside [0, total_steps].
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_steps <= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps == 0:
        return 0.0 if step == total_steps else base_lr
    progress = (step - warmup_steps) / decay_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW moments for the active stage's trainable parameters only."""

    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    decay: Dict[str, bool]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0

    @classmethod
    def create(cls, trainable: Dict[str, Tensor], groups: Dict[str, ParamGroup],
               spec: TrainStageSpec) -> "OptimizerState":
        return cls(
            first_moment={name: np.zeros_like(t.data) for name, t in trainable.items()},
            second_moment={name: np.zeros_like(t.data) for name, t in trainable.items()},
            # matrices decay; biases, norms and gate maps do not
            decay={name: t.data.ndim >= 2 and groups.get(name) is not ParamGroup.GATE
                   for name, t in trainable.items()},
            beta1=spec.beta1,
            beta2=spec.beta2,
            eps=spec.eps,
            weight_decay=spec.weight_decay,
        )


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]],
               state: OptimizerState, lr: float) -> None:
    """
    One AdamW update with bias correction and decoupled weight decay.

    Only the parameters that ``state`` tracks are touched.

    Raises:
        OptimizerError: If a tracked parameter has no gradient.
    """
    missing = [name for name in state.first_moment if grads.get(name) is None]
    if missing:
        raise OptimizerError(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name in state.first_moment:
        tensor, grad = params[name], grads[name]
        m = b1 * state.first_moment[name] + (1.0 - b1) * grad
        v = b2 * state.second_moment[name] + (1.0 - b2) * grad * grad
        state.first_moment[name], state.second_moment[name] = m, v
        data = tensor.data
        if state.decay[name] and state.weight_decay:
            data = data - lr * state.weight_decay * data
        tensor.data = data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #
class StepRecord(BaseModel):
    step: int
    epoch: int
    lr: float
    loss: float
    grad_norm: float


class TrainingReport(BaseModel):
    """Per-step trace and summary of one stage."""

    stage: StageName
    steps: List[StepRecord] = Field(default_factory=list)
    metrics: Dict[str, Any] = Field(default_factory=dict)
    gate_trace: List[List[float]] = Field(default_factory=list)
    trainable_parameters: int = 0
    total_parameters: int = 0
    wall_time_s: float = 0.0

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.steps]

    def summary(self) -> Dict[str, Any]:
        return {
            "stage": self.stage.value,
            "n_steps": len(self.steps),
            "final_loss": self.steps[-1].loss if self.steps else None,
            "metrics": self.metrics,
            "gate_trace": self.gate_trace,
            "trainable_parameters": self.trainable_parameters,
            "total_parameters": self.total_parameters,
            "wall_time_s": self.wall_time_s,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.model_dump() for record in self.steps],
                            columns=["step", "epoch", "lr", "loss", "grad_norm"])

    def write_jsonl(self, path: str) -> None:
        """
        One line per step (step, epoch, lr, loss, grad_norm), then a summary line.

        Wall time is not written; the file depends only on the seed and the inputs.
        """
        frame = self.to_frame()
        summary = {k: v for k, v in self.summary().items() if k != "wall_time_s"}
        with open(path, "w") as f:
            if not frame.empty:
                f.write(frame.to_json(orient="records", lines=True, double_precision=15).rstrip("\n") + "\n")
            f.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")


def read_report(path: str) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    with open(path) as f:
        rows = [json.loads(line) for line in f if line.strip()]
    summary = rows[-1]["summary"] if rows and "summary" in rows[-1] else {}
    steps = [row for row in rows if "summary" not in row]
    return pd.DataFrame(steps, columns=["step", "epoch", "lr", "loss", "grad_norm"]), summary


# --------------------------------------------------------------------------- #
# Stage runner
# --------------------------------------------------------------------------- #
def _encode_batch(items: Sequence[Any], spec: TrainStageSpec, params: PillModelParams,
                  vocab: Vocabulary, rng: np.random.Generator) -> SequenceBatch:
    config = params.config
    sequences = []
    for item in items:
        if spec.name is StageName.BASE:
            seq = encode_text(item, config)
        else:
            if spec.wrong_answer_prob > 0.0:
                item = wrong_answer_augment(item, spec.wrong_answer_prob, rng)
            seq = encode_sample(item, vocab, config)
        if len(seq) > spec.seq_len:
            raise SequenceError(f"sequence of length {len(seq)} exceeds the stage seq_len={spec.seq_len}")
        sequences.append(seq)
    return collate(sequences, config.d_vis)


def _forward(batch: SequenceBatch, params: PillModelParams, stage: StageName) -> Tensor:
    if stage is StageName.BASE:
        return base_model_forward(batch, params)
    return model_forward(batch, params)


def build_probe_batch(samples: Sequence[SyntheticSample], vocab: Vocabulary, params: PillModelParams,
                      size: int = 16) -> SequenceBatch:
    """Prompt-only batch of the first ``size`` samples, used to track gate magnitudes."""
    if not samples:
        raise ValueError("probe needs at least one sample")
    prompts = [encode_prompt(s, vocab, params.config) for s in samples[:size]]
    return collate(prompts, params.config.d_vis)


def run_stage(params: PillModelParams, dataset: Sequence[Any], spec: TrainStageSpec,
              rng: np.random.Generator, vocab: Optional[Vocabulary] = None,
              eval_samples: Optional[Sequence[Any]] = None, probe: Optional[SequenceBatch] = None,
              checkpoint_path: Optional[str] = None, progress: bool = True) -> TrainingReport:
    """
    Train the stage's parameter groups on ``dataset``.

    Args:
        params: Model parameters; updated in place.
        dataset: SyntheticSamples for Stage 1/2, token-id lists for base pre-training.
        spec: Stage description.
        rng: Drives shuffling and wrong-answer augmentation.
        vocab: Token map (defaults to ``Vocabulary.default()``).
        eval_samples: Held-out data scored after the last epoch.
        probe: Batch with an image per entry; mean |gate| per layer is recorded after every epoch.
        checkpoint_path: Where to snapshot the parameters at the end.
        progress: Show a tqdm bar (only on a TTY).

    Returns:
        The TrainingReport.

    Raises:
        ValueError: If ``dataset`` is empty.
        TrainingAbort: If a step produces non-finite values.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    vocab = vocab or Vocabulary.default()
    trainable = set_trainable(params, spec)
    groups = params.groups()
    report = TrainingReport(
        stage=spec.name,
        trainable_parameters=sum(t.data.size for t in trainable.values()),
        total_parameters=params.total_parameters(),
    )
    track_gates = probe is not None and params.config.use_mag and spec.name is not StageName.BASE
    n_batches = math.ceil(len(dataset) / spec.batch_size)
    total_steps = spec.epochs * n_batches
    warmup_steps = int(spec.warmup_fraction * total_steps)
    logger.info("Stage %s: %d trainable / %d total parameters, %d steps",
                spec.name.value, report.trainable_parameters, report.total_parameters, total_steps)

    started = time.perf_counter()
    if track_gates:
        report.gate_trace.append(gate_magnitudes(params, probe).mean(axis=1).tolist())
    state = OptimizerState.create(trainable, groups, spec)
    step = 0
    with tqdm(total=total_steps, desc=spec.name.value, disable=None if progress else True) as bar:
        for epoch in range(spec.epochs):
            order = rng.permutation(len(dataset))
            for start in range(0, len(dataset), spec.batch_size):
                step += 1
                batch = _encode_batch([dataset[i] for i in order[start:start + spec.batch_size]],
                                      spec, params, vocab, rng)
                zero_grad(trainable.values())
                try:
                    loss = autoregressive_loss(_forward(batch, params, spec.name), batch)
                    backward(loss)
                except NumericError as e:
                    raise TrainingAbort(step, str(e)) from e
                grads, grad_norm = clip_grad_norm({name: t.grad for name, t in trainable.items()
                                                   if t.grad is not None}, spec.clip_norm)
                if not math.isfinite(grad_norm):
                    raise TrainingAbort(step, "non-finite gradient norm")
                for name, t in trainable.items():
                    # parameters outside the loss graph still take a (pure decay) update
                    grads.setdefault(name, np.zeros_like(t.data))
                lr = cosine_lr(step, total_steps, spec.base_lr, warmup_steps)
                adamw_step(trainable, grads, state, lr)
                report.steps.append(StepRecord(step=step, epoch=epoch, lr=lr, loss=loss.item(), grad_norm=grad_norm))
                bar.update(1)
                bar.set_postfix(loss=f"{loss.item():.4f}")
            if track_gates:
                report.gate_trace.append(gate_magnitudes(params, probe).mean(axis=1).tolist())
            if report.steps:
                logger.info("Stage %s epoch %d/%d: last loss %.4f", spec.name.value, epoch + 1,
                            spec.epochs, report.steps[-1].loss)

    for _, _, tensor in params.named_parameters():
        tensor.requires_grad = False
        tensor.grad = None
    if eval_samples:
        if spec.name is StageName.BASE:
            report.metrics = {"eval_loss": text_eval_loss(params, eval_samples)}
        else:
            report.metrics = evaluate(params, eval_samples, vocab)
    report.wall_time_s = time.perf_counter() - started
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path, stage=spec.name.value,
                        groups={ParamGroup.BASE} if spec.name is StageName.BASE else None)
    return report


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #
def text_eval_loss(params: PillModelParams, corpus: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """Per-token NLL of the frozen base on a text corpus."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = collate([encode_text(ids, params.config) for ids in corpus[start:start + batch_size]],
                            params.config.d_vis)
            n = int(_shifted_targets(batch.token_ids, batch.loss_mask)[1].sum())
            total += autoregressive_loss(base_model_forward(batch, params), batch).item() * n
            count += n
    if count == 0:
        raise ValueError("corpus has no supervised positions")
    return total / count


def predict_answers(params: PillModelParams, samples: Sequence[SyntheticSample], vocab: Vocabulary,
                    batch_size: int = 64) -> List[str]:
    """
    Greedy decoding restricted to continuations that match one of each sample's options.

    Every candidate ends in EOS, so decoding stops once the generated tokens
    spell out a whole option.
    """
    config = params.config
    predictions: List[str] = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            candidates = [{opt: vocab.encode(opt) + [EOS_ID] for opt in s.options} for s in chunk]
            generated: List[List[int]] = [[] for _ in chunk]
            done: List[Optional[str]] = [None for _ in chunk]
            while not all(done):
                active = [i for i, d in enumerate(done) if d is None]
                sequences = [encode_prompt(chunk[i], vocab, config, generated[i]) for i in active]
                logits = model_forward(collate(sequences, config.d_vis), params).data
                for row, i in enumerate(active):
                    step_logits = logits[row, len(sequences[row]) - 1]
                    j = len(generated[i])
                    allowed = sorted({ids[j] for ids in candidates[i].values() if ids[:j] == generated[i]})
                    generated[i].append(max(allowed, key=lambda tid: step_logits[tid]))
                    for option, ids in candidates[i].items():
                        if ids == generated[i]:
                            done[i] = option
            predictions.extend(done)
    return predictions


def exact_match_accuracy(predictions: Sequence[str], references: Sequence[str]) -> float:
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} references")
    if not references:
        raise ValueError("no references to score")
    return sum(p == r for p, r in zip(predictions, references)) / len(references)


def evaluate(params: PillModelParams, samples: Sequence[SyntheticSample], vocab: Optional[Vocabulary] = None,
             predictions: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """
    Exact-match accuracy overall, per queried attribute and per answer class, with the chance level.

    ``predictions`` bypasses decoding (used to check the metric path).
    """
    vocab = vocab or Vocabulary.default()
    if predictions is None:
        predictions = predict_answers(params, samples, vocab)
    references = [s.answer for s in samples]
    frame = pd.DataFrame({
        "attribute": [s.attribute for s in samples],
        "answer": references,
        "correct": [p == r for p, r in zip(predictions, references)],
    })
    per_attribute = frame.groupby("attribute")["correct"].mean()
    per_class = frame.groupby(["attribute", "answer"])["correct"].mean()
    return {
        "accuracy": exact_match_accuracy(predictions, references),
        "n": len(samples),
        "chance": float(np.mean([1.0 / len(s.options) for s in samples])),
        "per_attribute": {attr: float(acc) for attr, acc in per_attribute.items()},
        "per_class": {f"{attr}={answer}": float(acc) for (attr, answer), acc in per_class.items()},
    }
