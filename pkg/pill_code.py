"""
Command implementations behind main.py.

Every command takes a validated RunConfig and returns a result dict with
``success`` and ``exit_code`` (0 success, 1 training abort, 2 usage or I/O
error) plus command-specific fields. Artifacts are written next to ``out``:
``<out>.report.jsonl`` for training reports and ``<out>.manifest.json`` for
the run manifest.
"""

import json
import logging
import os
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from pill.checkpoint import Checkpoint, CheckpointError, load_checkpoint, restore_params
from pill.model import PillModelParams, gate_magnitudes, init_params
from pill.synthetic_data import (
    SyntheticSample,
    Vocabulary,
    export_corpus,
    export_dataset,
    generate_dataset,
    generate_text_corpus,
    import_corpus,
    import_dataset,
    split_samples,
)
from pill.tensor_core import PillError
from pill.training import StageName, TrainingAbort, build_probe_batch, evaluate, run_stage
from pill_utils import RunConfig, RunManifest, group_digests, hash_file, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_USAGE = 2
BASE_EVAL_FRACTION = 0.1
GATE_PROBE_SIZE = 64


class UsageError(PillError, ValueError):
    """A required flag or input file is missing."""


def _fail(exit_code: int, error: str, **extra: Any) -> Dict[str, Any]:
    logger.error(error)
    return {"success": False, "exit_code": exit_code, "error": error, **extra}


def _run_command(name: str, body: Callable[[RunConfig], Dict[str, Any]], config: RunConfig) -> Dict[str, Any]:
    try:
        result = body(config)
    except TrainingAbort as e:
        return _fail(EXIT_ABORT, f"{name}: {e}", step=e.step)
    except (OSError, ValidationError, PillError, ValueError, KeyError) as e:
        return _fail(EXIT_USAGE, f"{name}: {e}")
    return {"success": True, "exit_code": EXIT_OK, **result}


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise UsageError(f"--{flag} is required")
    return value


def _require_file(value: Optional[str], flag: str) -> str:
    path = _require(value, flag)
    if not os.path.isfile(path):
        raise UsageError(f"input file not found: {path}")
    return path


def _finish_manifest(command: str, config: RunConfig, inputs: List[str], outputs: List[str],
                     params: Optional[PillModelParams] = None) -> RunManifest:
    manifest = RunManifest(
        command=command,
        seed=config.seed,
        config=config.model_dump(mode="json"),
        inputs={path: hash_file(path) for path in inputs},
        outputs={path: hash_file(path) for path in outputs},
        group_digests=group_digests(params) if params is not None else {},
    )
    write_manifest(manifest, f"{config.out}.manifest.json")
    return manifest


def _load_samples(path: str) -> List[SyntheticSample]:
    samples = import_dataset(path)
    if not samples:
        raise UsageError(f"dataset {path} is empty")
    return samples


def params_from_checkpoint(ckpt: Checkpoint, config: RunConfig) -> PillModelParams:
    """
    Model parameters for a training stage.

    A base checkpoint only fixes the frozen base; the injection settings come
    from ``config`` and the injections are freshly initialised from its seed.
    A stage checkpoint is restored as stored.
    """
    if ckpt.stage == StageName.BASE.value:
        model_config = ckpt.config.model_copy(update=config.injection_settings())
        ckpt = Checkpoint(config=model_config, stage=ckpt.stage, blocks=ckpt.blocks, flags=ckpt.flags)
    return restore_params(ckpt, config.seed)


# --------------------------------------------------------------------------- #
# Data commands
# --------------------------------------------------------------------------- #
def cmd_generate_data(config: RunConfig) -> Dict[str, Any]:
    def body(cfg: RunConfig) -> Dict[str, Any]:
        out = _require(cfg.out, "out")
        samples = generate_dataset(cfg.n_samples, cfg.seed, cfg.build_data_config())
        export_dataset(samples, out)
        train, test = split_samples(samples)
        manifest = _finish_manifest("generate-data", cfg, [], [out])
        return {"n_train": len(train), "n_test": len(test), "manifest": manifest.model_dump()}

    return _run_command("generate-data", body, config)


def cmd_generate_corpus(config: RunConfig) -> Dict[str, Any]:
    def body(cfg: RunConfig) -> Dict[str, Any]:
        out = _require(cfg.out, "out")
        vocab = Vocabulary.default()
        export_corpus(generate_text_corpus(cfg.corpus_size, cfg.seed, vocab), vocab, out)
        manifest = _finish_manifest("generate-corpus", cfg, [], [out])
        return {"n_sentences": cfg.corpus_size, "manifest": manifest.model_dump()}

    return _run_command("generate-corpus", body, config)


# --------------------------------------------------------------------------- #
# Training commands
# --------------------------------------------------------------------------- #
def cmd_base_pretrain(config: RunConfig) -> Dict[str, Any]:
    """Pre-train the base decoder on the text corpus at ``--data`` and write a base checkpoint to ``--out``."""
    def body(cfg: RunConfig) -> Dict[str, Any]:
        corpus_path = _require_file(cfg.data, "data")
        out = _require(cfg.out, "out")
        vocab = Vocabulary.default()
        corpus = import_corpus(corpus_path, vocab)
        if not corpus:
            raise UsageError(f"corpus {corpus_path} is empty")
        n_eval = int(len(corpus) * BASE_EVAL_FRACTION)
        train, held_out = corpus[n_eval:], corpus[:n_eval]

        params = init_params(cfg.build_model_config(len(vocab)), cfg.seed)
        report = run_stage(params, train, cfg.stage_spec(StageName.BASE), np.random.default_rng(cfg.seed),
                           vocab, eval_samples=held_out, checkpoint_path=out)
        report.write_jsonl(f"{out}.report.jsonl")
        manifest = _finish_manifest("base-pretrain", cfg, [corpus_path], [out, f"{out}.report.jsonl"], params)
        return {"report": report.summary(), "manifest": manifest.model_dump()}

    return _run_command("base-pretrain", body, config)


def _train_stage(command: str, stage: StageName, cfg: RunConfig) -> Dict[str, Any]:
    ckpt_path = _require_file(cfg.ckpt, "ckpt")
    data_path = _require_file(cfg.data, "data")
    out = _require(cfg.out, "out")
    vocab = Vocabulary.default()

    ckpt = load_checkpoint(ckpt_path)
    if ckpt.config.vocab_size != len(vocab):
        raise CheckpointError(f"checkpoint vocab_size {ckpt.config.vocab_size} != vocabulary size {len(vocab)}")
    params = params_from_checkpoint(ckpt, cfg)
    samples = _load_samples(data_path)
    train, test = split_samples(samples)
    if not train:
        raise UsageError(f"dataset {data_path} has no train split")

    probe = build_probe_batch(test or train, vocab, params, size=GATE_PROBE_SIZE) if params.config.use_mag else None
    report = run_stage(params, train, cfg.stage_spec(stage), np.random.default_rng(cfg.seed), vocab,
                       eval_samples=test or None, probe=probe, checkpoint_path=out)
    report.write_jsonl(f"{out}.report.jsonl")
    manifest = _finish_manifest(command, cfg, [ckpt_path, data_path], [out, f"{out}.report.jsonl"], params)
    return {"report": report.summary(), "manifest": manifest.model_dump()}


def cmd_stage1(config: RunConfig) -> Dict[str, Any]:
    """Modality alignment: train the vision adapters and the projection from a base checkpoint."""
    return _run_command("stage1", lambda cfg: _train_stage("stage1", StageName.STAGE1, cfg), config)


def cmd_stage2(config: RunConfig) -> Dict[str, Any]:
    """Fine-tune every injection from a Stage-1 checkpoint, or from a base checkpoint to skip Stage 1."""
    return _run_command("stage2", lambda cfg: _train_stage("stage2", StageName.STAGE2, cfg), config)


# --------------------------------------------------------------------------- #
# Inspection commands
# --------------------------------------------------------------------------- #
def cmd_eval(config: RunConfig) -> Dict[str, Any]:
    """Option-restricted greedy decoding on the test split (all samples when there is none)."""
    def body(cfg: RunConfig) -> Dict[str, Any]:
        ckpt_path = _require_file(cfg.ckpt, "ckpt")
        data_path = _require_file(cfg.data, "data")
        vocab = Vocabulary.default()
        params = params_from_checkpoint(load_checkpoint(ckpt_path), cfg)
        samples = _load_samples(data_path)
        _, test = split_samples(samples)
        metrics = evaluate(params, test or samples, vocab)
        outputs = []
        if cfg.out:
            with open(cfg.out, "w") as f:
                json.dump(metrics, f, indent=2, sort_keys=True)
            outputs.append(cfg.out)
            _finish_manifest("eval", cfg, [ckpt_path, data_path], outputs, params)
        logger.info("Accuracy %.4f on %d samples (chance %.4f)", metrics["accuracy"], metrics["n"], metrics["chance"])
        return {"metrics": metrics}

    return _run_command("eval", body, config)


def gate_report_frame(params: PillModelParams, samples: List[SyntheticSample], vocab: Vocabulary) -> pd.DataFrame:
    """One row per layer: layer_index, mean_abs_gate, then the per-head mean |gate|."""
    magnitudes = gate_magnitudes(params, build_probe_batch(samples, vocab, params, size=GATE_PROBE_SIZE))
    frame = pd.DataFrame(magnitudes, columns=[f"head_{h}" for h in range(magnitudes.shape[1])])
    frame.insert(0, "mean_abs_gate", magnitudes.mean(axis=1))
    frame.insert(0, "layer_index", np.arange(magnitudes.shape[0]))
    return frame


def cmd_gate_report(config: RunConfig) -> Dict[str, Any]:
    """Per-layer mean |gate| on a probe batch, written as CSV to ``--out`` (stdout when omitted)."""
    def body(cfg: RunConfig) -> Dict[str, Any]:
        ckpt_path = _require_file(cfg.ckpt, "ckpt")
        data_path = _require_file(cfg.data, "data")
        vocab = Vocabulary.default()
        ckpt = load_checkpoint(ckpt_path)
        if not ckpt.config.use_mag:
            raise CheckpointError(f"checkpoint {ckpt_path} has no gate blocks")
        params = params_from_checkpoint(ckpt, cfg)
        frame = gate_report_frame(params, _load_samples(data_path), vocab)
        csv = frame.to_csv(index=False, float_format="%.8f")
        if cfg.out:
            with open(cfg.out, "w") as f:
                f.write(csv)
            _finish_manifest("gate-report", cfg, [ckpt_path, data_path], [cfg.out], params)
        else:
            print(csv, end="")
        return {"rows": frame.to_dict(orient="records")}

    return _run_command("gate-report", body, config)


COMMANDS: Dict[str, Callable[[RunConfig], Dict[str, Any]]] = {
    "generate-data": cmd_generate_data,
    "generate-corpus": cmd_generate_corpus,
    "base-pretrain": cmd_base_pretrain,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "eval": cmd_eval,
    "gate-report": cmd_gate_report,
}
