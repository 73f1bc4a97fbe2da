"""
Configuration, environment and manifest helpers for the pill commands.
"""

import hashlib
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from pill.checkpoint import block_digests, git_blob_hash
from pill.model import AdapterKind, ModelConfig, PillModelParams
from pill.synthetic_data import DataConfig
from pill.training import StageName, TrainStageSpec

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Values each preset puts under the config file; file values and CLI flags override them
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "adapter_dim": 32,
        "stage1_epochs": 3,
        "stage1_lr": 1e-3,
        "stage1_seq_len": 128,
        "stage1_batch_size": 32,
        "stage2_epochs": 20,
        "stage2_lr": 2e-3,
        "stage2_seq_len": 512,
        "stage2_batch_size": 4,
    },
}


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger; the level defaults to PILL_LOG_LEVEL, then INFO."""
    name = (level or os.environ.get("PILL_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT, force=True)


def load_and_validate_env() -> Dict[str, Any]:
    """
    Load environment variables and validate the ones the commands read.

    Returns:
        Dict with success flag and the parsed values, or an error message.
    """
    load_dotenv()

    threads = os.environ.get("PILL_THREADS")
    log_level = os.environ.get("PILL_LOG_LEVEL", "INFO").upper()

    if threads is not None:
        try:
            threads = int(threads)
        except ValueError:
            return {
                "success": False,
                "error": f"PILL_THREADS must be an integer, got '{threads}'"
            }
        if threads < 1:
            return {
                "success": False,
                "error": f"PILL_THREADS must be positive, got {threads}"
            }

    if not isinstance(logging.getLevelName(log_level), int):
        return {
            "success": False,
            "error": f"PILL_LOG_LEVEL '{log_level}' is not a logging level"
        }

    return {
        "success": True,
        "threads": threads,
        "log_level": log_level
    }


class RunConfig(BaseModel):
    """Every setting a command can take from the key=value config file or the CLI."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    preset: Literal["desk", "full"] = "desk"
    seed: int = 0
    out: Optional[str] = None
    data: Optional[str] = None
    ckpt: Optional[str] = None

    # model
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 512
    max_seq_len: int = 32
    d_vis: int = 16
    queries_per_image: int = 4
    adapter_dim: int = 8
    adapter_kind: AdapterKind = AdapterKind.SWIGLU
    use_mag: bool = True
    use_momae: bool = True
    rope_base: float = 10000.0
    init_std: float = 0.02

    # data
    n_samples: int = 5000
    corpus_size: int = 4000
    jitter: float = 0.05
    loud_channel_scale: float = 5.0
    test_fraction: float = 0.2
    disjoint_tuples: bool = False

    # stages
    base_epochs: int = 3
    base_lr: float = 3e-3
    base_batch_size: int = 16
    stage1_epochs: int = 3
    stage1_lr: float = 1e-3
    stage1_seq_len: int = 32
    stage1_batch_size: int = 16
    stage2_epochs: int = 20
    stage2_lr: float = 2e-3
    stage2_seq_len: int = 32
    stage2_batch_size: int = 8
    wrong_answer_prob: float = Field(0.0, ge=0.0, le=1.0)
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def build_model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ffn=self.d_ffn,
            vocab_size=vocab_size,
            max_seq_len=self.max_seq_len,
            d_vis=self.d_vis,
            queries_per_image=self.queries_per_image,
            **self.injection_settings(),
            rope_base=self.rope_base,
            init_std=self.init_std,
        )

    def injection_settings(self) -> Dict[str, Any]:
        return {
            "adapter_dim": self.adapter_dim,
            "adapter_kind": self.adapter_kind,
            "use_mag": self.use_mag,
            "use_momae": self.use_momae,
        }

    def build_data_config(self) -> DataConfig:
        return DataConfig(
            n_samples=self.n_samples,
            d_vis=self.d_vis,
            queries_per_image=self.queries_per_image,
            jitter=self.jitter,
            loud_channel_scale=self.loud_channel_scale,
            test_fraction=self.test_fraction,
            disjoint_tuples=self.disjoint_tuples,
        )

    def stage_spec(self, stage: StageName) -> TrainStageSpec:
        shared = dict(warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay,
                      clip_norm=self.clip_norm)
        if stage is StageName.BASE:
            return TrainStageSpec.base(epochs=self.base_epochs, base_lr=self.base_lr,
                                       batch_size=self.base_batch_size, seq_len=self.max_seq_len, **shared)
        if stage is StageName.STAGE1:
            return TrainStageSpec.stage1(epochs=self.stage1_epochs, base_lr=self.stage1_lr,
                                         seq_len=self.stage1_seq_len, batch_size=self.stage1_batch_size,
                                         wrong_answer_prob=self.wrong_answer_prob, **shared)
        return TrainStageSpec.stage2(epochs=self.stage2_epochs, base_lr=self.stage2_lr,
                                     seq_len=self.stage2_seq_len, batch_size=self.stage2_batch_size,
                                     wrong_answer_prob=self.wrong_answer_prob, **shared)


def load_and_validate_config(path: Optional[str] = None,
                             overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Build a RunConfig from a preset, a key=value file and CLI overrides, in that order.

    Args:
        path: Optional config file in dotenv syntax.
        overrides: Values from CLI flags; None entries are ignored.

    Returns:
        Dict with success flag and the config, or an error message.
    """
    file_values: Dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            return {
                "success": False,
                "error": f"Config file not found: {path}"
            }
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}

    cli_values = {k: v for k, v in (overrides or {}).items() if v is not None}
    preset = cli_values.get("preset", file_values.get("preset", "desk"))
    if preset not in PRESETS:
        return {
            "success": False,
            "error": f"Unknown preset '{preset}' (expected one of {sorted(PRESETS)})"
        }

    values = {**PRESETS[preset], **file_values, **cli_values}
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        return {
            "success": False,
            "error": f"Invalid configuration: {e}"
        }

    return {
        "success": True,
        "config": config
    }


class RunManifest(BaseModel):
    """What a command ran with and what it produced, with git blob hashes of every file."""

    command: str
    seed: int
    config: Dict[str, Any]
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    group_digests: Dict[str, str] = Field(default_factory=dict)
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


def hash_file(path: str) -> str:
    with open(path, "rb") as f:
        return git_blob_hash(f.read())


def group_digests(params: PillModelParams) -> Dict[str, str]:
    """One SHA-1 per parameter group, over the group's block digests in model order."""
    digests = block_digests(params)
    combined: Dict[str, Any] = {}
    for name, group, _ in params.named_parameters():
        combined.setdefault(group.value, hashlib.sha1()).update(f"{name}:{digests[name]}\n".encode("utf-8"))
    return {group: h.hexdigest() for group, h in combined.items()}


def write_manifest(manifest: RunManifest, path: str) -> None:
    with open(path, "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info("Wrote manifest to %s", path)
