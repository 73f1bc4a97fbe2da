"""
Small shared builders for the unit tests.
"""

import numpy as np

from pill.model import (
    BOS_ID,
    EOS_ID,
    IMAGE_PLACEHOLDER_ID,
    ModelConfig,
    ParamGroup,
    PillModelParams,
    TokenSequence,
    build_interleaved_sequence,
)

TINY = ModelConfig(
    d_model=16,
    n_layers=2,
    n_heads=2,
    d_ffn=32,
    vocab_size=64,
    max_seq_len=16,
    d_vis=12,
    queries_per_image=2,
    adapter_dim=4,
)


def randomize_injections(params: PillModelParams, seed: int = 0, scale: float = 0.3) -> PillModelParams:
    """Replace every non-base block with random values so no injection is an identity."""
    rng = np.random.default_rng(seed)
    for _, group, tensor in params.named_parameters():
        if group is not ParamGroup.BASE:
            tensor.data = rng.normal(0.0, scale, tensor.shape)
    return params


def image_sequence(config: ModelConfig = TINY, seed: int = 0, last_token: int = 8) -> TokenSequence:
    """BOS, two words, one image, a two-token answer and EOS; the answer and EOS are supervised."""
    rng = np.random.default_rng(seed)
    image = rng.normal(size=(config.queries_per_image, config.d_vis))
    tokens = [BOS_ID, 5, 6, IMAGE_PLACEHOLDER_ID, 7, last_token, EOS_ID]
    return build_interleaved_sequence(tokens, [image], config, answer_span=(4, 7))


def text_sequence(config: ModelConfig = TINY) -> TokenSequence:
    tokens = [BOS_ID, 9, 10, 11, 12, EOS_ID]
    return build_interleaved_sequence(tokens, [], config, answer_span=(1, 6))
