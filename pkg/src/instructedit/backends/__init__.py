"""Model backends: uniform interfaces, deterministic fakes, real adapters."""

from ..config import RuntimeConfig
from .base import (
    BackendError,
    BackendLoadError,
    BackendSuite,
    DecodingParams,
    classifier_free_guidance,
)
from .fake import (
    FakeCaptioner,
    FakeLanguageModel,
    FakeLatentCodec,
    FakeNoisePredictor,
    FakeTextEncoder,
    make_fake_suite,
    stable_seed,
)


def make_suite(config: RuntimeConfig) -> BackendSuite:
    """Build the suite the config asks for: deterministic fakes or real checkpoints."""
    decoding = DecodingParams(
        max_new_tokens=config.max_new_tokens,
        temperature=config.temperature,
        stop_sequences=config.stop_sequences,
    )
    if config.fake_backends:
        suite = make_fake_suite(
            token_positions=config.fake_token_positions,
            embed_dim=config.fake_embed_dim,
            guidance_edit=config.guidance_edit,
            guidance_invert=config.guidance_invert,
        )
        suite.decoding_defaults = decoding
        return suite
    from .real import load_real_suite

    suite = load_real_suite(config)
    suite.decoding_defaults = decoding
    return suite


__all__ = [
    "BackendError",
    "BackendLoadError",
    "BackendSuite",
    "DecodingParams",
    "FakeCaptioner",
    "FakeLanguageModel",
    "FakeLatentCodec",
    "FakeNoisePredictor",
    "FakeTextEncoder",
    "classifier_free_guidance",
    "make_fake_suite",
    "make_suite",
    "stable_seed",
]
