"""Shared contracts for the four pretrained-model roles.

A BackendSuite bundles a captioner, a text encoder, a language model and
a diffusion pair (latent codec + noise predictor) behind small uniform
interfaces, so the pipeline runs identically against real checkpoints and
the deterministic fakes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
from PIL import Image

from ..direction import ConditioningEmbedding
from ..scheduler import DiffusionSchedule, LatentState


class BackendError(RuntimeError):
    """A backend call failed."""


class BackendLoadError(BackendError):
    """A backend could not be constructed; names the failing component."""

    def __init__(self, component: str, reason: str):
        self.component = component
        super().__init__(f"failed to load {component}: {reason}")


@dataclass(frozen=True)
class DecodingParams:
    """Language-model decoding controls."""

    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ("Instruct:",)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


class Captioner(Protocol):
    def caption(self, image: Image.Image) -> str: ...


class TextEncoder(Protocol):
    def encode(self, text: str) -> ConditioningEmbedding: ...


class LanguageModel(Protocol):
    def complete(self, prompt: str, params: DecodingParams) -> str: ...


class LatentCodec(Protocol):
    def encode(self, image: Image.Image) -> LatentState: ...

    def decode(self, state: LatentState) -> Image.Image: ...


class NoisePredictor(Protocol):
    def predict(
        self,
        latent: np.ndarray,
        timestep: int,
        conditioning: ConditioningEmbedding,
        unconditional: Optional[ConditioningEmbedding] = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray: ...


def classifier_free_guidance(
    eps_unconditional: np.ndarray, eps_conditional: np.ndarray, scale: float
) -> np.ndarray:
    return eps_unconditional + scale * (eps_conditional - eps_unconditional)


@dataclass
class BackendSuite:
    """The four model interfaces plus the schedule the diffusion checkpoint implies.

    ``guidance_edit`` applies when sampling the edited image,
    ``guidance_invert`` when walking the image to noise; both are
    configuration, not behavior baked into the predictor.
    """

    captioner: Captioner
    text_encoder: TextEncoder
    language_model: LanguageModel
    latent_codec: LatentCodec
    noise_predictor: NoisePredictor
    schedule_builder: Callable[[int], DiffusionSchedule]
    guidance_edit: float = 7.5
    guidance_invert: float = 1.0
    decoding_defaults: DecodingParams = field(default_factory=DecodingParams)
    # images are resized to this square before encoding when set (real codecs
    # only accept their checkpoint's native resolution); fakes take any size
    native_size: Optional[int] = None
    identifiers: dict[str, str] = field(default_factory=dict)
