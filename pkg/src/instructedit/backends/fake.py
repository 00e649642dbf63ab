"""Deterministic fake backends for offline testing.

Every fake is a pure function of its inputs and a seed, so full pipeline
runs are bit-reproducible without any model weights. The fake language
model parses the live prompt and answers in the expected completion
format, which keeps end-to-end tests honest about prompt construction.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..direction import ConditioningEmbedding
from ..prompting import CaptionBundle, render_completion
from ..scheduler import LatentState, synthetic_schedule
from .base import (
    BackendError,
    BackendSuite,
    DecodingParams,
    classifier_free_guidance,
)

_ADJECTIVES = ("orange", "sleepy", "small", "wooden", "bright", "old", "striped", "quiet")
_NOUNS = ("cat", "dog", "teddy bear", "balloon", "bicycle", "house", "tree", "boat")
_PLACES = ("a garden", "a street", "a kitchen", "a park", "a beach", "a field")


def stable_seed(*parts: object) -> int:
    """Process-independent 64-bit seed from the string forms of the parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class FakeCaptioner:
    """Captions an image from a hash of its pixels; counts its calls."""

    seed: int = 0
    calls: int = 0

    def caption(self, image: Image.Image) -> str:
        self.calls += 1
        rgb = image.convert("RGB")
        rng = np.random.default_rng(stable_seed("caption", self.seed, rgb.size, rgb.tobytes()))
        adj = _ADJECTIVES[int(rng.integers(len(_ADJECTIVES)))]
        noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
        place = _PLACES[int(rng.integers(len(_PLACES)))]
        return f"a photo of a {adj} {noun} in {place}"


@dataclass
class FakeTextEncoder:
    """Maps text to a fixed-shape matrix seeded by a stable hash of the text."""

    token_positions: int = 77
    embed_dim: int = 64
    seed: int = 0

    def encode(self, text: str) -> ConditioningEmbedding:
        rng = np.random.default_rng(stable_seed("text-encoder", self.seed, text))
        matrix = rng.normal(size=(self.token_positions, self.embed_dim)).astype(np.float32)
        return ConditioningEmbedding(matrix=matrix)


_TERSE_RE = re.compile(r"Given the transformation `(.*?)', generate (\d+)\n", re.S)
_DETAILED_RE = re.compile(r"Employing the specified method `(.*?)', craft (\d+) pairs", re.S)


@dataclass
class FakeLanguageModel:
    """Answers caption-generation prompts with a well-formed completion.

    The live instruction (the last ``Instruct:`` block) is parsed for the
    transformation, the caption count, and the lock-in mode; caption texts
    are templated deterministically from the decoding seed and the prompt.
    """

    calls: int = 0

    def complete(self, prompt: str, params: DecodingParams) -> str:
        self.calls += 1
        if "Instruct:" not in prompt:
            raise BackendError("prompt has no 'Instruct:' marker")
        live = "Instruct:" + prompt.rsplit("Instruct:", 1)[1]
        match = _TERSE_RE.search(live) or _DETAILED_RE.search(live)
        if match is None:
            raise BackendError("prompt matches neither known instruction template")
        transformation, n = match.group(1), int(match.group(2))
        if n not in (1, 2, 4):
            raise BackendError(f"prompt asks for unsupported caption count {n}")

        lock_in = None
        after_only = False
        if live.endswith("Before transformation\n\nCaption 1:"):
            pass
        elif live.endswith("After transformation\n\nCaption 1:"):
            if n != 1 or "Caption 1: " not in live:
                raise BackendError("prompt pins the before side but asks for more than one caption")
            after_only = True
            lock_in = live.rsplit("Caption 1: ", 1)[1].rsplit("\n\nAfter transformation", 1)[0]
        else:
            tail = live.rsplit("Caption 1: ", 1)
            if len(tail) != 2 or "\n" in tail[1]:
                raise BackendError("prompt does not end at a recognized caption cue")
            lock_in = tail[1]

        rng = np.random.default_rng(stable_seed("language-model", params.rng_seed, prompt))

        def invent(kind: str) -> str:
            adj = _ADJECTIVES[int(rng.integers(len(_ADJECTIVES)))]
            noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
            place = _PLACES[int(rng.integers(len(_PLACES)))]
            if kind == "before":
                return f"a {adj} {noun} in {place}"
            return f"a {adj} {noun} in {place}, {transformation.lower()}"

        if lock_in is None:
            before = tuple(invent("before") for _ in range(n))
        else:
            before = (lock_in, *(invent("before") for _ in range(n - 1)))
        after = tuple(invent("after") for _ in range(n))
        bundle = CaptionBundle(
            before=before,
            after=after,
            locked_first_before=lock_in,
            lock_source="generated-captioner" if lock_in is not None else "none",
        )
        assert after_only == (lock_in is not None and n == 1)
        return render_completion(bundle)


@dataclass
class FakeLatentCodec:
    """Lossless-enough image/latent pair: RGB plus luminance, scaled to [-1, 1].

    The latent keeps the image's spatial dimensions, so decode(encode(x))
    preserves size exactly for any input.
    """

    channels: int = 4

    def encode(self, image: Image.Image) -> LatentState:
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
        luma = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        latent = np.concatenate([arr.transpose(2, 0, 1), luma[None]], axis=0)
        return LatentState(latent=latent, timestep=0)

    def decode(self, state: LatentState) -> Image.Image:
        rgb = (np.clip(state.latent[:3], -1.0, 1.0) + 1.0) * 127.5
        return Image.fromarray(np.rint(rgb.transpose(1, 2, 0)).astype(np.uint8), "RGB")


@dataclass
class FakeNoisePredictor:
    """Configurable deterministic noise families.

    ``constant`` ignores everything, ``linear`` scales the latent, and
    ``conditioned`` adds a per-channel projection of the conditioning so
    tests can observe conditioning changes in the output.
    """

    family: str = "conditioned"
    constant: float = 0.0
    k: float = 0.05
    conditioning_scale: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in ("constant", "linear", "conditioned"):
            raise ValueError(f"unknown predictor family {self.family!r}")

    def _epsilon(self, latent: np.ndarray, conditioning: ConditioningEmbedding) -> np.ndarray:
        if self.family == "constant":
            return np.full_like(latent, self.constant)
        if self.family == "linear":
            return (self.k * latent).astype(latent.dtype)
        channels = latent.shape[0]
        pooled = conditioning.matrix.mean(axis=0)
        rng = np.random.default_rng(stable_seed("proj", self.seed, channels, pooled.shape[0]))
        projection = rng.normal(size=(channels, pooled.shape[0])) / np.sqrt(pooled.shape[0])
        bias = (projection @ pooled).astype(latent.dtype)
        return (self.k * latent + self.conditioning_scale * bias[:, None, None]).astype(latent.dtype)

    def predict(
        self,
        latent: np.ndarray,
        timestep: int,
        conditioning: ConditioningEmbedding,
        unconditional: ConditioningEmbedding | None = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray:
        eps = self._epsilon(latent, conditioning)
        if unconditional is None or guidance_scale == 1.0:
            return eps
        return classifier_free_guidance(self._epsilon(latent, unconditional), eps, guidance_scale)


def make_fake_suite(
    seed: int = 0,
    token_positions: int = 77,
    embed_dim: int = 64,
    predictor_family: str = "conditioned",
    guidance_edit: float = 7.5,
    guidance_invert: float = 1.0,
) -> BackendSuite:
    """Assemble a fully deterministic suite; the CI and test path."""
    return BackendSuite(
        captioner=FakeCaptioner(seed=seed),
        text_encoder=FakeTextEncoder(token_positions=token_positions, embed_dim=embed_dim, seed=seed),
        language_model=FakeLanguageModel(),
        latent_codec=FakeLatentCodec(),
        noise_predictor=FakeNoisePredictor(family=predictor_family, seed=seed),
        schedule_builder=synthetic_schedule,
        guidance_edit=guidance_edit,
        guidance_invert=guidance_invert,
        identifiers={
            "captioner": f"fake/captioner#{seed}",
            "text_encoder": f"fake/text-encoder-{token_positions}x{embed_dim}#{seed}",
            "language_model": "fake/language-model",
            "diffusion": f"fake/latent-codec+{predictor_family}-noise#{seed}",
        },
    )
