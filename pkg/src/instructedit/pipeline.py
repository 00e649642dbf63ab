"""Orchestration of the three-stage edit.

Stage 1 captions the source image and walks it to noise; stage 2 asks the
language model for before/after caption sets and turns their embedding
difference into an edit direction; stage 3 resamples from the inverted
noise with the shifted conditioning and decodes the edited image. Every
failure is labeled with exactly one stage.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .backends.base import BackendSuite, DecodingParams
from .direction import (
    ConditioningEmbedding,
    DirectionEmbedding,
    apply_direction,
    compute_direction,
)
from .prompting import (
    CaptionBundle,
    FewShotExample,
    ParseError,
    VALID_CAPTION_COUNTS,
    VALID_SHOT_COUNTS,
    build_prompt,
    parse_captions,
    sample_few_shot,
)
from .scheduler import LatentState, run_inversion, run_sampling

STAGES = ("captioning", "inversion", "generation", "editing")

LOCK_IN_MODES = ("none", "generated_caption", "user_caption")
PROMPT_STYLES = ("terse", "detailed")
PARSE_FAILURE_POLICIES = ("fallback", "error")


class PipelineError(RuntimeError):
    """An edit failed at one named stage."""

    def __init__(self, stage: str, message: str):
        assert stage in STAGES
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ConfigValidationError(ValueError):
    """Knob values outside the supported grid."""


@dataclass(frozen=True)
class EditConfig:
    """The full knob grid for one edit."""

    n_captions: int = 1
    shots: int = 0
    prompt_style: str = "terse"
    lock_in_mode: str = "none"
    user_caption: Optional[str] = None
    ddim_steps: int = 100
    direction_strength: float = 1.0
    rng_seed: int = 0
    retry_limit: int = 3
    parse_failure_policy: str = "fallback"

    def __post_init__(self) -> None:
        if self.n_captions not in VALID_CAPTION_COUNTS:
            raise ConfigValidationError(f"n_captions must be one of {VALID_CAPTION_COUNTS}")
        if self.shots not in VALID_SHOT_COUNTS:
            raise ConfigValidationError(f"shots must be one of {VALID_SHOT_COUNTS}")
        if self.prompt_style not in PROMPT_STYLES:
            raise ConfigValidationError(f"prompt_style must be one of {PROMPT_STYLES}")
        if self.lock_in_mode not in LOCK_IN_MODES:
            raise ConfigValidationError(f"lock_in_mode must be one of {LOCK_IN_MODES}")
        if self.user_caption is not None and self.lock_in_mode != "user_caption":
            raise ConfigValidationError("user_caption is only allowed with lock_in_mode=user_caption")
        if self.ddim_steps < 1:
            raise ConfigValidationError("ddim_steps must be at least 1")
        if self.retry_limit < 1:
            raise ConfigValidationError("retry_limit must be at least 1")
        if self.parse_failure_policy not in PARSE_FAILURE_POLICIES:
            raise ConfigValidationError(
                f"parse_failure_policy must be one of {PARSE_FAILURE_POLICIES}"
            )
        if not np.isfinite(self.direction_strength):
            raise ConfigValidationError("direction_strength must be finite")

    def fingerprint(self, include_style: bool = True) -> str:
        """Stable knob identifier for grouping and reports."""
        parts = [
            f"{self.shots}shot",
            f"{self.n_captions}cap",
            f"lock={self.lock_in_mode}",
            f"steps={self.ddim_steps}",
            f"strength={self.direction_strength:g}",
        ]
        if include_style:
            parts.insert(0, self.prompt_style)
        return "/".join(parts)

    def require_complete(self) -> None:
        """Checks deferred to edit time: per-item fields may be filled late."""
        if self.lock_in_mode == "user_caption" and not self.user_caption:
            raise ConfigValidationError("lock_in_mode=user_caption requires user_caption")


@dataclass(frozen=True)
class EditRequest:
    image: Image.Image
    instruction: str
    knobs: EditConfig = field(default_factory=EditConfig)

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ConfigValidationError("instruction must be non-empty")
        w, h = self.image.size
        if w <= 0 or h <= 0:
            raise ConfigValidationError("image must have positive dimensions")


@dataclass
class EditResult:
    edited_image: Image.Image
    inverted_reconstruction: Optional[Image.Image]
    caption_used: str
    bundle: CaptionBundle
    direction: DirectionEmbedding
    provenance: dict


def _prepare_image(image: Image.Image, native_size: Optional[int]) -> Image.Image:
    rgb = image.convert("RGB")
    if native_size is not None and rgb.size != (native_size, native_size):
        rgb = rgb.resize((native_size, native_size), Image.LANCZOS)
    return rgb


def _guided_predictor(suite: BackendSuite, scale: float):
    """Predictor for the scheduler; adds classifier-free guidance when scale != 1."""
    unconditional = suite.text_encoder.encode("") if scale != 1.0 else None

    def predictor(latent: np.ndarray, timestep: int, conditioning: ConditioningEmbedding):
        return suite.noise_predictor.predict(
            latent, timestep, conditioning, unconditional=unconditional, guidance_scale=scale
        )

    return predictor


def _generate_bundle(
    instruction: str,
    config: EditConfig,
    suite: BackendSuite,
    pool: Sequence[FewShotExample],
    lock_in: Optional[str],
    lock_source: str,
    fallback_caption: str,
) -> tuple[CaptionBundle, str, int, bool]:
    """Prompt the language model, parse, retry with bumped seeds, then fall back."""
    shots = sample_few_shot(pool, config.shots, config.n_captions, config.rng_seed)
    prompt = build_prompt(instruction, config.n_captions, shots, config.prompt_style, lock_in)
    completion = ""
    for attempt in range(config.retry_limit):
        params = dataclasses.replace(suite.decoding_defaults, rng_seed=config.rng_seed + attempt)
        completion = suite.language_model.complete(prompt, params)
        try:
            bundle = parse_captions(
                completion, config.n_captions, lock_in, lock_source=lock_source
            )
            return bundle, completion, attempt, False
        except ParseError:
            continue
    if config.parse_failure_policy == "error":
        raise ParseError(
            f"no parseable completion after {config.retry_limit} attempts", completion
        )
    # minimal degraded bundle: the stage-1 caption vs. the raw instruction
    fallback = CaptionBundle(
        before=(lock_in if lock_in is not None else fallback_caption,),
        after=(instruction,),
        locked_first_before=lock_in,
        lock_source=lock_source if lock_in is not None else "none",
    )
    return fallback, completion, config.retry_limit, True


def edit(
    request: EditRequest,
    suite: BackendSuite,
    pool: Sequence[FewShotExample] = (),
    predictor_hook=None,
) -> EditResult:
    """Run the full three-stage edit.

    ``predictor_hook`` is the named extension point for attention-level
    guidance schemes: it receives the scheduler-facing predictor for the
    editing stage and must return a drop-in replacement.
    """
    config = request.knobs
    config.require_complete()
    image = _prepare_image(request.image, suite.native_size)

    # stage 1a: caption (or accept the user's)
    try:
        if config.lock_in_mode == "user_caption":
            caption, caption_source = config.user_caption, "user-provided"
        else:
            caption, caption_source = suite.captioner.caption(image), "generated-captioner"
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("captioning", str(exc)) from exc

    # stage 1b: encode and walk to noise under the unshifted caption embedding
    try:
        conditioning = suite.text_encoder.encode(caption)
        schedule = suite.schedule_builder(config.ddim_steps)
        clean = suite.latent_codec.encode(image)
        noise = run_inversion(
            clean, conditioning, _guided_predictor(suite, suite.guidance_invert), schedule
        )
    except Exception as exc:
        raise PipelineError("inversion", str(exc)) from exc

    # stage 2: caption sets -> edit direction
    try:
        lock_in = caption if config.lock_in_mode != "none" else None
        bundle, _completion, retries, degraded = _generate_bundle(
            request.instruction, config, suite, pool, lock_in, caption_source, caption
        )
        before = [suite.text_encoder.encode(text) for text in bundle.before]
        after = [suite.text_encoder.encode(text) for text in bundle.after]
        direction = compute_direction(before, after)
    except Exception as exc:
        raise PipelineError("generation", str(exc)) from exc

    # stage 3: resample from the same noise with the shifted conditioning
    try:
        shifted = apply_direction(conditioning, direction, config.direction_strength)
        sampler = _guided_predictor(suite, suite.guidance_edit)
        if predictor_hook is not None:
            sampler = predictor_hook(sampler)
        edited_latent = run_sampling(noise, shifted, sampler, schedule)
        edited = suite.latent_codec.decode(edited_latent)
        reconstruction_latent = run_sampling(noise, conditioning, sampler, schedule)
        reconstruction = suite.latent_codec.decode(reconstruction_latent)
    except Exception as exc:
        raise PipelineError("editing", str(exc)) from exc

    provenance = {
        "version": __version__,
        "instruction": request.instruction,
        "caption_used": caption,
        "caption_source": caption_source,
        "config": dataclasses.asdict(config),
        "backends": dict(suite.identifiers),
        "schedule_steps": schedule.num_steps,
        "guidance": {"invert": suite.guidance_invert, "edit": suite.guidance_edit},
        "retries": retries,
        "degraded": degraded,
        "image_size": list(image.size),
    }
    return EditResult(
        edited_image=edited,
        inverted_reconstruction=reconstruction,
        caption_used=caption,
        bundle=bundle,
        direction=direction,
        provenance=provenance,
    )


def invert_only(
    image: Image.Image,
    caption: Optional[str],
    suite: BackendSuite,
    ddim_steps: int = 100,
) -> tuple[LatentState, Image.Image, str]:
    """Stage 1 alone: returns the noise latent, a reconstruction, and the caption used."""
    prepared = _prepare_image(image, suite.native_size)
    try:
        used = caption if caption is not None else suite.captioner.caption(prepared)
    except Exception as exc:
        raise PipelineError("captioning", str(exc)) from exc
    try:
        conditioning = suite.text_encoder.encode(used)
        schedule = suite.schedule_builder(ddim_steps)
        clean = suite.latent_codec.encode(prepared)
        noise = run_inversion(
            clean, conditioning, _guided_predictor(suite, suite.guidance_invert), schedule
        )
        resampled = run_sampling(
            noise, conditioning, _guided_predictor(suite, suite.guidance_edit), schedule
        )
        reconstruction = suite.latent_codec.decode(resampled)
    except Exception as exc:
        raise PipelineError("inversion", str(exc)) from exc
    return noise, reconstruction, used


def generate_directions(
    instruction: str,
    config: EditConfig,
    suite: BackendSuite,
    pool: Sequence[FewShotExample] = (),
    caption: Optional[str] = None,
) -> tuple[CaptionBundle, DirectionEmbedding, str]:
    """Stage 2 alone, for caption-quality inspection.

    ``caption`` stands in for the stage-1 caption when a lock-in mode is
    active; with lock_in_mode=user_caption the config's user_caption wins.
    """
    if config.lock_in_mode == "user_caption":
        config.require_complete()
        lock_in, lock_source = config.user_caption, "user-provided"
    elif config.lock_in_mode == "generated_caption":
        if caption is None:
            raise PipelineError("generation", "lock_in_mode=generated_caption needs a caption")
        lock_in, lock_source = caption, "generated-captioner"
    else:
        lock_in, lock_source = None, "none"
    try:
        bundle, completion, _, _ = _generate_bundle(
            instruction, config, suite, pool, lock_in, lock_source,
            caption if caption is not None else instruction,
        )
        before = [suite.text_encoder.encode(text) for text in bundle.before]
        after = [suite.text_encoder.encode(text) for text in bundle.after]
        direction = compute_direction(before, after)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("generation", str(exc)) from exc
    return bundle, direction, completion


def direction_stats(direction: DirectionEmbedding) -> dict:
    """Compact summary for transport and display."""
    matrix = direction.matrix
    return {
        "shape": list(matrix.shape),
        "l2_norm": float(np.linalg.norm(matrix)),
        "max_abs": float(np.abs(matrix).max()),
        "mean": float(matrix.mean()),
    }
