"""Language-model prompt construction and completion parsing.

Builds the caption-generation prompt from an edit request (template
style, shot count, caption count, optional locked-in first caption) and
parses the model's continuation back into before/after caption lists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

VALID_CAPTION_COUNTS = (1, 2, 4)
VALID_SHOT_COUNTS = (0, 1, 3)
POOL_CAPTIONS_PER_SIDE = 4

SENTINEL = "After transformation"

TERSE_BODY = (
    "Given the transformation `[TRANSFORMATION]', generate [NUMBER]\n"
    "image captions for before and after the transformation."
)
DETAILED_BODY = (
    "Employing the specified method `[TRANSFORMATION]', craft [NUMBER] pairs of "
    "descriptive captions delineating the images both prior to and following the "
    "application of the transformation process, elucidating the changes brought about."
)

_BODIES = {"terse": TERSE_BODY, "detailed": DETAILED_BODY}


class PromptError(ValueError):
    """Invalid arguments to prompt construction."""


class ParseError(ValueError):
    """Completion that does not contain the expected caption structure."""

    def __init__(self, message: str, completion: str):
        self.completion = completion
        super().__init__(message)


@dataclass(frozen=True)
class PromptTemplate:
    """One of the two canonical instruction bodies, with its placeholders."""

    style: str
    body: str

    def __post_init__(self) -> None:
        if self.style not in _BODIES:
            raise PromptError(f"unknown template style {self.style!r}")
        if self.body != _BODIES[self.style]:
            raise PromptError(f"body does not match the canonical {self.style} template")
        for placeholder in ("[TRANSFORMATION]", "[NUMBER]"):
            if self.body.count(placeholder) != 1:
                raise PromptError(f"template must contain {placeholder} exactly once")

    def fill(self, transformation: str, n_captions: int) -> str:
        return self.body.replace("[TRANSFORMATION]", transformation).replace(
            "[NUMBER]", str(n_captions)
        )


TERSE_TEMPLATE = PromptTemplate(style="terse", body=TERSE_BODY)
DETAILED_TEMPLATE = PromptTemplate(style="detailed", body=DETAILED_BODY)


def template_for(style: str) -> PromptTemplate:
    if style == "terse":
        return TERSE_TEMPLATE
    if style == "detailed":
        return DETAILED_TEMPLATE
    raise PromptError(f"unknown template style {style!r}")


@dataclass(frozen=True)
class FewShotExample:
    """A worked caption-generation example: a transformation with paired caption lists.

    Pool entries carry four captions per side; entries trimmed by
    :func:`sample_few_shot` carry fewer. Both sides always have the same
    length and no caption is empty.
    """

    transformation: str
    before_captions: tuple[str, ...]
    after_captions: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "before_captions", tuple(self.before_captions))
        object.__setattr__(self, "after_captions", tuple(self.after_captions))
        if not self.transformation.strip():
            raise PromptError("few-shot example has an empty transformation")
        if len(self.before_captions) != len(self.after_captions):
            raise PromptError("few-shot example sides differ in length")
        if not 1 <= len(self.before_captions) <= POOL_CAPTIONS_PER_SIDE:
            raise PromptError(
                f"few-shot example must carry 1..{POOL_CAPTIONS_PER_SIDE} captions per side"
            )
        if any(not c.strip() for c in self.before_captions + self.after_captions):
            raise PromptError("few-shot example contains an empty caption")


@dataclass(frozen=True)
class CaptionBundle:
    """Ordered before/after caption lists plus lock-in provenance.

    ``lock_source`` is one of ``generated-captioner``, ``user-provided``
    or ``none``; when it is not ``none``, ``before[0]`` equals
    ``locked_first_before``.
    """

    before: tuple[str, ...]
    after: tuple[str, ...]
    locked_first_before: Optional[str] = None
    lock_source: str = "none"

    def __post_init__(self) -> None:
        object.__setattr__(self, "before", tuple(self.before))
        object.__setattr__(self, "after", tuple(self.after))
        if len(self.before) != len(self.after) or not self.before:
            raise PromptError("caption bundle sides must be non-empty and equal length")
        if (self.lock_source == "none") != (self.locked_first_before is None):
            raise PromptError("lock_source and locked_first_before must agree")
        if self.locked_first_before is not None and self.before[0] != self.locked_first_before:
            raise PromptError("first before-caption must equal the locked-in caption")

    @property
    def n_captions(self) -> int:
        return len(self.before)


def _check_n_captions(n_captions: int) -> None:
    if n_captions not in VALID_CAPTION_COUNTS:
        raise PromptError(f"n_captions must be one of {VALID_CAPTION_COUNTS}, got {n_captions}")


def _caption_block(captions: Sequence[str]) -> str:
    return "\n".join(f"Caption {k}: {text}" for k, text in enumerate(captions, start=1))


def _render_shot(shot: FewShotExample, n_captions: int, template: PromptTemplate) -> str:
    before = shot.before_captions[:n_captions]
    after = shot.after_captions[:n_captions]
    return (
        f"Instruct: {template.fill(shot.transformation, n_captions)}\n"
        "Output: Before transformation\n"
        "\n"
        f"{_caption_block(before)}\n"
        "\n"
        f"{SENTINEL}\n"
        "\n"
        f"{_caption_block(after)}"
    )


def build_prompt(
    transformation: str,
    n_captions: int,
    shots: Sequence[FewShotExample],
    style: str = "terse",
    lock_in: Optional[str] = None,
) -> str:
    """Render the full language-model prompt.

    Shot examples are rendered as completed interactions, separated by one
    blank line, ahead of the live instruction. Without a lock-in the live
    instruction ends at the ``Caption 1:`` cue; with one, it ends at the
    locked caption itself (with a single caption requested, the before
    side is fully pinned and the prompt continues down to the after-side
    ``Caption 1:`` cue).
    """
    if not transformation.strip():
        raise PromptError("transformation must be non-empty")
    _check_n_captions(n_captions)
    template = template_for(style)
    for shot in shots:
        if len(shot.before_captions) < n_captions:
            raise PromptError(
                f"shot example carries {len(shot.before_captions)} captions per side, "
                f"needs at least {n_captions}"
            )

    live = (
        f"Instruct: {template.fill(transformation, n_captions)}\n"
        "Output: Before transformation\n"
        "\n"
        "Caption 1:"
    )
    if lock_in is not None:
        live += f" {lock_in}"
        if n_captions == 1:
            live += f"\n\n{SENTINEL}\n\nCaption 1:"

    parts = [_render_shot(shot, n_captions, template) for shot in shots]
    parts.append(live)
    return "\n\n".join(parts)


def _extract_captions(region: str, first_k: int, last_k: int, completion: str) -> list[str]:
    """Pull captions ``first_k..last_k`` out of one side of the completion.

    Caption text runs from its marker to the next marker; text after the
    final required caption is discarded at the next ``Caption`` occurrence,
    if any.
    """
    captions: list[str] = []
    pos = 0
    for k in range(first_k, last_k + 1):
        marker = f"Caption {k}:"
        i = region.find(marker, pos)
        if i < 0:
            raise ParseError(f"marker {marker!r} not found", completion)
        start = i + len(marker)
        if k < last_k:
            nxt = f"Caption {k + 1}:"
            j = region.find(nxt, start)
            if j < 0:
                raise ParseError(f"marker {nxt!r} not found", completion)
            chunk = region[start:j]
            pos = j
        else:
            j = region.find("Caption", start)
            chunk = region[start:j] if j >= 0 else region[start:]
        text = chunk.strip()
        if not text:
            raise ParseError(f"caption {k} is empty", completion)
        captions.append(text)
    return captions


def parse_captions(
    completion: str,
    n_captions: int,
    lock_in: Optional[str] = None,
    *,
    lock_source: str = "generated-captioner",
) -> CaptionBundle:
    """Parse a model continuation into a caption bundle.

    ``completion`` is the text generated after the prompt. A supplied
    ``lock_in`` is prepended as the first before-caption and counts toward
    ``n_captions``.
    """
    _check_n_captions(n_captions)

    if lock_in is not None and n_captions == 1:
        # the prompt already pinned the before side and cued "Caption 1:"
        # on the after side; the continuation holds only after-captions
        after = _extract_captions("Caption 1:" + completion, 1, 1, completion)
        return CaptionBundle(
            before=(lock_in,), after=tuple(after),
            locked_first_before=lock_in, lock_source=lock_source,
        )

    if lock_in is None:
        region = "Caption 1:" + completion  # continuation of the prompt's trailing cue
        first_k = 1
    else:
        region = completion
        first_k = 2

    idx = region.find(SENTINEL)
    if idx < 0:
        raise ParseError(f"sentinel {SENTINEL!r} not found", completion)
    before = _extract_captions(region[:idx], first_k, n_captions, completion)
    after = _extract_captions(region[idx + len(SENTINEL):], 1, n_captions, completion)
    if lock_in is not None:
        before = [lock_in] + before
    return CaptionBundle(
        before=tuple(before),
        after=tuple(after),
        locked_first_before=lock_in,
        lock_source=lock_source if lock_in is not None else "none",
    )


def render_completion(bundle: CaptionBundle) -> str:
    """Render the ideal continuation for the prompt this bundle answers.

    Inverse of :func:`parse_captions` for well-formed bundles; also used
    by the deterministic fake language model.
    """
    locked = bundle.locked_first_before is not None

    def rest(captions: Sequence[str]) -> str:
        return "".join(f"\nCaption {k}: {c}" for k, c in enumerate(captions, start=2))

    after_side = f" {bundle.after[0]}" + rest(bundle.after[1:])
    if locked and bundle.n_captions == 1:
        return after_side
    if locked:
        before_side = rest(bundle.before[1:])
    else:
        before_side = f" {bundle.before[0]}" + rest(bundle.before[1:])
    return f"{before_side}\n\n{SENTINEL}\n\nCaption 1:{after_side}"


def sample_few_shot(
    pool: Sequence[FewShotExample], k: int, n_captions: int, rng_seed: int
) -> list[FewShotExample]:
    """Draw k distinct pool entries, each trimmed to n_captions per side.

    Trimming samples caption indices without replacement and applies the
    same indices to both sides, preserving before/after pairing.
    """
    if k not in VALID_SHOT_COUNTS:
        raise PromptError(f"shot count must be one of {VALID_SHOT_COUNTS}, got {k}")
    _check_n_captions(n_captions)
    if len(pool) < k:
        raise PromptError(f"pool holds {len(pool)} examples, need {k}")
    if k == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(pool), size=k, replace=False)
    shots = []
    for pool_idx in chosen:
        entry = pool[int(pool_idx)]
        if len(entry.before_captions) == n_captions:
            shots.append(entry)
            continue
        if len(entry.before_captions) < n_captions:
            raise PromptError("pool entry carries fewer captions than requested")
        idx = sorted(int(i) for i in rng.choice(len(entry.before_captions), size=n_captions, replace=False))
        shots.append(
            FewShotExample(
                transformation=entry.transformation,
                before_captions=tuple(entry.before_captions[i] for i in idx),
                after_captions=tuple(entry.after_captions[i] for i in idx),
            )
        )
    return shots


def load_few_shot_pool(path: str | Path) -> list[FewShotExample]:
    """Load a JSON-lines pool file; every record must carry 4+4 captions.

    Record shape: {"transformation": str,
                   "before_captions": [str, str, str, str],
                   "after_captions": [str, str, str, str]}
    """
    pool: list[FewShotExample] = []
    errors: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            before = record["before_captions"]
            after = record["after_captions"]
            if len(before) != POOL_CAPTIONS_PER_SIDE or len(after) != POOL_CAPTIONS_PER_SIDE:
                raise PromptError("pool entries must carry exactly four captions per side")
            pool.append(
                FewShotExample(
                    transformation=record["transformation"],
                    before_captions=tuple(before),
                    after_captions=tuple(after),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise PromptError(f"invalid few-shot pool {path}: " + "; ".join(errors))
    return pool
