"""Runtime configuration: checkpoint identifiers, device, guidance, decoding.

Model identifiers live here and only here, so alternate checkpoints can
be swapped without touching code. Precedence is defaults < config file <
explicit overrides; the config file path can also come from the
INSTRUCTEDIT_CONFIG environment variable.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

CONFIG_ENV_VAR = "INSTRUCTEDIT_CONFIG"


class ConfigError(ValueError):
    """Unknown keys or unusable values in a configuration source."""


@dataclass(frozen=True)
class RuntimeConfig:
    """Everything the backends need, with documented defaults.

    device/precision and the image size follow the diffusion checkpoint's
    native setup; guidance scales default to plain conditioning during
    inversion and standard guidance strength while editing.
    """

    diffusion_model: str = "stable-diffusion-v1-5/stable-diffusion-v1-5"
    captioner_model: str = "Salesforce/blip-image-captioning-base"
    language_model: str = "microsoft/phi-2"
    eval_model: str = "openai/clip-vit-base-patch32"
    device: str = "cpu"
    precision: str = "float32"
    image_size: int = 512
    guidance_edit: float = 7.5
    guidance_invert: float = 1.0
    max_new_tokens: int = 256
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ("Instruct:",)
    fake_backends: bool = False
    fake_embed_dim: int = 64
    fake_token_positions: int = 77
    pool_path: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if self.image_size <= 0 or self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.precision not in ("float32", "float16"):
            raise ConfigError(f"precision must be float32 or float16, got {self.precision!r}")


_FIELD_NAMES = {f.name for f in dataclasses.fields(RuntimeConfig)}


def _checked(source: str, values: Mapping[str, Any]) -> dict[str, Any]:
    unknown = set(values) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"{source}: unknown configuration keys {sorted(unknown)}")
    return dict(values)


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RuntimeConfig:
    """Merge defaults, an optional JSON config file, and explicit overrides."""
    merged: dict[str, Any] = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        merged.update(_checked(str(path), file_values))
    if overrides:
        merged.update(_checked("overrides", {k: v for k, v in overrides.items() if v is not None}))
    return RuntimeConfig(**merged)
