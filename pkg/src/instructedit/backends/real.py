"""Adapters over real pretrained checkpoints.

All heavyweight imports are lazy: constructing an adapter pulls in
torch/transformers/diffusers and downloads or loads the named checkpoint,
and any failure surfaces as a BackendLoadError naming the component. One
in-flight call per adapter instance; callers serialize or pool.
"""

from __future__ import annotations

import importlib
from typing import Any, Optional

import numpy as np
from PIL import Image

from ..config import RuntimeConfig
from ..direction import ConditioningEmbedding
from ..scheduler import DiffusionSchedule, LatentState, schedule_from_training
from .base import (
    BackendLoadError,
    BackendSuite,
    DecodingParams,
    classifier_free_guidance,
)


def _require(module: str, component: str) -> Any:
    try:
        return importlib.import_module(module)
    except ImportError as exc:
        raise BackendLoadError(component, f"missing dependency {module!r} ({exc})") from exc


def _torch_dtype(torch: Any, precision: str) -> Any:
    return torch.float16 if precision == "float16" else torch.float32


class BlipCaptioner:
    """Vision-language captioner; emits one caption per image."""

    def __init__(self, model_id: str, device: str = "cpu", precision: str = "float32"):
        transformers = _require("transformers", "captioner")
        torch = _require("torch", "captioner")
        try:
            self.processor = transformers.BlipProcessor.from_pretrained(model_id)
            self.model = transformers.BlipForConditionalGeneration.from_pretrained(
                model_id, torch_dtype=_torch_dtype(torch, precision)
            ).to(device)
            self.model.eval()
        except Exception as exc:
            raise BackendLoadError("captioner", f"{model_id}: {exc}") from exc
        self.device = device
        self.torch = torch

    def caption(self, image: Image.Image) -> str:
        with self.torch.no_grad():
            inputs = self.processor(image.convert("RGB"), return_tensors="pt").to(self.device)
            out = self.model.generate(**inputs, max_new_tokens=40)
            text = self.processor.decode(out[0], skip_special_tokens=True).strip()
        if not text:
            raise BackendLoadError("captioner", "empty caption from checkpoint")
        return text


class ClipTextEncoder:
    """The diffusion checkpoint's own text encoder; full token-sequence output."""

    def __init__(self, model_id: str, device: str = "cpu", precision: str = "float32"):
        transformers = _require("transformers", "text_encoder")
        torch = _require("torch", "text_encoder")
        try:
            self.tokenizer = transformers.CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
            self.encoder = transformers.CLIPTextModel.from_pretrained(
                model_id, subfolder="text_encoder", torch_dtype=_torch_dtype(torch, precision)
            ).to(device)
            self.encoder.eval()
        except Exception as exc:
            raise BackendLoadError("text_encoder", f"{model_id}: {exc}") from exc
        self.device = device
        self.torch = torch

    @property
    def context_length(self) -> int:
        return int(self.tokenizer.model_max_length)

    def encode(self, text: str) -> ConditioningEmbedding:
        with self.torch.no_grad():
            tokens = self.tokenizer(
                text,
                padding="max_length",
                max_length=self.context_length,
                truncation=True,
                return_tensors="pt",
            )
            hidden = self.encoder(tokens.input_ids.to(self.device))[0]
        matrix = hidden[0].float().cpu().numpy().astype(np.float32)
        return ConditioningEmbedding(matrix=matrix)


class CausalLanguageModel:
    """Instruction-following completion with greedy decoding by default."""

    def __init__(self, model_id: str, device: str = "cpu", precision: str = "float32"):
        transformers = _require("transformers", "language_model")
        torch = _require("torch", "language_model")
        try:
            self.tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
            self.model = transformers.AutoModelForCausalLM.from_pretrained(
                model_id, torch_dtype=_torch_dtype(torch, precision)
            ).to(device)
            self.model.eval()
        except Exception as exc:
            raise BackendLoadError("language_model", f"{model_id}: {exc}") from exc
        self.device = device
        self.torch = torch

    def complete(self, prompt: str, params: DecodingParams) -> str:
        torch = self.torch
        torch.manual_seed(params.rng_seed)
        inputs = self.tokenizer(prompt, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model.generate(
                **inputs,
                max_new_tokens=params.max_new_tokens,
                do_sample=params.temperature > 0,
                temperature=params.temperature if params.temperature > 0 else None,
                pad_token_id=self.tokenizer.eos_token_id,
            )
        full = self.tokenizer.decode(out[0], skip_special_tokens=True)
        completion = full[len(prompt):] if full.startswith(prompt) else full
        for stop in params.stop_sequences:
            cut = completion.find(stop)
            if cut >= 0:
                completion = completion[:cut]
        return completion


class DiffusionLatentCodec:
    """VAE image/latent codec of the diffusion checkpoint."""

    def __init__(self, model_id: str, device: str = "cpu", precision: str = "float32"):
        diffusers = _require("diffusers", "diffusion")
        torch = _require("torch", "diffusion")
        try:
            self.vae = diffusers.AutoencoderKL.from_pretrained(
                model_id, subfolder="vae", torch_dtype=_torch_dtype(torch, precision)
            ).to(device)
            self.vae.eval()
        except Exception as exc:
            raise BackendLoadError("diffusion", f"{model_id} vae: {exc}") from exc
        self.scaling = float(self.vae.config.scaling_factor)
        self.device = device
        self.torch = torch

    def encode(self, image: Image.Image) -> LatentState:
        torch = self.torch
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
        tensor = torch.from_numpy(arr.transpose(2, 0, 1))[None].to(
            self.device, dtype=self.vae.dtype
        )
        with torch.no_grad():
            posterior = self.vae.encode(tensor).latent_dist
            latent = posterior.mean * self.scaling  # mode, not a sample: keep encoding deterministic
        return LatentState(latent=latent[0].float().cpu().numpy(), timestep=0)

    def decode(self, state: LatentState) -> Image.Image:
        torch = self.torch
        latent = torch.from_numpy(state.latent)[None].to(self.device, dtype=self.vae.dtype)
        with torch.no_grad():
            image = self.vae.decode(latent / self.scaling).sample
        arr = ((image[0].float().cpu().numpy().transpose(1, 2, 0) + 1.0) * 127.5).clip(0, 255)
        return Image.fromarray(np.rint(arr).astype(np.uint8), "RGB")


class UnetNoisePredictor:
    """Denoiser wrapper with optional classifier-free guidance."""

    def __init__(self, model_id: str, device: str = "cpu", precision: str = "float32"):
        diffusers = _require("diffusers", "diffusion")
        torch = _require("torch", "diffusion")
        try:
            self.unet = diffusers.UNet2DConditionModel.from_pretrained(
                model_id, subfolder="unet", torch_dtype=_torch_dtype(torch, precision)
            ).to(device)
            self.unet.eval()
        except Exception as exc:
            raise BackendLoadError("diffusion", f"{model_id} unet: {exc}") from exc
        self.device = device
        self.torch = torch

    def _epsilon(self, latent: np.ndarray, timestep: int, conditioning: ConditioningEmbedding) -> np.ndarray:
        torch = self.torch
        sample = torch.from_numpy(latent)[None].to(self.device, dtype=self.unet.dtype)
        context = torch.from_numpy(conditioning.matrix)[None].to(self.device, dtype=self.unet.dtype)
        with torch.no_grad():
            eps = self.unet(sample, timestep, encoder_hidden_states=context).sample
        return eps[0].float().cpu().numpy()

    def predict(
        self,
        latent: np.ndarray,
        timestep: int,
        conditioning: ConditioningEmbedding,
        unconditional: Optional[ConditioningEmbedding] = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray:
        eps_cond = self._epsilon(latent, timestep, conditioning)
        if unconditional is None or guidance_scale == 1.0:
            return eps_cond
        eps_uncond = self._epsilon(latent, timestep, unconditional)
        return classifier_free_guidance(eps_uncond, eps_cond, guidance_scale)


def _training_alphas(model_id: str) -> np.ndarray:
    diffusers = _require("diffusers", "diffusion")
    try:
        sched_config = diffusers.DDIMScheduler.from_pretrained(model_id, subfolder="scheduler").config
    except Exception as exc:
        raise BackendLoadError("diffusion", f"{model_id} scheduler config: {exc}") from exc
    if sched_config.beta_schedule == "scaled_linear":
        betas = (
            np.linspace(
                sched_config.beta_start**0.5,
                sched_config.beta_end**0.5,
                sched_config.num_train_timesteps,
            )
            ** 2
        )
    elif sched_config.beta_schedule == "linear":
        betas = np.linspace(
            sched_config.beta_start, sched_config.beta_end, sched_config.num_train_timesteps
        )
    else:
        raise BackendLoadError(
            "diffusion", f"unsupported beta schedule {sched_config.beta_schedule!r}"
        )
    return np.cumprod(1.0 - betas)


def load_captioner(config: RuntimeConfig) -> BlipCaptioner:
    return BlipCaptioner(config.captioner_model, config.device, config.precision)


def load_text_encoder(config: RuntimeConfig) -> ClipTextEncoder:
    return ClipTextEncoder(config.diffusion_model, config.device, config.precision)


def load_language_model(config: RuntimeConfig) -> CausalLanguageModel:
    return CausalLanguageModel(config.language_model, config.device, config.precision)


def load_diffusion(config: RuntimeConfig) -> tuple[DiffusionLatentCodec, UnetNoisePredictor, np.ndarray]:
    codec = DiffusionLatentCodec(config.diffusion_model, config.device, config.precision)
    predictor = UnetNoisePredictor(config.diffusion_model, config.device, config.precision)
    alphas = _training_alphas(config.diffusion_model)
    return codec, predictor, alphas


def load_real_suite(config: RuntimeConfig) -> BackendSuite:
    """Assemble the full suite from real checkpoints named in the config."""
    captioner = load_captioner(config)
    text_encoder = load_text_encoder(config)
    language_model = load_language_model(config)
    codec, predictor, alphas = load_diffusion(config)

    def build_schedule(num_steps: int) -> DiffusionSchedule:
        return schedule_from_training(alphas, num_steps)

    return BackendSuite(
        captioner=captioner,
        text_encoder=text_encoder,
        language_model=language_model,
        latent_codec=codec,
        noise_predictor=predictor,
        schedule_builder=build_schedule,
        guidance_edit=config.guidance_edit,
        guidance_invert=config.guidance_invert,
        native_size=config.image_size,
        identifiers={
            "captioner": config.captioner_model,
            "text_encoder": config.diffusion_model,
            "language_model": config.language_model,
            "diffusion": config.diffusion_model,
        },
    )
