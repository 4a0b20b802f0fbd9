"""End-to-end image-to-prompt pipeline: encoders + converter + sampler."""

from __future__ import annotations

import numpy as np
import torch

from .clip_adapter import ClipAdapter
from .converter import (
    ConverterConfig,
    assemble_batch,
    assemble_pseudo_prompt,
    combine_edit,
    convert_embeddings,
    thresholded_pseudo_inverse,
)
from .diffusion import DiffusionBackend, SampleResult, SamplerConfig, center_crop_resize
from .embeddings import ConvertedToken, PromptEmbeddingSequence
from .exceptions import InputError


def derive_seed(base_seed: int, index: int) -> int:
    """Per-sample seed from ``(base, index)``; extending a grid keeps old seeds."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


class SDIPCPipeline:
    """Closed-form image-to-prompt conversion wired to a diffusion backend.

    ``deep_prompts`` and ``fc`` are populated by the tuner; when absent the
    pipeline is plain closed-form conversion.
    """

    def __init__(self, clip: ClipAdapter, backend: DiffusionBackend,
                 converter_cfg: ConverterConfig = ConverterConfig()):
        if clip.text_dim != backend.unet.config.cross_attention_dim:
            raise InputError(
                f"text width {clip.text_dim} != U-Net cross-attention width "
                f"{backend.unet.config.cross_attention_dim}"
            )
        self.clip = clip
        self.backend = backend
        self.converter_cfg = converter_cfg
        self.inverse = thresholded_pseudo_inverse(clip.get_projection("text"), converter_cfg.threshold)
        self.sos = clip.get_sos_embedding().to(backend.device)
        self.deep_prompts = None
        self.fc = None

    @classmethod
    def tiny(cls, seed: int = 0, converter_cfg: ConverterConfig = ConverterConfig()) -> "SDIPCPipeline":
        from . import tiny

        clip = ClipAdapter(tiny.tiny_clip_model(seed), model_tag=f"tiny-clip-{seed}")
        null = clip.encode_text("").tokens
        backend = DiffusionBackend(
            tiny.tiny_unet(seed), tiny.tiny_vae(seed), tiny.sd_scheduler(), null,
            model_tag=f"tiny-sd-{seed}",
        )
        return cls(clip, backend, converter_cfg)

    @classmethod
    def from_pretrained(cls, clip_path, sd_path, device="cpu",
                        converter_cfg: ConverterConfig = ConverterConfig()) -> "SDIPCPipeline":
        clip = ClipAdapter.from_pretrained(clip_path, device=device)
        null = clip.encode_text("").tokens
        backend = DiffusionBackend.from_pretrained(sd_path, null, device=device)
        return cls(clip, backend, converter_cfg)

    @property
    def model_tags(self) -> dict:
        return {"clip": self.clip.model_tag, "sd": self.backend.model_tag}

    # -- conversion ---------------------------------------------------------

    def convert(self, projected: torch.Tensor) -> torch.Tensor:
        """``(n, d_c)`` projected image embeddings -> ``(n, d_t)`` tokens."""
        if self.fc is not None:
            norms = projected.norm(dim=-1, keepdim=True)
            if bool((norms == 0).any()):
                raise InputError("cannot convert a zero-norm image embedding")
            return (self.converter_cfg.kappa / norms) * self.fc(projected)
        return convert_embeddings(projected, self.inverse, self.converter_cfg.kappa)

    def condition_from_pixels(self, pixel_values: torch.Tensor) -> torch.Tensor:
        """Differentiable ``(n, 77, d_t)`` pseudo-prompts from CLIP pixels."""
        _, projected = self.clip.image_features(pixel_values)
        return assemble_batch(self.sos, self.convert(projected))

    def converted_token(self, image) -> ConvertedToken:
        visual = self.clip.encode_image(image)
        with torch.no_grad():
            emb = self.convert(visual.projected[None].to(self.backend.device))[0]
        return ConvertedToken(emb.cpu(), visual)

    def image_prompt(self, image) -> PromptEmbeddingSequence:
        return assemble_pseudo_prompt(self.sos.cpu(), self.converted_token(image))

    def text_prompt(self, text: str) -> PromptEmbeddingSequence:
        return PromptEmbeddingSequence.from_text(self.clip.encode_text(text))

    def edit_prompt(self, image, text: str, alpha: float = 0.9) -> PromptEmbeddingSequence:
        if not text or not text.strip():
            raise InputError("edit text must be non-empty")
        return combine_edit(self.converted_token(image), self.clip.encode_text(text), alpha)

    # -- generation ---------------------------------------------------------

    def generate(self, cond: PromptEmbeddingSequence, cfg: SamplerConfig = SamplerConfig(),
                 **kwargs) -> SampleResult:
        return self.backend.sample(cond, cfg, **kwargs)

    def variate(self, image, n_samples: int = 4, cfg: SamplerConfig = SamplerConfig()) -> list[SampleResult]:
        cond = self.image_prompt(image)
        return [
            self.generate(cond, SamplerConfig(cfg.steps, cfg.guidance_scale, cfg.eta, derive_seed(cfg.seed, i)))
            for i in range(n_samples)
        ]

    def prepare_target(self, image):
        """Resize/crop an arbitrary image to the diffusion resolution."""
        return center_crop_resize(image, self.backend.resolution)
