"""Latent diffusion driver: VAE round trip, forward noising, DDIM sampling
with classifier-free guidance, and the denoising training loss."""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
from PIL import Image

from .attention import install_probe_processors
from .embeddings import PromptEmbeddingSequence
from .exceptions import InputError, StateError
from .validation import check_finite, check_sequence, load_image


@dataclass(frozen=True)
class LatentState:
    z: torch.Tensor
    timestep: int
    T: int

    def __post_init__(self):
        if not 0 <= self.timestep <= self.T:
            raise InputError(f"timestep {self.timestep} outside [0, {self.T}]")
        check_finite(self.z, "latent")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if not self.guidance_scale >= 0:
            raise InputError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


@dataclass
class SampleResult:
    image: np.ndarray
    latents: torch.Tensor
    trace: list[dict] = field(default_factory=list)


def center_crop_resize(image, size: int) -> Image.Image:
    """Resize the short side to `size` and centre-crop to a square."""
    im = load_image(image)
    w, h = im.size
    scale = size / min(w, h)
    im = im.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
    w, h = im.size
    left, top = (w - size) // 2, (h - size) // 2
    return im.crop((left, top, left + size, top + size))


class DiffusionBackend:
    """Wraps a pretrained U-Net, VAE and noise schedule.

    Timesteps follow the forward-process convention: ``t = 0`` is the clean
    latent and ``t = T`` pure noise, so ``t`` maps to scheduler index ``t - 1``.
    The unconditional guidance branch is the encoded empty prompt.
    """

    def __init__(self, unet: UNet2DConditionModel, vae: AutoencoderKL, scheduler: DDIMScheduler,
                 null_sequence: torch.Tensor, model_tag: str = "sd", device="cpu"):
        self.device = torch.device(device)
        self.unet = unet.to(self.device).eval().requires_grad_(False)
        self.vae = vae.to(self.device).eval().requires_grad_(False)
        self.scheduler = scheduler
        install_probe_processors(self.unet)
        check_sequence(null_sequence, "unconditional sequence")
        self.null_sequence = null_sequence.to(self.device)
        self.model_tag = model_tag
        self._lock = threading.RLock()
        ac = torch.as_tensor(scheduler.alphas_cumprod, dtype=torch.float64)
        self._alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), ac])

    @classmethod
    def from_pretrained(cls, path, null_sequence, device="cpu") -> "DiffusionBackend":
        path = Path(path)
        if not path.exists():
            raise StateError(f"diffusion checkpoint not found at {path}")
        unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet")
        vae = AutoencoderKL.from_pretrained(path, subfolder="vae")
        scheduler = DDIMScheduler.from_pretrained(path, subfolder="scheduler")
        return cls(unet, vae, scheduler, null_sequence, f"sd:{path.name}", device)

    @property
    def T(self) -> int:
        return int(self.scheduler.config.num_train_timesteps)

    @property
    def latent_size(self) -> int:
        return int(self.unet.config.sample_size)

    @property
    def resolution(self) -> int:
        return self.latent_size * 2 ** (len(self.vae.config.block_out_channels) - 1)

    @property
    def scaling_factor(self) -> float:
        return float(self.vae.config.scaling_factor)

    def alpha_bar(self, t: int) -> float:
        return float(self._alpha_bar[t])

    # -- VAE ----------------------------------------------------------------

    def image_tensor(self, images) -> torch.Tensor:
        """Images at the model resolution -> ``(n, 3, H, W)`` in [-1, 1]."""
        if not isinstance(images, (list, tuple)):
            images = [images]
        arrs = []
        for image in images:
            im = load_image(image)
            if im.size != (self.resolution, self.resolution):
                raise InputError(
                    f"expected a {self.resolution}x{self.resolution} image, got {im.size[0]}x{im.size[1]}"
                )
            arrs.append(np.asarray(im, dtype=np.float32) / 127.5 - 1.0)
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).to(self.device)

    def encode_latents(self, images) -> torch.Tensor:
        with torch.no_grad():
            posterior = self.vae.encode(self.image_tensor(images)).latent_dist
            return posterior.mean * self.scaling_factor

    def encode_latent(self, image) -> LatentState:
        """Posterior-mean latent of a single image."""
        return LatentState(self.encode_latents([image])[0], 0, self.T)

    def decode_latents(self, z: torch.Tensor) -> np.ndarray:
        """``(n, 4, h, w)`` latents -> ``(n, H, W, 3)`` uint8 images."""
        with torch.no_grad():
            x = self.vae.decode(z.to(self.device) / self.scaling_factor).sample
        x = ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        return x.permute(0, 2, 3, 1).cpu().numpy()

    # -- forward process ----------------------------------------------------

    def add_noise(self, z0: LatentState | torch.Tensor, t: int, eps: torch.Tensor) -> LatentState:
        z = z0.z if isinstance(z0, LatentState) else z0
        t = int(t)
        if not 0 <= t <= self.T:
            raise InputError(f"timestep {t} outside [0, {self.T}]")
        if eps.shape != z.shape:
            raise InputError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
        if t == 0:
            return LatentState(z, 0, self.T)
        ab = self._alpha_bar[t]
        zt = ab.sqrt().to(z.dtype) * z + (1 - ab).sqrt().to(z.dtype) * eps.to(z)
        return LatentState(zt, t, self.T)

    def _noised(self, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        ab = self._alpha_bar.to(z0.device)[t].to(z0.dtype).view(-1, 1, 1, 1)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps

    # -- denoiser -----------------------------------------------------------

    def predict_noise(self, z: torch.Tensor, scheduler_t, cond: torch.Tensor,
                      cross_attention_kwargs: dict | None = None) -> torch.Tensor:
        """U-Net noise prediction; `scheduler_t` is the 0-based schedule index."""
        if cond.ndim == 2:
            cond = cond[None]
        if cond.shape[0] != z.shape[0]:
            cond = cond.expand(z.shape[0], -1, -1)
        return self.unet(
            z, scheduler_t, encoder_hidden_states=cond.to(z),
            cross_attention_kwargs=cross_attention_kwargs,
        ).sample

    def training_loss(self, z0, cond, generator: torch.Generator | None = None, *,
                      timesteps: torch.Tensor | None = None,
                      noise: torch.Tensor | None = None) -> torch.Tensor:
        """Denoising MSE with ``t ~ U{1..T}`` and ``eps ~ N(0, I)``.

        `cond` is a ``(n, 77, d)`` tensor or a PromptEmbeddingSequence.
        Explicit `timesteps`/`noise` give a fixed-probe evaluation.
        """
        z0 = z0.z[None] if isinstance(z0, LatentState) else z0
        if isinstance(cond, PromptEmbeddingSequence):
            cond = cond.vectors
        n = z0.shape[0]
        if timesteps is None:
            timesteps = torch.randint(1, self.T + 1, (n,), generator=generator)
        if noise is None:
            noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        timesteps = timesteps.to(z0.device)
        noise = noise.to(z0.device)
        zt = self._noised(z0, timesteps, noise)
        pred = self.predict_noise(zt, timesteps - 1, cond)
        return F.mse_loss(pred.float(), noise.float())

    # -- sampling -----------------------------------------------------------

    def initial_noise(self, seed: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(int(seed))
        shape = (1, self.unet.config.in_channels, self.latent_size, self.latent_size)
        return torch.randn(shape, generator=g).to(self.device)

    def sample(self, cond: PromptEmbeddingSequence | torch.Tensor, cfg: SamplerConfig = SamplerConfig(),
               *, uncond: torch.Tensor | None = None, cond_attention_kwargs: dict | None = None,
               return_trace: bool = False, decode: bool = True) -> SampleResult:
        """DDIM sampling with classifier-free guidance.

        ``eps = eps_uncond + s * (eps_cond - eps_uncond)``; `cond_attention_kwargs`
        reach the attention processors on the conditional branch only.
        """
        vectors = cond.vectors if isinstance(cond, PromptEmbeddingSequence) else cond
        check_sequence(vectors, "conditioning")
        vectors = vectors.to(self.device, torch.float32)
        uncond = (self.null_sequence if uncond is None else uncond).to(vectors)

        scheduler = copy.deepcopy(self.scheduler)
        scheduler.set_timesteps(int(cfg.steps), device=self.device)
        z = self.initial_noise(cfg.seed) * scheduler.init_noise_sigma
        step_noise = torch.Generator().manual_seed(int(cfg.seed) + 1)
        trace = []
        with self._lock, torch.no_grad():
            for t in scheduler.timesteps:
                eps_u = self.predict_noise(z, t, uncond)
                eps_c = self.predict_noise(z, t, vectors, cond_attention_kwargs)
                eps = eps_u + cfg.guidance_scale * (eps_c - eps_u)
                if return_trace:
                    trace.append({"t": int(t), "eps_uncond": eps_u, "eps_cond": eps_c, "eps": eps})
                z = scheduler.step(eps, t, z, eta=cfg.eta, generator=step_noise).prev_sample
            image = self.decode_latents(z)[0] if decode else None
        return SampleResult(image, z.cpu(), trace)
