"""Parameter-efficient tuning of the image-to-prompt pipeline.

Trainable parameters are the U-Net cross-attention key/value projections and
per-layer prompt tokens in the CLIP image transformer; the pseudo-inverse
stays frozen. Three modes share one loop:

* ``ft``           -- ~100 same-domain images, conversion loss + text loss
* ``ct``           -- a handful of reference images, conversion loss only
* ``fc_ablation``  -- ``ft`` with the inverse replaced by a learnable affine map
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .datasets import PRESETS, Manifest, TrainingPair, check_pairs, make_ab_pairs
from .exceptions import ConfigError, InputError, IntegrityError
from .pipeline import SDIPCPipeline

logger = logging.getLogger(__name__)

MODES = ("ft", "ct", "fc_ablation")
CT_ITERATIONS = 30
CT_LEARNING_RATE = 5e-6
FT_LEARNING_RATE = 1e-5
PROBE_EPOCH = 10**9  # pair draw reserved for the fixed probe, never a training epoch

_UNET_KV = re.compile(r"^unet\.(.+)\.to_[kv]\.weight$")
_PROMPT = re.compile(r"^deep_prompts\.tokens\.\d+$")
_FC = re.compile(r"^fc\.(weight|bias)$")


@dataclass
class TuningConfig:
    mode: str = "ft"
    learning_rate: float = FT_LEARNING_RATE
    schedule: str = "cosine"
    epochs_or_iters: int = 100
    use_text_regularizer: bool = True
    deep_prompt_tokens_per_layer: int = 8
    ab_training: bool = False
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.01
    prompt_init_std: float = 0.0
    probe_size: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown tuning mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}; valid: cosine, constant")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs_or_iters < 1:
            raise ConfigError("epochs_or_iters must be >= 1")
        if self.batch_size < 1 or self.deep_prompt_tokens_per_layer < 0:
            raise ConfigError("batch_size must be >= 1 and prompt tokens >= 0")
        if self.mode == "ct" and self.use_text_regularizer:
            raise ConfigError("customization trains on the conversion loss only")

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "TuningConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(sorted(PRESETS))}")
        base = dict(mode="ft", learning_rate=FT_LEARNING_RATE, schedule="cosine",
                    epochs_or_iters=PRESETS[preset]["epochs"])
        return cls(**{**base, **overrides})

    @classmethod
    def for_customization(cls, **overrides) -> "TuningConfig":
        base = dict(mode="ct", learning_rate=CT_LEARNING_RATE, schedule="constant",
                    epochs_or_iters=CT_ITERATIONS, use_text_regularizer=False, ab_training=False)
        return cls(**{**base, **overrides})


# -- deep prompts ---------------------------------------------------------------

class DeepPrompts(nn.Module):
    """Learnable tokens attended to by every layer of the CLIP image transformer.

    Each layer's self-attention sees its own ``n_tokens`` extra keys/values
    through a separate softmax whose output is added to the layer's attention
    output. Tokens start at zero, where the extra term vanishes exactly, so
    the tuned encoder begins at the closed-form solution; the value path still
    carries gradient to the tokens from the first step.
    """

    def __init__(self, n_layers: int, n_tokens: int, dim: int, init_std: float = 0.0, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.tokens = nn.ParameterList(
            nn.Parameter(torch.randn(n_tokens, dim, generator=g) * init_std) for _ in range(n_layers)
        )
        self.n_tokens = n_tokens
        self._handles = []

    def _hook(self, layer: int):
        def hook(module, args, kwargs, output):
            x = kwargs.get("hidden_states", args[0] if args else None)
            attn_out, weights = output
            p = self.tokens[layer].to(x)
            b, n, d = x.shape
            h, hd = module.num_heads, module.head_dim
            q = module.q_proj(x).view(b, n, h, hd).transpose(1, 2)
            k = F.linear(p, module.k_proj.weight).view(-1, h, hd).transpose(0, 1)
            v = F.linear(p, module.v_proj.weight).view(-1, h, hd).transpose(0, 1)
            a = torch.softmax(q @ k.transpose(-1, -2) * module.scale, dim=-1)
            ctx = (a @ v).transpose(1, 2).reshape(b, n, d)
            return attn_out + F.linear(ctx, module.out_proj.weight), weights
        return hook

    def attach(self, vision_model) -> "DeepPrompts":
        self.detach()
        if self.n_tokens == 0:
            return self
        layers = vision_model.encoder.layers
        if len(layers) != len(self.tokens):
            raise InputError(f"prompts built for {len(self.tokens)} layers, encoder has {len(layers)}")
        for i, layer in enumerate(layers):
            self._handles.append(
                layer.self_attn.register_forward_hook(self._hook(i), with_kwargs=True)
            )
        return self

    def detach(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []


def inject_deep_prompts(pipeline: SDIPCPipeline, n_tokens: int, init_std: float = 0.0,
                        seed: int = 0) -> DeepPrompts:
    """Attach `n_tokens` prompts per layer to the pipeline's image transformer."""
    if n_tokens < 0:
        raise InputError("n_tokens must be >= 0")
    vision = pipeline.clip.vision_model
    capacity = vision.config.num_positions if hasattr(vision.config, "num_positions") else (
        (vision.config.image_size // vision.config.patch_size) ** 2 + 1
    )
    if n_tokens > capacity:
        raise InputError(f"{n_tokens} prompt tokens exceed the encoder's {capacity} positions")
    if pipeline.deep_prompts is not None:
        pipeline.deep_prompts.detach()
    prompts = DeepPrompts(
        len(vision.encoder.layers), n_tokens, vision.config.hidden_size, init_std, seed
    ).to(pipeline.backend.device)
    pipeline.deep_prompts = prompts.attach(vision)
    return prompts


def make_fc_converter(pipeline: SDIPCPipeline) -> nn.Linear:
    """Affine map initialised at the frozen pseudo-inverse (zero bias)."""
    d_t, d_c = pipeline.inverse.matrix.shape
    fc = nn.Linear(d_c, d_t).to(pipeline.backend.device)
    with torch.no_grad():
        fc.weight.copy_(pipeline.inverse.as_tensor(fc.weight.dtype, fc.weight.device))
        fc.bias.zero_()
    pipeline.fc = fc
    return fc


# -- trainable set ---------------------------------------------------------------

def named_trainables(pipeline: SDIPCPipeline) -> dict[str, nn.Parameter]:
    """Cross-attention K/V weights, deep prompt tokens and (ablation) the FC map."""
    params = {}
    for name, module in pipeline.backend.unet.named_modules():
        if getattr(module, "is_cross_attention", False):
            params[f"unet.{name}.to_k.weight"] = module.to_k.weight
            params[f"unet.{name}.to_v.weight"] = module.to_v.weight
    if pipeline.deep_prompts is not None:
        for i, p in enumerate(pipeline.deep_prompts.tokens):
            params[f"deep_prompts.tokens.{i}"] = p
    if pipeline.fc is not None:
        params["fc.weight"] = pipeline.fc.weight
        params["fc.bias"] = pipeline.fc.bias
    return params


def build_trainable_set(pipeline: SDIPCPipeline) -> list[str]:
    return list(named_trainables(pipeline))


def frozen_checksum(pipeline: SDIPCPipeline) -> str:
    """SHA-256 over every parameter outside the trainable set."""
    trainable = {id(p) for p in named_trainables(pipeline).values()}
    h = hashlib.sha256()
    modules = {"unet": pipeline.backend.unet, "vae": pipeline.backend.vae, "clip": pipeline.clip.model}
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            if id(p) in trainable:
                continue
            h.update(f"{prefix}.{name}".encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    h.update(np.ascontiguousarray(pipeline.inverse.matrix).tobytes())
    return h.hexdigest()


# -- delta checkpoints ----------------------------------------------------------------

def _allowed(name: str, mode: str) -> bool:
    if _UNET_KV.match(name) or _PROMPT.match(name):
        return True
    return mode == "fc_ablation" and bool(_FC.match(name))


@dataclass
class TuningDelta:
    tensors: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        mode = self.metadata.get("mode", "ft")
        bad = [n for n in self.tensors if not _allowed(n, mode)]
        if bad:
            raise IntegrityError(f"delta holds parameters outside the trainable set: {bad[:5]}")

    @property
    def kv_weights(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, t in self.tensors.items():
            m = _UNET_KV.match(name)
            if m:
                k = self.tensors[f"unet.{m.group(1)}.to_k.weight"]
                v = self.tensors[f"unet.{m.group(1)}.to_v.weight"]
                out[m.group(1)] = (k, v)
        return out

    @property
    def deep_prompts(self) -> list[torch.Tensor]:
        keys = sorted((n for n in self.tensors if _PROMPT.match(n)), key=lambda n: int(n.rsplit(".", 1)[1]))
        return [self.tensors[k] for k in keys]

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().cpu().to(torch.float32).contiguous() for k, v in self.tensors.items()}
        save_file(tensors, directory / "delta.safetensors")
        (directory / "delta.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TuningDelta":
        directory = Path(directory)
        weights, meta = directory / "delta.safetensors", directory / "delta.json"
        if not weights.is_file() or not meta.is_file():
            raise ConfigError(f"{directory} is not a delta checkpoint (need delta.safetensors + delta.json)")
        return cls(load_file(weights), json.loads(meta.read_text()))

    def __eq__(self, other):
        if not isinstance(other, TuningDelta):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.tensors.keys() == other.tensors.keys()
            and all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def apply_delta(pipeline: SDIPCPipeline, delta: TuningDelta) -> TuningDelta:
    """Overwrite the named trainables; returns a delta that undoes the change.

    Prompts or an FC map created here are listed under ``remove`` in the
    returned delta, so applying it restores the pipeline's original structure.
    """
    tags = delta.metadata.get("base_models")
    if tags is not None and tags != pipeline.model_tags:
        raise ConfigError(f"delta was trained on {tags}, pipeline has {pipeline.model_tags}")
    mode = delta.metadata.get("mode", "ft")

    created = []
    prompts = delta.deep_prompts
    if prompts:
        n = prompts[0].shape[0]
        if pipeline.deep_prompts is None or pipeline.deep_prompts.n_tokens != n:
            if pipeline.deep_prompts is None:
                created.append("deep_prompts")
            inject_deep_prompts(pipeline, n)
    if any(_FC.match(k) for k in delta.tensors) and pipeline.fc is None:
        created.append("fc")
        make_fc_converter(pipeline)

    current = named_trainables(pipeline)
    unknown = [k for k in delta.tensors if k not in current]
    if unknown:
        raise IntegrityError(f"delta names unknown parameters: {unknown[:5]}")
    old = {}
    with torch.no_grad():
        for name, value in delta.tensors.items():
            param = current[name]
            if param.shape != value.shape:
                raise IntegrityError(f"{name}: shape {tuple(value.shape)} != {tuple(param.shape)}")
            if not (("deep_prompts" in created and _PROMPT.match(name)) or ("fc" in created and _FC.match(name))):
                old[name] = param.detach().clone().cpu()
            param.copy_(value.to(param))

    for item in delta.metadata.get("remove", []):
        if item == "deep_prompts" and pipeline.deep_prompts is not None:
            pipeline.deep_prompts.detach()
            pipeline.deep_prompts = None
        elif item == "fc":
            pipeline.fc = None
    return TuningDelta(old, {"mode": mode, "base_models": pipeline.model_tags, "remove": created})


# -- training -------------------------------------------------------------------------

def _lr_lambda(schedule: str, total: int):
    if schedule == "constant":
        return lambda step: 1.0
    return lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Tuner:
    """Owns the optimiser state for one tuning run on a pipeline."""

    def __init__(self, pipeline: SDIPCPipeline, cfg: TuningConfig, total_steps: int):
        self.pipe = pipeline
        self.cfg = cfg
        if cfg.deep_prompt_tokens_per_layer and (
            pipeline.deep_prompts is None
            or pipeline.deep_prompts.n_tokens != cfg.deep_prompt_tokens_per_layer
        ):
            inject_deep_prompts(pipeline, cfg.deep_prompt_tokens_per_layer, cfg.prompt_init_std, cfg.seed)
        if cfg.mode == "fc_ablation" and pipeline.fc is None:
            make_fc_converter(pipeline)
        self.params = named_trainables(pipeline)
        for p in self.params.values():
            p.requires_grad_(True)
        self.optimizer = torch.optim.AdamW(
            self.params.values(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, _lr_lambda(cfg.schedule, max(total_steps, 1))
        )
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self._pixels: dict[str, torch.Tensor] = {}
        self._latents: dict[str, torch.Tensor] = {}
        self.history: list[dict] = []

    def _cached(self, paths: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        missing = [p for p in dict.fromkeys(paths) if p not in self._pixels]
        if missing:
            pixels = self.pipe.clip.preprocess(missing)
            targets = [self.pipe.prepare_target(p) for p in missing]
            latents = self.pipe.backend.encode_latents(targets)
            for i, p in enumerate(missing):
                self._pixels[p] = pixels[i]
                self._latents[p] = latents[i]
        return (torch.stack([self._pixels[p] for p in paths]),
                torch.stack([self._latents[p] for p in paths]))

    def loss_cnvrt(self, pairs: list[TrainingPair], *, timesteps=None, noise=None) -> torch.Tensor:
        """Denoising loss on the target latents conditioned on the converted reference."""
        pixels, _ = self._cached([p.x_ref for p in pairs])
        _, z0 = self._cached([p.x_target for p in pairs])
        cond = self.pipe.condition_from_pixels(pixels)
        return self.pipe.backend.training_loss(z0, cond, self.generator, timesteps=timesteps, noise=noise)

    def loss_text(self, images: list[str], captions: list[str]) -> torch.Tensor:
        if any(not c for c in captions):
            raise InputError("text regularisation needs non-empty captions")
        _, z0 = self._cached(images)
        tokens, _, _ = self.pipe.clip.text_features(captions)
        return self.pipe.backend.training_loss(z0, tokens, self.generator)

    def step(self, pairs: list[TrainingPair]) -> dict:
        self.optimizer.zero_grad(set_to_none=True)
        l_cnvrt = self.loss_cnvrt(pairs)
        total = l_cnvrt
        record = {"loss_cnvrt": l_cnvrt.item()}
        if self.cfg.use_text_regularizer:
            l_text = self.loss_text([p.x_target for p in pairs], [p.caption or "" for p in pairs])
            total = total + l_text
            record["loss_text"] = l_text.item()
        total.backward()
        self.optimizer.step()
        self.scheduler.step()
        record["loss"] = total.item()
        record["lr"] = self.scheduler.get_last_lr()[0]
        return record

    def probe(self, pairs: list[TrainingPair], seed: int = 12345, repeats: int = 4) -> float:
        """Conversion loss on fixed timesteps and noise; comparable across steps."""
        pairs = list(pairs) * repeats
        g = torch.Generator().manual_seed(seed)
        _, z0 = self._cached([p.x_target for p in pairs])
        t = torch.randint(1, self.pipe.backend.T + 1, (len(pairs),), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        with torch.no_grad():
            return self.loss_cnvrt(pairs, timesteps=t, noise=eps).item()

    def delta(self, extra_meta: dict | None = None) -> TuningDelta:
        tensors = {k: v.detach().cpu().clone() for k, v in self.params.items()}
        meta = {
            "mode": self.cfg.mode,
            "config": asdict(self.cfg),
            "base_models": self.pipe.model_tags,
            **(extra_meta or {}),
        }
        return TuningDelta(tensors, meta)

    def finish(self) -> None:
        for p in self.params.values():
            p.requires_grad_(False)


@dataclass
class TuningResult:
    delta: TuningDelta
    history: list[dict]
    fc_matrix: torch.Tensor | None = None


def check_preset(manifest: Manifest, preset: str | None) -> None:
    if preset is None:
        return
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(sorted(PRESETS))}")
    expected = PRESETS[preset]["dataset"]
    if manifest.dataset != expected:
        raise ConfigError(f"preset {preset!r} expects {expected} data, manifest holds {manifest.dataset}")


def _train_on_manifest(pipeline, manifest, cfg, preset, callback=None) -> TuningResult:
    check_preset(manifest, preset)
    n_batches = math.ceil(len(manifest) / cfg.batch_size)
    tuner = Tuner(pipeline, cfg, total_steps=cfg.epochs_or_iters * n_batches)
    probe_pairs = make_ab_pairs(manifest, cfg.ab_training, cfg.seed, epoch=PROBE_EPOCH)[: cfg.probe_size]
    history = [{"epoch": 0, "probe": tuner.probe(probe_pairs)}]
    for epoch in range(cfg.epochs_or_iters):
        pairs = make_ab_pairs(manifest, cfg.ab_training, cfg.seed, epoch)
        check_pairs(pairs, cfg.ab_training)
        losses = [tuner.step(pairs[i : i + cfg.batch_size]) for i in range(0, len(pairs), cfg.batch_size)]
        rec = {
            "epoch": epoch + 1,
            "loss": float(np.mean([r["loss"] for r in losses])),
            "loss_cnvrt": float(np.mean([r["loss_cnvrt"] for r in losses])),
            "lr": losses[-1]["lr"],
            "probe": tuner.probe(probe_pairs),
        }
        history.append(rec)
        logger.info("epoch %d loss %.5f probe %.5f", rec["epoch"], rec["loss"], rec["probe"])
        if callback:
            callback(rec)
    tuner.finish()
    delta = tuner.delta({"preset": preset, "manifest_sha256": manifest.digest(),
                         "extra_concepts": list(manifest.extra_concepts)})
    fc = pipeline.fc.weight.detach().cpu().clone() if pipeline.fc is not None else None
    return TuningResult(delta, history, fc)


def train_ft(pipeline: SDIPCPipeline, manifest: Manifest, cfg: TuningConfig | None = None,
             preset: str | None = None, callback=None) -> TuningResult:
    preset = preset or (manifest.preset if manifest.preset in PRESETS else None)
    cfg = cfg or TuningConfig.for_preset(preset or "object")
    if cfg.mode != "ft":
        raise ConfigError(f"train_ft needs mode 'ft', got {cfg.mode!r}")
    return _train_on_manifest(pipeline, manifest, cfg, preset, callback)


def train_fc_ablation(pipeline: SDIPCPipeline, manifest: Manifest, cfg: TuningConfig | None = None,
                      preset: str | None = None, callback=None) -> TuningResult:
    preset = preset or (manifest.preset if manifest.preset in PRESETS else None)
    cfg = cfg or TuningConfig.for_preset(preset or "object", mode="fc_ablation")
    if cfg.mode != "fc_ablation":
        raise ConfigError(f"train_fc_ablation needs mode 'fc_ablation', got {cfg.mode!r}")
    return _train_on_manifest(pipeline, manifest, cfg, preset, callback)


def train_ct(pipeline: SDIPCPipeline, reference_images: list, cfg: TuningConfig | None = None,
             callback=None) -> TuningResult:
    """Customise on a few references; each image is its own reconstruction target."""
    cfg = cfg or TuningConfig.for_customization()
    if cfg.mode != "ct":
        raise ConfigError(f"train_ct needs mode 'ct', got {cfg.mode!r}")
    refs = [str(r) for r in reference_images]
    if not refs:
        raise InputError("customization needs at least one reference image")
    pairs = [TrainingPair(r, r, "custom") for r in refs]
    tuner = Tuner(pipeline, cfg, total_steps=cfg.epochs_or_iters)
    history = []
    per_step = max(1, min(cfg.batch_size, len(pairs)))
    for it in range(cfg.epochs_or_iters):
        start = (it * per_step) % len(pairs)
        batch = [pairs[(start + j) % len(pairs)] for j in range(per_step)]
        rec = {"iter": it + 1, **tuner.step(batch), "probe": tuner.probe(pairs)}
        history.append(rec)
        if callback:
            callback(rec)
    tuner.finish()
    digest = hashlib.sha256("\n".join(refs).encode()).hexdigest()
    return TuningResult(tuner.delta({"references_sha256": digest, "iterations": len(history)}), history)


def smoothed(values: list[float], window: int = 3) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.convolve(v, np.ones(window) / window, mode="valid")
