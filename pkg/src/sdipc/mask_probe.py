"""Word-token masking probe and cross-attention map export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .attention import AttentionRecorder
from .diffusion import DiffusionBackend, SamplerConfig
from .embeddings import PromptEmbeddingSequence, TextEncoding
from .exceptions import InputError
from .validation import SEQUENCE_LENGTH

TOKEN_GROUPS = ("sos", "words", "eos", "pads")
DISPLAY_SIZE = 64


@dataclass(frozen=True)
class TokenMask:
    keep: torch.Tensor

    def __post_init__(self):
        keep = torch.as_tensor(self.keep, dtype=torch.bool)
        object.__setattr__(self, "keep", keep)
        if keep.shape != (SEQUENCE_LENGTH,):
            raise InputError(f"mask must have {SEQUENCE_LENGTH} entries, got {tuple(keep.shape)}")
        if not keep[0]:
            raise InputError("the start token must stay visible")
        if self.degenerate:
            warnings.warn("mask keeps only the start token (degenerate probe)", stacklevel=3)

    @property
    def degenerate(self) -> bool:
        return not bool(self.keep[1:].any())

    @classmethod
    def from_groups(cls, text: TextEncoding, groups=("sos", "eos")) -> "TokenMask":
        """Keep the named token groups of `text`; ``sos`` is always kept."""
        unknown = set(groups) - set(TOKEN_GROUPS)
        if unknown:
            raise InputError(f"unknown token groups {sorted(unknown)}; valid: {TOKEN_GROUPS}")
        t = text.eos_index
        keep = torch.zeros(SEQUENCE_LENGTH, dtype=torch.bool)
        keep[0] = True
        if "words" in groups:
            keep[1:t] = True
        if "eos" in groups:
            keep[t] = True
        if "pads" in groups:
            keep[t + 1 :] = True
        return cls(keep)


@dataclass
class ProbeResult:
    image: np.ndarray
    latents: torch.Tensor
    maps: torch.Tensor  # (77, DISPLAY_SIZE, DISPLAY_SIZE)
    token_mass: torch.Tensor  # (77,)
    max_masked_prob: float
    max_row_sum_error: float
    layers: list[str]


def aggregate_maps(recorder: AttentionRecorder, latent_size: int,
                   map_resolution: int | None = None) -> tuple[torch.Tensor, list[str]]:
    """Average per-token spatial maps over heads and the selected layers.

    Uses layers whose query grid is ``map_resolution`` per side (default a
    quarter of the latent side, i.e. 16 for SD at 512px); falls back to every
    cross-attention layer if none match.
    """
    maps = recorder.layer_maps()
    target = map_resolution or latent_size // 4
    sides = {name: int(round(m.shape[0] ** 0.5)) for name, m in maps.items()}
    chosen = [n for n, s in sides.items() if s == target] or sorted(maps)
    tiles = []
    for name in chosen:
        s = sides[name]
        m = maps[name].T.reshape(-1, 1, s, s)
        tiles.append(F.interpolate(m, size=(DISPLAY_SIZE, DISPLAY_SIZE), mode="bilinear",
                                   align_corners=False)[:, 0])
    return torch.stack(tiles).mean(0), sorted(chosen)


def generate_masked(backend: DiffusionBackend, text: TextEncoding, mask: TokenMask,
                    cfg: SamplerConfig = SamplerConfig(),
                    map_resolution: int | None = None) -> ProbeResult:
    """Sample from `text` with dropped key slots hidden from every cross-attention.

    Masking applies to the conditional branch only.
    """
    recorder = AttentionRecorder(mask.keep)
    cond = PromptEmbeddingSequence.from_text(text)
    result = backend.sample(
        cond, cfg, cond_attention_kwargs={"token_keep": mask.keep, "recorder": recorder}
    )
    maps, layers = aggregate_maps(recorder, backend.latent_size, map_resolution)
    token_mass = torch.stack([m.mean(0) for m in recorder.layer_maps().values()]).mean(0)
    return ProbeResult(
        result.image, result.latents, maps, token_mass,
        recorder.max_masked_prob, recorder.max_row_sum_error, layers,
    )


def render_tiles(maps: torch.Tensor) -> list[np.ndarray]:
    """Grayscale uint8 tiles, each normalised by its own maximum (zero stays black)."""
    tiles = []
    for m in maps:
        m = m.detach().float().clamp_min(0)
        peak = float(m.max())
        scaled = m / peak if peak > 0 else torch.zeros_like(m)
        tiles.append((scaled * 255).round().to(torch.uint8).cpu().numpy())
    return tiles


def export_attention_grid(maps: torch.Tensor, path: str | Path | None = None,
                          columns: int | None = None, pad: int = 2) -> Image.Image:
    tiles = render_tiles(maps)
    if not tiles:
        raise InputError("no attention maps to export")
    columns = columns or len(tiles)
    rows = -(-len(tiles) // columns)
    h, w = tiles[0].shape
    grid = np.zeros((rows * (h + pad) - pad, columns * (w + pad) - pad), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        grid[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = tile
    image = Image.fromarray(grid, mode="L")
    if path is not None:
        image.save(path)
    return image
