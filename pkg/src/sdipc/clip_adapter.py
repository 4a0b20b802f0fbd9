"""Thin wrapper over a pretrained CLIP model.

Exposes pre-projection token/class embeddings, projected embeddings and the
frozen projection matrices the converter inverts.
"""

from __future__ import annotations

import gzip
import hashlib
import importlib.util
import json
import logging
import os
import tempfile
import threading
import warnings
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

from .embeddings import ProjectionMatrix, TextEncoding, VisualEmbedding
from .exceptions import InputError, StateError
from .validation import SEQUENCE_LENGTH, load_image

logger = logging.getLogger(__name__)

MAX_WORD_TOKENS = SEQUENCE_LENGTH - 2


def _cache_root() -> Path:
    return Path(os.environ.get("IPC_CACHE", Path(tempfile.gettempdir()) / "sdipc-cache"))


@lru_cache(maxsize=1)
def bundled_tokenizer() -> CLIPTokenizer:
    """The published CLIP BPE tokenizer, rebuilt from open_clip's vocab file.

    Used when a checkpoint directory ships no tokenizer files.
    """
    from transformers.convert_slow_tokenizer import bytes_to_unicode

    spec = importlib.util.find_spec("open_clip")
    if spec is None or not spec.submodule_search_locations:
        raise StateError("open_clip_torch is required for the bundled CLIP vocabulary")
    bpe = Path(spec.submodule_search_locations[0]) / "bpe_simple_vocab_16e6.txt.gz"
    merges = gzip.open(bpe).read().decode("utf-8").split("\n")[1 : 49152 - 256 - 2 + 1]
    vocab = list(bytes_to_unicode().values())
    vocab = vocab + [v + "</w>" for v in vocab]
    vocab += ["".join(m.split()) for m in merges]
    vocab += ["<|startoftext|>", "<|endoftext|>"]

    out = _cache_root() / "clip-bpe"
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(json.dumps({v: i for i, v in enumerate(vocab)}))
    (out / "merges.txt").write_text("#version: 0.2\n" + "\n".join(merges) + "\n")
    return CLIPTokenizer(
        str(out / "vocab.json"), str(out / "merges.txt"), pad_token="<|endoftext|>"
    )


class ClipAdapter:
    """Frozen CLIP image/text encoders plus their projections.

    Encoders are read-only after construction; a lock serializes forward
    passes so concurrent callers never observe partial state.
    """

    def __init__(self, model: CLIPModel, tokenizer=None, image_processor=None,
                 model_tag: str = "clip", device: str | torch.device = "cpu"):
        self.device = torch.device(device)
        self.model = model.to(self.device).eval().requires_grad_(False)
        self.tokenizer = tokenizer or bundled_tokenizer()
        size = model.config.vision_config.image_size
        self.image_processor = image_processor or CLIPImageProcessor(
            size={"shortest_edge": size}, crop_size={"height": size, "width": size}
        )
        self.model_tag = model_tag
        self._lock = threading.RLock()
        self._sos = None
        self._projections: dict[str, ProjectionMatrix] = {}

    @classmethod
    def from_pretrained(cls, path: str | os.PathLike, device="cpu") -> "ClipAdapter":
        path = Path(path)
        if not path.exists():
            raise StateError(f"CLIP checkpoint not found at {path}")
        model = CLIPModel.from_pretrained(path)
        tokenizer = None
        if (path / "vocab.json").exists() or (path / "tokenizer.json").exists():
            tokenizer = CLIPTokenizer.from_pretrained(path)
        processor = None
        if (path / "preprocessor_config.json").exists():
            processor = CLIPImageProcessor.from_pretrained(path)
        return cls(model, tokenizer, processor, model_tag=f"clip:{path.name}", device=device)

    # -- metadata -----------------------------------------------------------

    @property
    def text_dim(self) -> int:
        return self.model.config.text_config.hidden_size

    @property
    def embed_dim(self) -> int:
        return self.model.config.projection_dim

    @property
    def vision_model(self):
        return self.model.vision_model

    def preprocessing(self) -> dict:
        p = self.image_processor
        return {
            "resize_shortest_edge": p.size.get("shortest_edge"),
            "crop_size": [p.crop_size["height"], p.crop_size["width"]],
            "resample": int(p.resample),
            "image_mean": list(p.image_mean),
            "image_std": list(p.image_std),
            "rescale_factor": p.rescale_factor,
        }

    def describe(self) -> dict:
        return {"model_tag": self.model_tag, "preprocessing": self.preprocessing()}

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- images -------------------------------------------------------------

    def preprocess(self, images) -> torch.Tensor:
        if not isinstance(images, (list, tuple)):
            images = [images]
        pil = [load_image(im) for im in images]
        pixels = self.image_processor(images=pil, return_tensors="pt")["pixel_values"]
        return pixels.to(self.device)

    def image_features(self, pixel_values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable ``(pre_projection, projected)`` for a pixel batch.

        Deep prompts attached to the vision tower act here.
        """
        pooled = self.model.vision_model(pixel_values=pixel_values).pooler_output
        return pooled, self.model.visual_projection(pooled)

    def encode_images(self, images) -> tuple[torch.Tensor, torch.Tensor]:
        with self._lock, torch.no_grad():
            return self.image_features(self.preprocess(images))

    def encode_image(self, image, source_id: str | None = None) -> VisualEmbedding:
        if source_id is None:
            source_id = str(image) if isinstance(image, (str, os.PathLike)) else ""
        pre, proj = self.encode_images([image])
        return VisualEmbedding(pre[0].cpu(), proj[0].cpu(), source_id)

    # -- text ---------------------------------------------------------------

    def tokenize(self, texts: list[str]) -> tuple[torch.Tensor, list[int], list[bool]]:
        """Token ids padded with the end token to 77 slots.

        Prompts longer than 75 word tokens are hard-truncated with a warning.
        """
        tok = self.tokenizer
        rows, eos_idx, truncated = [], [], []
        for text in texts:
            ids = tok(text, add_special_tokens=False, truncation=False)["input_ids"]
            cut = len(ids) > MAX_WORD_TOKENS
            if cut:
                warnings.warn(
                    f"prompt has {len(ids)} tokens; truncating to {MAX_WORD_TOKENS}", stacklevel=3
                )
                ids = ids[:MAX_WORD_TOKENS]
            row = [tok.bos_token_id, *ids, tok.eos_token_id]
            eos_idx.append(len(row) - 1)
            row += [tok.eos_token_id] * (SEQUENCE_LENGTH - len(row))
            rows.append(row)
            truncated.append(cut)
        return torch.tensor(rows, device=self.device), eos_idx, truncated

    def text_features(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(tokens (n, 77, d_t), eos_index (n,), projected_eos (n, d_c))``."""
        ids, eos_idx, _ = self.tokenize(texts)
        with self._lock, torch.no_grad():
            tokens = self.model.text_model(input_ids=ids).last_hidden_state
            eos = torch.tensor(eos_idx, device=self.device)
            eos_vec = tokens[torch.arange(len(texts), device=self.device), eos]
            return tokens, eos, self.model.text_projection(eos_vec)

    def encode_texts(self, texts: list[str]) -> list[TextEncoding]:
        _, _, truncated = self.tokenize(texts)
        tokens, eos, proj = self.text_features(texts)
        return [
            TextEncoding(tokens[i].cpu(), int(eos[i]), proj[i].cpu(), texts[i], truncated[i])
            for i in range(len(texts))
        ]

    def encode_text(self, text: str) -> TextEncoding:
        if not isinstance(text, str):
            raise InputError(f"text must be a string, got {type(text).__name__}")
        return self.encode_texts([text])[0]

    def get_sos_embedding(self) -> torch.Tensor:
        """Position-0 output of the empty prompt.

        Causal masking makes position 0 prompt-independent, so this is the
        start-token embedding of every prompt.
        """
        if self._sos is None:
            self._sos = self.encode_text("").tokens[0].clone()
        return self._sos

    # -- projections --------------------------------------------------------

    def get_projection(self, kind: str) -> ProjectionMatrix:
        if kind not in ("text", "visual"):
            raise InputError(f"unknown projection kind {kind!r}; expected 'text' or 'visual'")
        if kind not in self._projections:
            layer = self.model.text_projection if kind == "text" else self.model.visual_projection
            W = layer.weight.detach().cpu().numpy().astype(np.float64)
            self._projections[kind] = ProjectionMatrix(W, kind, self.model_tag)
        return self._projections[kind]


def empirical_eos_norm(adapter: ClipAdapter, captions: list[str], batch_size: int = 64) -> dict:
    """Mean/std of the projected end-token norm over `captions`."""
    norms = []
    for i in range(0, len(captions), batch_size):
        _, _, proj = adapter.text_features(captions[i : i + batch_size])
        norms.append(proj.norm(dim=-1).cpu())
    norms = torch.cat(norms).double()
    return {"mean": float(norms.mean()), "std": float(norms.std()), "n": int(norms.numel())}
