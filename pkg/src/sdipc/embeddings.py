"""Value types passed between the encoders, the converter and the sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from .exceptions import InputError
from .validation import SEQUENCE_LENGTH, check_finite, check_sequence

ProjectionKind = Literal["text", "visual"]
Provenance = Literal["text", "converted", "combined"]


@dataclass(frozen=True)
class ProjectionMatrix:
    """A frozen CLIP projection (`d_c x d_in`) and the checkpoint it came from."""

    matrix: np.ndarray
    kind: ProjectionKind
    model_tag: str

    def __post_init__(self):
        if self.kind not in ("text", "visual"):
            raise InputError(f"unknown projection kind {self.kind!r}")
        if np.ndim(self.matrix) != 2:
            raise InputError("projection matrix must be 2-D")
        check_finite(self.matrix, f"{self.kind} projection")
        self.matrix.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.matrix.shape)


@dataclass(frozen=True)
class VisualEmbedding:
    pre_projection: torch.Tensor
    projected: torch.Tensor
    source_id: str = ""

    def __post_init__(self):
        check_finite(self.pre_projection, "pre-projection embedding")
        check_finite(self.projected, "projected embedding")


@dataclass(frozen=True)
class TextEncoding:
    """Contextual token outputs of the text encoder for one prompt.

    ``tokens[0]`` is the start token, ``tokens[eos_index]`` the end token and
    every later slot a padding output.
    """

    tokens: torch.Tensor
    eos_index: int
    projected_eos: torch.Tensor
    raw_text: str
    truncated: bool = False

    def __post_init__(self):
        check_sequence(self.tokens, "text encoding")
        if not 1 <= self.eos_index <= SEQUENCE_LENGTH - 1:
            raise InputError(f"eos_index {self.eos_index} outside [1, 76]")

    @property
    def eos(self) -> torch.Tensor:
        return self.tokens[self.eos_index]


@dataclass(frozen=True)
class ConvertedToken:
    embedding: torch.Tensor
    source_visual: VisualEmbedding | None = None

    def __post_init__(self):
        check_finite(self.embedding, "converted token")


@dataclass(frozen=True)
class PromptEmbeddingSequence:
    """A 77-slot conditioning sequence for the U-Net cross-attention."""

    vectors: torch.Tensor
    provenance: Provenance = "text"
    alpha: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        check_sequence(self.vectors, "prompt embedding sequence")
        if self.provenance not in ("text", "converted", "combined"):
            raise InputError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, idx):
        return self.vectors[idx]

    @classmethod
    def from_text(cls, text: TextEncoding) -> "PromptEmbeddingSequence":
        return cls(text.tokens, "text", meta={"text": text.raw_text})
