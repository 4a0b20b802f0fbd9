"""Closed-form image-to-prompt conversion.

A projected CLIP image embedding is mapped back into the text encoder's
token-output space with a thresholded pseudo-inverse of the text projection,
rescaled to the typical norm of a projected end token, and tiled into a
77-slot pseudo-prompt.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .embeddings import (
    ConvertedToken,
    ProjectionMatrix,
    PromptEmbeddingSequence,
    TextEncoding,
    VisualEmbedding,
)
from .exceptions import DegenerateInverseError, InputError
from .validation import SEQUENCE_LENGTH, as_numpy, check_finite, check_scalar

DEFAULT_THRESHOLD = 0.3
DEFAULT_KAPPA = 27.0


@dataclass(frozen=True)
class ConverterConfig:
    kappa: float = DEFAULT_KAPPA
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.kappa > 0:
            raise InputError(f"kappa must be positive, got {self.kappa}")
        if not self.threshold >= 0:
            raise InputError(f"threshold must be non-negative, got {self.threshold}")


@dataclass(frozen=True)
class PseudoInverse:
    """Thresholded Moore-Penrose inverse of a projection, shape ``d_in x d_c``."""

    matrix: np.ndarray
    threshold: float
    retained_rank: int
    singular_values: np.ndarray
    source: ProjectionMatrix | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.matrix.setflags(write=False)

    def as_tensor(self, dtype=torch.float32, device="cpu") -> torch.Tensor:
        """Cached read-only tensor copy; never receives gradients."""
        key = (dtype, str(device))
        if key not in self._cache:
            self._cache[key] = torch.as_tensor(
                np.array(self.matrix), dtype=dtype, device=device
            ).requires_grad_(False)
        return self._cache[key]


def thresholded_pseudo_inverse(
    W: ProjectionMatrix | np.ndarray, threshold: float = DEFAULT_THRESHOLD
) -> PseudoInverse:
    """SVD pseudo-inverse with singular values below `threshold` treated as 0.

    Values exactly equal to the threshold are kept. Singular values that are
    numerically zero are always dropped, so ``threshold=0`` gives the exact
    Moore-Penrose inverse.
    """
    source = W if isinstance(W, ProjectionMatrix) else None
    A = np.asarray(source.matrix if source is not None else W, dtype=np.float64)
    if A.ndim != 2:
        raise InputError(f"projection must be 2-D, got shape {A.shape}")
    check_finite(A, "projection matrix")
    threshold = check_scalar(threshold, "threshold", min_val=0.0)

    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rcond = np.finfo(np.float64).eps * max(A.shape) * (s[0] if s.size else 0.0)
    keep = (s >= threshold) & (s > rcond)
    if not keep.any():
        raise DegenerateInverseError(
            f"all {s.size} singular values are below threshold {threshold}"
        )
    inv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return PseudoInverse(
        matrix=inv,
        threshold=threshold,
        retained_rank=int(keep.sum()),
        singular_values=s,
        source=source,
    )


def convert_embeddings(features, inverse, kappa: float = DEFAULT_KAPPA):
    """Batch form of the conversion: ``kappa / |f| * W_t^+ f`` row by row.

    `features` is ``(n, d_c)`` or ``(d_c,)``; numpy in, numpy out, tensors in,
    tensors out. `inverse` is a PseudoInverse or a raw ``(d_in, d_c)`` matrix.
    """
    if isinstance(features, torch.Tensor):
        if isinstance(inverse, PseudoInverse):
            M = inverse.as_tensor(features.dtype, features.device)
        else:
            M = torch.as_tensor(inverse, dtype=features.dtype, device=features.device)
        norms = features.norm(dim=-1, keepdim=True)
        if bool((norms == 0).any()):
            raise InputError("cannot convert a zero-norm image embedding")
        return (kappa / norms) * (features @ M.T)

    F = np.asarray(features, dtype=np.float64)
    M = inverse.matrix if isinstance(inverse, PseudoInverse) else np.asarray(inverse)
    norms = np.linalg.norm(F, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise InputError("cannot convert a zero-norm image embedding")
    return (kappa / norms) * (F @ M.T)


def convert_image_embedding(
    f, inv: PseudoInverse, cfg: ConverterConfig = ConverterConfig()
) -> ConvertedToken:
    source = f if isinstance(f, VisualEmbedding) else None
    vec = source.projected if source is not None else f
    if not isinstance(vec, torch.Tensor):
        vec = torch.as_tensor(np.asarray(vec), dtype=torch.float32)
    if vec.ndim != 1:
        raise InputError(f"expected a single embedding vector, got shape {tuple(vec.shape)}")
    check_finite(vec, "image embedding")
    out = convert_embeddings(vec, inv, cfg.kappa)
    return ConvertedToken(out, source)


def assemble_pseudo_prompt(sos, cnvrt: ConvertedToken) -> PromptEmbeddingSequence:
    """Start token at slot 0, the converted token in every slot after it.

    Padding slots are filled too; they still draw attention weight away from
    the start token.
    """
    sos = torch.as_tensor(sos)
    emb = cnvrt.embedding.to(sos.dtype)
    check_finite(sos, "start-token embedding")
    vectors = torch.cat([sos[None], emb[None].expand(SEQUENCE_LENGTH - 1, -1)], dim=0)
    return PromptEmbeddingSequence(vectors, "converted")


def assemble_batch(sos: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """``(n, d)`` converted tokens -> ``(n, 77, d)`` pseudo-prompts (differentiable)."""
    n = tokens.shape[0]
    head = sos.to(tokens)[None, None].expand(n, 1, -1)
    tail = tokens[:, None].expand(n, SEQUENCE_LENGTH - 1, -1)
    return torch.cat([head, tail], dim=1)


def combine_edit(cnvrt: ConvertedToken, text: TextEncoding, alpha: float) -> PromptEmbeddingSequence:
    """Merge an editing prompt into a converted image prompt.

    Slots before the editing text's end token keep the text outputs (start
    token and editing words); every slot from the end token on receives
    ``cnvrt + alpha * eos``.
    """
    alpha = check_scalar(alpha, "alpha", min_val=0.0)
    if alpha > 1.0:
        warnings.warn(f"alpha={alpha} > 1 weights the edit text above the image", stacklevel=2)
    t = text.eos_index
    f_comb = cnvrt.embedding.to(text.tokens) + alpha * text.tokens[t]
    vectors = text.tokens.clone()
    vectors[t:] = f_comb
    return PromptEmbeddingSequence(
        vectors, "combined", alpha=alpha, meta={"text": text.raw_text}
    )


class ImageToPromptConverter(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the closed-form conversion.

    ``fit`` takes the CLIP text projection (``d_c x d_t``) and stores its
    thresholded pseudo-inverse; ``transform`` maps projected image embeddings
    ``(n, d_c)`` to converted tokens ``(n, d_t)``.

    Parameters
    ----------
    threshold : float, default=0.3
        Singular values below this are zeroed in the inverse.
    kappa : float, default=27.0
        Target norm of the projected end-token embedding.

    Attributes
    ----------
    components_ : ndarray of shape (d_t, d_c)
    singular_values_ : ndarray
    retained_rank_ : int
    n_features_in_ : int
    """

    def __init__(self, threshold: float = DEFAULT_THRESHOLD, kappa: float = DEFAULT_KAPPA):
        self.threshold = threshold
        self.kappa = kappa

    def fit(self, projection, y=None):
        ConverterConfig(kappa=self.kappa, threshold=self.threshold)
        if isinstance(projection, ProjectionMatrix):
            W = projection
        else:
            W = check_array(as_numpy(projection), dtype=np.float64)
        self.inverse_ = thresholded_pseudo_inverse(W, self.threshold)
        self.projection_ = np.asarray(getattr(W, "matrix", W), dtype=np.float64)
        self.components_ = self.inverse_.matrix
        self.singular_values_ = self.inverse_.singular_values
        self.retained_rank_ = self.inverse_.retained_rank
        self.n_features_in_ = self.projection_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(as_numpy(X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return convert_embeddings(X, self.inverse_, self.kappa)

    def inverse_transform(self, T):
        """Project converted tokens back into the shared embedding space."""
        check_is_fitted(self, "components_")
        T = check_array(as_numpy(T), dtype=np.float64)
        return T @ self.projection_.T

    def transform_sequences(self, X, sos) -> np.ndarray:
        """``(n, d_c)`` embeddings -> ``(n, 77, d_t)`` pseudo-prompts."""
        tokens = self.transform(X)
        sos = np.asarray(as_numpy(sos), dtype=np.float64)
        out = np.repeat(tokens[:, None, :], SEQUENCE_LENGTH, axis=1)
        out[:, 0] = sos
        return out
