"""Embedding-space transfer, retrieval, FID and CLIP-score evaluation."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import linalg
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .clip_adapter import ClipAdapter
from .converter import PseudoInverse
from .datasets import EvalSet, is_image
from .exceptions import InputError, StateError

logger = logging.getLogger(__name__)

SPACES = ("C", "T")
DEFAULT_TEMPLATE = "a photo of a {}"
FID_RECOMMENDED = 2048
METRICS = ("acc@1", "acc@5", "tr@1", "tr@5", "ir@1", "ir@5", "fid", "clip_score_img", "clip_score_txt")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    protocol: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise InputError(f"unknown metrics {sorted(unknown)}")
        for k, v in self.metrics.items():
            if k != "fid" and not 0.0 <= v <= 100.0:
                raise InputError(f"{k} = {v} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def table(self) -> str:
        width = max(len(k) for k in self.metrics) if self.metrics else 6
        lines = [f"{k.ljust(width)}  {v:8.2f}" for k, v in self.metrics.items()]
        proto = ", ".join(f"{k}={v}" for k, v in sorted(self.protocol.items()) if not isinstance(v, (dict, list)))
        return "\n".join(lines + ([f"({proto})"] if proto else []))


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InputError("cannot normalise a zero-norm embedding")
    return x / n


class ZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Nearest class embedding under cosine similarity.

    ``fit`` takes one embedding per candidate text; several candidates may
    share a label (duplicates or prompt variants), in which case a label's
    score is its best candidate's score.
    """

    def __init__(self, normalize: bool = True):
        self.normalize = normalize

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise InputError("empty class list")
        y = np.arange(X.shape[0]) if y is None else np.asarray(y)
        if len(y) != X.shape[0]:
            raise InputError("one label per class embedding required")
        self.class_embeddings_ = _unit(X) if self.normalize else X
        self.candidate_labels_ = y
        self.classes_, self._label_index = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        """``(n, n_classes)`` best-candidate cosine per label."""
        check_is_fitted(self, "class_embeddings_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        sims = (_unit(X) if self.normalize else X) @ self.class_embeddings_.T
        out = np.full((X.shape[0], len(self.classes_)), -np.inf)
        for j, label in enumerate(self._label_index):
            out[:, label] = np.maximum(out[:, label], sims[:, j])
        return out

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_topk(self, X, k: int = 5) -> np.ndarray:
        scores = self.decision_function(X)
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        return self.classes_[order]

    def topk_accuracy(self, X, y, ks=(1, 5)) -> dict[int, float]:
        top = self.predict_topk(X, max(ks))
        y = np.asarray(y)[:, None]
        return {k: 100.0 * float(np.mean(np.any(top[:, :k] == y, axis=1))) for k in ks}


# -- embedding extraction -------------------------------------------------------

def image_embeddings(clip: ClipAdapter, images: Sequence, batch_size: int = 64) -> np.ndarray:
    """Projected (C-space) image embeddings as float64."""
    out = []
    for i in range(0, len(images), batch_size):
        _, projected = clip.encode_images(list(images[i : i + batch_size]))
        out.append(projected.detach().cpu().double().numpy())
    if not out:
        raise InputError("no images to embed")
    return np.concatenate(out)


def text_embeddings(clip: ClipAdapter, texts: Sequence[str], batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """``(pre-projection EOS, projected EOS)`` for each text."""
    pre, proj = [], []
    for i in range(0, len(texts), batch_size):
        with torch.no_grad():
            hidden, eos_idx, projected = clip.text_features(list(texts[i : i + batch_size]))
        idx = torch.as_tensor(eos_idx, device=hidden.device)
        pre.append(hidden[torch.arange(hidden.shape[0], device=hidden.device), idx].cpu().double().numpy())
        proj.append(projected.cpu().double().numpy())
    if not pre:
        raise InputError("no texts to embed")
    return np.concatenate(pre), np.concatenate(proj)


def to_space(space: str, image_c: np.ndarray, text_pre: np.ndarray, text_c: np.ndarray,
             inverse: PseudoInverse) -> tuple[np.ndarray, np.ndarray]:
    """Image and text representations in the requested space, unit-normalised.

    C: projected image vs projected text. T: ``W_t^+ f_img`` vs pre-projection
    EOS; the conversion scale is irrelevant under cosine so it is omitted.
    """
    if space not in SPACES:
        raise InputError(f"unknown space {space!r}; valid: {SPACES}")
    if space == "C":
        return _unit(image_c), _unit(text_c)
    return _unit(image_c @ inverse.matrix.T), _unit(text_pre)


# -- classification & retrieval ------------------------------------------------------

def classification_accuracy(image_feats: np.ndarray, labels: np.ndarray, class_feats: np.ndarray,
                            class_labels=None, ks=(1, 5)) -> dict[int, float]:
    clf = ZeroShotClassifier().fit(class_feats, class_labels)
    return clf.topk_accuracy(image_feats, labels, ks)


def retrieval_recall(image_feats: np.ndarray, text_feats: np.ndarray, text_to_image: np.ndarray,
                     ks=(1, 5)) -> dict[str, float]:
    """Recall@k for text retrieval (image query) and image retrieval (text query)."""
    text_to_image = np.asarray(text_to_image)
    sims = _unit(image_feats) @ _unit(text_feats).T
    out = {}
    # image -> text: hit if any of the image's captions ranks in the top k
    rank_t = np.argsort(-sims, axis=1, kind="stable")
    owner = text_to_image[rank_t]
    first_hit = np.argmax(owner == np.arange(len(image_feats))[:, None], axis=1)
    # text -> image
    rank_i = np.argsort(-sims.T, axis=1, kind="stable")
    pos_i = np.argmax(rank_i == text_to_image[:, None], axis=1)
    for k in ks:
        out[f"tr@{k}"] = 100.0 * float(np.mean(first_hit < k))
        out[f"ir@{k}"] = 100.0 * float(np.mean(pos_i < k))
    return out


def eval_space_classification(clip: ClipAdapter, inverse: PseudoInverse, eval_set: EvalSet,
                              spaces=SPACES, template: str = DEFAULT_TEMPLATE,
                              batch_size: int = 64, protocol: dict | None = None) -> dict[str, EvalReport]:
    """Zero-shot top-k accuracy; every space sees the same images and class texts."""
    if not eval_set.classnames:
        raise InputError("empty class list")
    labels = np.array([r.label for r in eval_set.records])
    img_c = image_embeddings(clip, [r.path for r in eval_set.records], batch_size)
    text_pre, text_c = text_embeddings(clip, [template.format(c) for c in eval_set.classnames])
    reports = {}
    for space in spaces:
        im, tx = to_space(space, img_c, text_pre, text_c, inverse)
        acc = classification_accuracy(im, labels, tx)
        reports[space] = EvalReport(
            {"acc@1": acc[1], "acc@5": acc[5]},
            {"space": space, "dataset": eval_set.name, "n_images": len(labels),
             "n_classes": len(eval_set.classnames), "template": template, **(protocol or {})},
        )
    return reports


def eval_space_retrieval(clip: ClipAdapter, inverse: PseudoInverse, eval_set: EvalSet,
                         spaces=SPACES, batch_size: int = 64, protocol: dict | None = None) -> dict[str, EvalReport]:
    texts, owner = [], []
    for i, r in enumerate(eval_set.records):
        texts += list(r.captions)
        owner += [i] * len(r.captions)
    if not texts:
        raise InputError(f"{eval_set.name} has no captions")
    img_c = image_embeddings(clip, [r.path for r in eval_set.records], batch_size)
    text_pre, text_c = text_embeddings(clip, texts)
    reports = {}
    for space in spaces:
        im, tx = to_space(space, img_c, text_pre, text_c, inverse)
        reports[space] = EvalReport(
            retrieval_recall(im, tx, np.array(owner)),
            {"space": space, "dataset": eval_set.name, "n_images": len(img_c),
             "n_texts": len(texts), **(protocol or {})},
        )
    return reports


# -- CLIP score ---------------------------------------------------------------------

def clip_score_from_embeddings(generated: np.ndarray, anchors: np.ndarray) -> float:
    """Mean of ``100 * max(cos, 0)`` over matched rows."""
    generated, anchors = np.asarray(generated), np.asarray(anchors)
    if generated.shape[0] != anchors.shape[0]:
        raise InputError(f"{generated.shape[0]} generated items vs {anchors.shape[0]} anchors")
    cos = np.sum(_unit(generated) * _unit(anchors), axis=1)
    return float(np.mean(100.0 * np.clip(cos, 0.0, None)))


def eval_clip_score(clip: ClipAdapter, generated: Sequence, anchors: Sequence, mode: str = "image",
                    batch_size: int = 64) -> float:
    if mode not in ("image", "text"):
        raise InputError(f"unknown mode {mode!r}; valid: image, text")
    if len(generated) != len(anchors):
        raise InputError(f"{len(generated)} generated items vs {len(anchors)} anchors")
    gen = image_embeddings(clip, generated, batch_size)
    if mode == "image":
        anc = image_embeddings(clip, anchors, batch_size)
    else:
        anc = text_embeddings(clip, list(anchors))[1]
    return clip_score_from_embeddings(gen, anc)


# -- FID ------------------------------------------------------------------------------

def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(sigma1 @ sigma2, disp=False)
    if not np.isfinite(covmean).all():
        offset = np.eye(sigma1.shape[0]) * eps
        covmean = linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset))
    covmean = np.real(covmean)
    return float(max(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * np.trace(covmean), 0.0))


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    return features.mean(0), np.cov(features, rowvar=False)


class InceptionExtractor:
    """2048-d pool features of the standard FID InceptionV3 (pytorch-fid).

    Weights come from the torch hub cache; populate ``$TORCH_HOME`` when
    running offline.
    """

    tag = "pytorch-fid InceptionV3 pool3 2048d, bilinear resize to 299"

    def __init__(self, device="cpu"):
        try:
            from pytorch_fid.inception import InceptionV3
        except ImportError as exc:
            raise StateError("FID needs the 'fid' extra: pip install pytorch-fid") from exc
        try:
            self.model = InceptionV3([InceptionV3.BLOCK_INDEX_BY_DIM[2048]]).eval().to(device)
        except Exception as exc:  # hub download failure offline
            raise StateError(f"could not load FID Inception weights ({exc}); populate $TORCH_HOME") from exc
        self.device = device

    @torch.no_grad()
    def __call__(self, images: list[Image.Image]) -> np.ndarray:
        batch = np.stack([np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0 for im in images])
        x = torch.from_numpy(batch).permute(0, 3, 1, 2).to(self.device)
        return self.model(x)[0].squeeze(-1).squeeze(-1).cpu().double().numpy()


def read_image_dir(directory) -> tuple[list[Image.Image], int]:
    """All readable images under `directory` in name order, plus a skip count."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    images, skipped = [], 0
    for p in sorted(q for q in directory.rglob("*") if q.is_file() and is_image(q)):
        try:
            with Image.open(p) as im:
                images.append(im.convert("RGB"))
        except (UnidentifiedImageError, OSError):
            skipped += 1
    if skipped:
        logger.warning("skipped %d unreadable images in %s", skipped, directory)
    return images, skipped


def _features(images, extractor, batch_size, size):
    feats = []
    for i in range(0, len(images), batch_size):
        chunk = [im.resize((size, size), Image.BICUBIC) if size else im for im in images[i : i + batch_size]]
        feats.append(np.asarray(extractor(chunk), dtype=np.float64))
    return np.concatenate(feats)


def eval_fid(generated_dir, reference_dir, extractor: Callable | None = None, batch_size: int = 50,
             resize: int | None = 299) -> EvalReport:
    extractor = extractor or InceptionExtractor()
    gen, skip_g = read_image_dir(generated_dir)
    ref, skip_r = read_image_dir(reference_dir)
    if len(gen) < 2 or len(ref) < 2:
        raise InputError("FID needs at least two readable images per side")
    if min(len(gen), len(ref)) < FID_RECOMMENDED:
        warnings.warn(
            f"small-sample FID: {len(gen)} vs {len(ref)} images (< {FID_RECOMMENDED}); values are biased upward",
            stacklevel=2,
        )
    fid = frechet_distance(*feature_statistics(_features(gen, extractor, batch_size, resize)),
                           *feature_statistics(_features(ref, extractor, batch_size, resize)))
    return EvalReport(
        {"fid": fid},
        {"extractor": getattr(extractor, "tag", type(extractor).__name__), "resize": resize,
         "n_generated": len(gen), "n_reference": len(ref), "skipped": skip_g + skip_r},
    )
