"""Fine-tuning manifests, A/B training pairs and evaluation sets.

Nothing here downloads data: missing files raise DatasetError with
instructions on where the expected layout comes from.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DatasetError, InputError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}
PRESET_NAMES = ("object", "portrait", "scene")
EVAL_SETS = ("coco_val_5k", "imagenet_val", "retrieval_pairs")
EXPECTED_SIZES = {"coco_val_5k": 5000, "retrieval_pairs": 5000, "imagenet_val": 50000}

ACQUIRE = {
    "coco_val_5k": "download val2017.zip and annotations_trainval2017.zip from cocodataset.org "
                   "and unpack so that ROOT/val2017/ and ROOT/annotations/captions_val2017.json exist",
    "imagenet_val": "obtain ILSVRC2012 validation images from image-net.org and arrange them as "
                    "ROOT/val/<wnid>/*.JPEG (optionally with ROOT/LOC_synset_mapping.txt for class names)",
}
ACQUIRE["retrieval_pairs"] = ACQUIRE["coco_val_5k"]


def load_presets() -> dict:
    return json.loads(resources.files("sdipc").joinpath("data/presets.json").read_text())


PRESETS = load_presets()


def normalize_name(name: str) -> str:
    return " ".join(name.lower().replace("_", " ").replace("-", " ").split())


def is_image(path: Path) -> bool:
    return path.suffix.lower() in IMAGE_EXTENSIONS


def list_images(directory: Path) -> list[Path]:
    return sorted((p for p in directory.iterdir() if p.is_file() and is_image(p)), key=lambda p: p.name)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    concept: str
    dataset: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    preset: str
    seed: int = 0
    extra_concepts: tuple[str, ...] = ()

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(paths) != len(set(paths)):
            raise InputError("manifest contains duplicate image paths")

    def __len__(self):
        return len(self.entries)

    @property
    def concepts(self) -> list[str]:
        return list(dict.fromkeys(e.concept for e in self.entries))

    @property
    def dataset(self) -> str:
        ds = {e.dataset for e in self.entries}
        return ds.pop() if len(ds) == 1 else "mixed"

    def by_concept(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.concept, []).append(e)
        return out

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"path": e.path, "concept": e.concept, "dataset": e.dataset}) + "\n"
            for e in self.entries
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | os.PathLike, preset: str = "custom", seed: int = 0) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"manifest not found: {path}")
        entries = []
        for i, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(str(rec["path"]), str(rec["concept"]), str(rec["dataset"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"{path}:{i}: malformed manifest record ({exc})") from exc
        return cls(entries, preset, seed)


# -- concept directory discovery ---------------------------------------------

def _synset_names(root: Path) -> dict[str, list[str]]:
    for candidate in (root / "LOC_synset_mapping.txt", root.parent / "LOC_synset_mapping.txt"):
        if candidate.is_file():
            out = {}
            for line in candidate.read_text().splitlines():
                wnid, _, names = line.partition(" ")
                out[wnid] = [n.strip() for n in names.split(",") if n.strip()]
            return out
    return {}


def index_concept_dirs(root: Path, max_depth: int = 3) -> dict[str, list[Path]]:
    """Map normalised concept keys to the directories holding their images.

    Single-letter path components (the Places365 ``a/airfield`` layout) are
    dropped, subcategories join with ``/`` (``greenhouse/indoor``) and ImageNet
    wnids gain aliases from ``LOC_synset_mapping.txt`` when present.
    """
    synsets = _synset_names(root)
    index: dict[str, list[Path]] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        d = Path(dirpath)
        rel = d.relative_to(root).parts
        if len(rel) >= max_depth:
            dirnames[:] = []
        if not rel or not any(is_image(Path(f)) for f in filenames):
            continue
        parts = [normalize_name(p) for p in rel if len(p) > 1]
        keys = {"/".join(parts)}
        for name in synsets.get(rel[-1], []):
            keys.add(normalize_name(name))
        for key in keys:
            index.setdefault(key, []).append(d)
    return index


def _match_concept(concept: str, index: dict[str, list[Path]]) -> list[Path]:
    key = normalize_name(concept)
    dirs = list(index.get(key, []))
    for k, ds in sorted(index.items()):
        if k.startswith(key + "/"):
            dirs.extend(ds)
    return sorted(set(dirs))


def _celeba_identities(root: Path) -> dict[str, list[Path]]:
    """Identity -> CelebA-HQ image paths from the standard mapping files."""
    mapping = root / "CelebA-HQ-to-CelebA-mapping.txt"
    identity = root / "identity_CelebA.txt"
    if not (mapping.is_file() and identity.is_file()):
        return {}
    img_dir = root / "CelebA-HQ-img" if (root / "CelebA-HQ-img").is_dir() else root
    ids = dict(line.split()[:2] for line in identity.read_text().splitlines() if line.strip())
    out: dict[str, list[Path]] = {}
    for line in mapping.read_text().splitlines()[1:]:
        cols = line.split()
        if len(cols) < 3 or cols[2] not in ids:
            continue
        for ext in (".jpg", ".png"):
            p = img_dir / f"{cols[0]}{ext}"
            if p.is_file():
                out.setdefault(ids[cols[2]], []).append(p)
                break
    return out


def _select(images: list[Path], k: int, seed: int, slot: int) -> list[Path]:
    rng = np.random.default_rng([seed, slot])
    order = rng.permutation(len(images))[:k]
    return [images[i] for i in sorted(order)]


def build_manifest(preset: str, root: str | os.PathLike, seed: int = 0) -> Manifest:
    """Deterministic fine-tuning manifest for a preset.

    ``object``/``scene``: 20 concepts x 5 images; ``portrait``: 10 identities x
    10 images; ``custom``: every image directly under `root`. The object list
    only names 15 classes, so 5 more are drawn (seeded) from the remaining
    class directories and recorded in ``extra_concepts``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    if preset == "custom":
        images = list_images(root)
        if not images:
            raise DatasetError(f"no images under {root}")
        return Manifest([ManifestEntry(str(p), root.name, "custom") for p in images], "custom", seed)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESET_NAMES + ('custom',))}")

    spec = PRESETS[preset]
    k = spec["images_per_concept"]
    concepts = list(spec["concepts"])
    if preset == "portrait":
        index = {c: [root / c] for c in concepts if (root / c).is_dir()}
        identities = _celeba_identities(root)
        resolved = {c: index.get(c) or None for c in concepts}
        missing = [c for c in concepts if not resolved[c] and c not in identities]
    else:
        index = index_concept_dirs(root)
        resolved = {c: _match_concept(c, index) for c in concepts}
        missing = [c for c, dirs in resolved.items() if not dirs]
    if missing:
        raise DatasetError(f"{preset} preset: concepts not found under {root}: {', '.join(missing)}")

    extras: list[str] = []
    n_extra = spec["n_concepts"] - len(concepts)
    if n_extra > 0:
        taken = {d for dirs in resolved.values() for d in dirs}
        pool = sorted({d for dirs in index.values() for d in dirs} - taken)
        if len(pool) < n_extra:
            raise DatasetError(f"{preset} preset needs {n_extra} extra classes, found {len(pool)}")
        synsets = _synset_names(root)
        rng = np.random.default_rng([seed, 10_000])
        for i in sorted(rng.choice(len(pool), n_extra, replace=False)):
            d = pool[i]
            label = synsets.get(d.name, [normalize_name(d.relative_to(root).as_posix())])[0]
            extras.append(label)
            resolved[label] = [d]
        concepts += extras

    entries = []
    for slot, concept in enumerate(concepts):
        if preset == "portrait" and not resolved.get(concept):
            images = sorted(identities[concept], key=lambda p: p.name)
        else:
            images = sorted({p for d in resolved[concept] for p in list_images(d)}, key=lambda p: p.as_posix())
        if len(images) < k:
            raise DatasetError(f"concept {concept!r} has {len(images)} images, need {k}")
        entries += [ManifestEntry(str(p), concept, spec["dataset"]) for p in _select(images, k, seed, slot)]
    return Manifest(entries, preset, seed, tuple(extras))


# -- training pairs -------------------------------------------------------------

@dataclass(frozen=True)
class TrainingPair:
    x_ref: str
    x_target: str
    shared_concept: str
    caption: str | None = None


def caption_for(concept: str) -> str:
    return f"a photo of a {concept}"


def make_ab_pairs(manifest: Manifest, ab: bool = True, seed: int = 0, epoch: int = 0) -> list[TrainingPair]:
    """One pair per manifest image as reference, in a seeded order.

    With `ab`, each target is drawn uniformly from the other images of the
    same concept; otherwise the target is the reference itself.
    """
    groups = manifest.by_concept()
    if ab:
        single = [c for c, es in groups.items() if len(es) < 2]
        if single:
            raise ConfigError(f"A/B training needs >= 2 images per concept; singletons: {single}")
    rng = np.random.default_rng([seed, epoch])
    pairs = []
    for e in manifest.entries:
        target = e.path
        if ab:
            others = [o.path for o in groups[e.concept] if o.path != e.path]
            target = others[rng.integers(len(others))]
        pairs.append(TrainingPair(e.path, target, e.concept, caption_for(e.concept)))
    return [pairs[i] for i in rng.permutation(len(pairs))]


def check_pairs(pairs: list[TrainingPair], ab: bool) -> None:
    for p in pairs:
        if ab and p.x_ref == p.x_target:
            raise ConfigError(f"A/B pair reuses {p.x_ref} as its own target")
        if not ab and p.x_ref != p.x_target:
            raise ConfigError("without A/B training every target must equal its reference")


# -- evaluation sets ------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    path: str
    label: int | None = None
    captions: tuple[str, ...] = ()
    image_id: int | str | None = None


@dataclass
class EvalSet:
    name: str
    records: list[EvalRecord]
    classnames: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def _check_size(name: str, n: int, allow_partial: bool) -> None:
    expected = EXPECTED_SIZES[name]
    if n != expected:
        msg = f"{name}: found {n} records, expected {expected}"
        if not allow_partial:
            raise DatasetError(msg + " (pass allow_partial=True to accept)")
        logger.warning(msg)


def _load_coco(name: str, root: Path, allow_partial: bool) -> EvalSet:
    ann = root / "annotations" / "captions_val2017.json"
    img_dir = root / "val2017"
    if not ann.is_file() or not img_dir.is_dir():
        raise DatasetError(f"{name} not found under {root}: {ACQUIRE[name]}")
    data = json.loads(ann.read_text())
    caps: dict[int, list[str]] = {}
    for a in sorted(data["annotations"], key=lambda a: a["id"]):
        caps.setdefault(a["image_id"], []).append(a["caption"].strip())
    records = [
        EvalRecord(str(img_dir / im["file_name"]), None, tuple(caps.get(im["id"], ())), im["id"])
        for im in sorted(data["images"], key=lambda im: im["id"])
    ]
    _check_size(name, len(records), allow_partial)
    return EvalSet(name, records)


def _load_imagenet(root: Path, allow_partial: bool) -> EvalSet:
    val = root / "val" if (root / "val").is_dir() else root
    class_dirs = sorted(d for d in val.iterdir() if d.is_dir() and list_images(d)) if val.is_dir() else []
    if not class_dirs:
        raise DatasetError(f"imagenet_val not found under {root}: {ACQUIRE['imagenet_val']}")
    synsets = _synset_names(root)
    classnames = [synsets.get(d.name, [normalize_name(d.name)])[0] for d in class_dirs]
    records = [
        EvalRecord(str(p), label, (), p.stem)
        for label, d in enumerate(class_dirs)
        for p in list_images(d)
    ]
    _check_size("imagenet_val", len(records), allow_partial)
    return EvalSet("imagenet_val", records, classnames)


def load_eval_set(name: str, root: str | os.PathLike, allow_partial: bool = False) -> EvalSet:
    name = name.replace("-", "_")
    aliases = {"imagenet_val": "imagenet_val", "coco_val_5k": "coco_val_5k", "coco": "coco_val_5k",
               "retrieval_pairs": "retrieval_pairs"}
    if name not in aliases:
        raise InputError(f"unknown evaluation set {name!r}; valid: {', '.join(EVAL_SETS)}")
    name = aliases[name]
    root = Path(root)
    if name == "imagenet_val":
        return _load_imagenet(root, allow_partial)
    return _load_coco(name, root, allow_partial)


def subsample(eval_set: EvalSet, n: int, seed: int = 0) -> EvalSet:
    """Seeded subset of `n` records, kept in their original order."""
    if n >= len(eval_set):
        return eval_set
    idx = np.sort(np.random.default_rng(seed).choice(len(eval_set), n, replace=False))
    return EvalSet(eval_set.name, [eval_set.records[i] for i in idx], eval_set.classnames)


def check_disjoint(manifest: Manifest, eval_set: EvalSet) -> None:
    train = {os.path.realpath(e.path) for e in manifest.entries}
    overlap = train & {os.path.realpath(r.path) for r in eval_set.records}
    if overlap:
        raise ConfigError(f"{len(overlap)} evaluation images also appear in the training manifest")
