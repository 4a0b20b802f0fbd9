import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from sdipc.datasets import (
    PRESETS,
    EvalRecord,
    EvalSet,
    Manifest,
    ManifestEntry,
    build_manifest,
    check_disjoint,
    check_pairs,
    load_eval_set,
    make_ab_pairs,
    subsample,
)
from sdipc.exceptions import ConfigError, DatasetError, InputError

SYNSETS = {
    "n03642806": "laptop, laptop computer", "n04579145": "water jug", "n03764736": "milk can",
    "n04550184": "wardrobe, closet, press", "n02356798": "fox squirrel, eastern fox squirrel, Sciurus niger",
    "n04208210": "shovel", "n03614007": "joystick", "n04599235": "wool, woolen, woollen",
    "n01749939": "green mamba", "n02437616": "llama", "n07873807": "pizza, pizza pie",
    "n01943899": "chambered nautilus, pearly nautilus, nautilus", "n07613480": "trifle",
    "n02777292": "balance beam, beam", "n03874599": "paddlewheel, paddle wheel",
    "n01440764": "tench, Tinca tinca", "n01443537": "goldfish, Carassius auratus",
    "n01484850": "great white shark", "n01491361": "tiger shark", "n01494475": "hammerhead",
    "n01496331": "electric ray", "n01498041": "stingray",
}
TINY_PNG = None


def touch_images(d: Path, n: int):
    global TINY_PNG
    if TINY_PNG is None:
        import io

        buf = io.BytesIO()
        Image.new("RGB", (4, 4)).save(buf, format="PNG")
        TINY_PNG = buf.getvalue()
    d.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        (d / f"im_{i:03d}.png").write_bytes(TINY_PNG)


@pytest.fixture(scope="module")
def imagenet(tmp_path_factory):
    root = tmp_path_factory.mktemp("imagenet")
    (root / "LOC_synset_mapping.txt").write_text("\n".join(f"{k} {v}" for k, v in SYNSETS.items()))
    for wnid in SYNSETS:
        touch_images(root / "train" / wnid, 7)
    return root / "train"


@pytest.fixture(scope="module")
def places(tmp_path_factory):
    root = tmp_path_factory.mktemp("places")
    for c in PRESETS["scene"]["concepts"]:
        name = c.replace(" ", "_")
        sub = root / name[0] / name
        if c == "greenhouse":
            touch_images(sub / "indoor", 3)
            touch_images(sub / "outdoor", 3)
        else:
            touch_images(sub, 6)
    return root


@pytest.fixture(scope="module")
def celeba(tmp_path_factory):
    root = tmp_path_factory.mktemp("celeba")
    ids = PRESETS["portrait"]["concepts"] + ["1", "2"]
    img = root / "CelebA-HQ-img"
    img.mkdir()
    mapping, identity = ["idx orig_idx orig_file"], []
    k = 0
    for ident in ids:
        for _ in range(12):
            (img / f"{k}.jpg").write_bytes(b"")
            orig = f"{k:06d}.jpg"
            mapping.append(f"{k} {k} {orig}")
            identity.append(f"{orig} {ident}")
            k += 1
    (root / "CelebA-HQ-to-CelebA-mapping.txt").write_text("\n".join(mapping))
    (root / "identity_CelebA.txt").write_text("\n".join(identity))
    return root


def test_object_manifest(imagenet):
    m = build_manifest("object", imagenet, seed=0)
    assert len(m) == 100 and len(m.concepts) == 20
    assert m.concepts[:15] == PRESETS["object"]["concepts"]
    assert len(m.extra_concepts) == 5 and set(m.extra_concepts).isdisjoint(m.concepts[:15])
    assert all(n == 5 for n in Counter(e.concept for e in m.entries).values())
    assert m.dataset == "imagenet"


def test_manifest_determinism(imagenet):
    a, b = build_manifest("object", imagenet, 3), build_manifest("object", imagenet, 3)
    assert a.to_jsonl() == b.to_jsonl() and a.digest() == b.digest()
    assert build_manifest("object", imagenet, 4).digest() != a.digest()


def test_scene_manifest_merges_subcategories(places):
    m = build_manifest("scene", places, seed=0)
    assert len(m) == 100 and m.concepts == PRESETS["scene"]["concepts"]
    green = [e.path for e in m.entries if e.concept == "greenhouse"]
    assert len(green) == 5


def test_portrait_manifest(celeba):
    m = build_manifest("portrait", celeba, seed=0)
    assert set(m.concepts) == {"7423", "7319", "6632", "3338", "9178", "6461", "1725", "774", "5866", "7556"}
    assert len(m) == 100


def test_missing_concepts_listed(tmp_path, imagenet):
    root = tmp_path / "partial"
    for wnid in list(SYNSETS)[2:]:
        touch_images(root / wnid, 6)
    (root / "LOC_synset_mapping.txt").write_text("\n".join(f"{k} {v}" for k, v in SYNSETS.items()))
    with pytest.raises(DatasetError, match="laptop computer, water jug"):
        build_manifest("object", root)
    with pytest.raises(DatasetError):
        build_manifest("object", tmp_path / "nope")
    with pytest.raises(ConfigError):
        build_manifest("animals", imagenet)


def test_manifest_jsonl_round_trip(imagenet, tmp_path):
    m = build_manifest("object", imagenet, 0)
    m.save(tmp_path / "m.jsonl")
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert set(first) == {"path", "concept", "dataset"}
    loaded = Manifest.load(tmp_path / "m.jsonl", "object")
    assert loaded.to_jsonl() == m.to_jsonl()
    (tmp_path / "bad.jsonl").write_text('{"path": 1}\n')
    with pytest.raises(ConfigError):
        Manifest.load(tmp_path / "bad.jsonl")


def test_duplicate_paths_rejected():
    e = ManifestEntry("a.png", "x", "custom")
    with pytest.raises(InputError):
        Manifest([e, e], "custom")


def test_custom_manifest(tmp_path):
    touch_images(tmp_path / "refs", 5)
    m = build_manifest("custom", tmp_path / "refs")
    assert len(m) == 5 and m.concepts == ["refs"]


def small_manifest(sizes):
    return Manifest(
        [ManifestEntry(f"{c}/{i}.png", c, "custom") for c, n in sizes.items() for i in range(n)], "custom"
    )


def test_ab_pairs_coverage():
    m = small_manifest({"a": 5, "b": 3})
    pairs = make_ab_pairs(m, True, seed=0, epoch=0)
    assert sorted(p.x_ref for p in pairs) == sorted(e.path for e in m.entries)
    assert all(p.x_ref != p.x_target and p.x_target.startswith(p.shared_concept) for p in pairs)
    check_pairs(pairs, True)
    plain = make_ab_pairs(m, False)
    assert all(p.x_ref == p.x_target for p in plain)
    assert plain[0].caption == f"a photo of a {plain[0].shared_concept}"


def test_ab_pairs_singleton():
    with pytest.raises(ConfigError, match="singleton"):
        make_ab_pairs(small_manifest({"a": 3, "b": 1}), True)


def test_ab_pair_sampling_is_uniform():
    m = small_manifest({"a": 5})
    counts = Counter()
    for epoch in range(1000):
        counts.update((p.x_ref, p.x_target) for p in make_ab_pairs(m, True, seed=0, epoch=epoch))
    assert len(counts) == 20
    _, p = stats.chisquare(list(counts.values()))
    assert p > 0.01


def coco_root(tmp_path, n):
    root = tmp_path / "coco"
    (root / "val2017").mkdir(parents=True)
    (root / "annotations").mkdir()
    images = [{"id": i, "file_name": f"{i:012d}.jpg"} for i in range(n)]
    anns = [{"id": 10 * i + j, "image_id": i, "caption": f"caption {j} of {i}"} for i in range(n) for j in range(5)]
    (root / "annotations" / "captions_val2017.json").write_text(json.dumps({"images": images, "annotations": anns}))
    return root


def test_coco_eval_set(tmp_path):
    data = load_eval_set("coco_val_5k", coco_root(tmp_path, 5000))
    assert len(data) == 5000
    assert [r.image_id for r in data.records[:3]] == [0, 1, 2]
    assert len(data.records[0].captions) == 5


def test_eval_set_size_checked(tmp_path):
    root = coco_root(tmp_path, 10)
    with pytest.raises(DatasetError, match="expected 5000"):
        load_eval_set("coco_val_5k", root)
    assert len(load_eval_set("retrieval_pairs", root, allow_partial=True)) == 10


def test_missing_eval_data_is_actionable(tmp_path):
    with pytest.raises(DatasetError, match="cocodataset.org"):
        load_eval_set("coco_val_5k", tmp_path)
    with pytest.raises(DatasetError, match="image-net.org"):
        load_eval_set("imagenet_val", tmp_path)
    with pytest.raises(InputError):
        load_eval_set("laion", tmp_path)


def test_imagenet_eval_set(tmp_path):
    for wnid in ("n01440764", "n01443537"):
        touch_images(tmp_path / "val" / wnid, 3)
    (tmp_path / "LOC_synset_mapping.txt").write_text("n01440764 tench, Tinca tinca\nn01443537 goldfish\n")
    data = load_eval_set("imagenet_val", tmp_path, allow_partial=True)
    assert data.classnames == ["tench", "goldfish"]
    assert [r.label for r in data.records] == [0, 0, 0, 1, 1, 1]


def test_subsample_deterministic_subset():
    full = EvalSet("x", [EvalRecord(f"{i}.png", i % 7) for i in range(1000)])
    a, b = subsample(full, 100, seed=1), subsample(full, 100, seed=1)
    assert [r.path for r in a.records] == [r.path for r in b.records]
    assert {r.path for r in a.records} <= {r.path for r in full.records}
    assert len({r.path for r in a.records}) == 100


def test_train_eval_disjointness(tmp_path):
    m = small_manifest({"a": 2})
    check_disjoint(m, EvalSet("x", [EvalRecord("elsewhere.png")]))
    with pytest.raises(ConfigError):
        check_disjoint(m, EvalSet("x", [EvalRecord("a/0.png")]))
