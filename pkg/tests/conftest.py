import numpy as np
import pytest
from PIL import Image

from sdipc.pipeline import SDIPCPipeline


def make_image(seed: int, size: int = 64) -> Image.Image:
    """Smooth coloured blobs; distinct seeds give distinct images."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(3):
        cx, cy, r = rng.uniform(0.2, 0.8, 2).tolist() + [rng.uniform(0.1, 0.4)]
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2))
        img += blob[..., None] * rng.uniform(0, 1, 3)
    img = img / img.max() * 255
    return Image.fromarray(img.astype(np.uint8))


def write_images(directory, n: int, seed: int = 0, size: int = 64, prefix: str = "img"):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        p = directory / f"{prefix}_{i:03d}.png"
        make_image(seed * 1000 + i, size).save(p)
        paths.append(p)
    return paths


@pytest.fixture(scope="session")
def pipe():
    """Shared tiny pipeline; tests must not attach prompts or deltas to it."""
    return SDIPCPipeline.tiny(0)


@pytest.fixture
def fresh_pipe():
    return SDIPCPipeline.tiny(0)


@pytest.fixture(scope="session")
def image_paths(tmp_path_factory):
    return [str(p) for p in write_images(tmp_path_factory.mktemp("imgs"), 6, seed=1)]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
