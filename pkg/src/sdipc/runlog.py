"""Per-run manifest: everything needed to reproduce a command's outputs."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .exceptions import ConfigError, StateError

MANIFEST_NAME = "run.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tensor(t) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for q in sorted(x for x in p.rglob("*") if x.is_file()):
                out[str(q)] = sha256_file(q)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    config_sources: dict = field(default_factory=dict)
    model_tags: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    input_hashes: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    latent_hashes: dict = field(default_factory=dict)
    status: str = "running"
    events: list[dict] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    wall_clock: float | None = None
    environment: dict = field(
        default_factory=lambda: {"python": sys.version.split()[0], "platform": platform.platform()}
    )
    path: Path | None = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, out_dir, name: str = MANIFEST_NAME, **kwargs) -> "RunManifest":
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        if path.exists():
            raise StateError(f"{out_dir} already holds a run manifest; choose a fresh output directory")
        m = cls(**kwargs)
        m.path = path
        m.log("start")
        return m

    def log(self, event: str, **data) -> None:
        """Append an event and flush to disk; earlier events are never rewritten."""
        self.events.append({"time": time.time(), "event": event, **data})
        self.write()

    def add_output(self, path, latents=None) -> None:
        self.outputs.append(str(path))
        if latents is not None:
            self.latent_hashes[str(Path(path).name)] = sha256_tensor(latents)

    def finish(self, status: str = "complete") -> None:
        self.status = status
        self.wall_clock = time.time() - self.started
        self.log(status)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("path")
        return d

    def write(self) -> None:
        if self.path is None:
            return
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str))
        os.replace(tmp, self.path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise ConfigError(f"run manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
            m = cls(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed run manifest ({exc})") from exc
        m.path = None
        return m
