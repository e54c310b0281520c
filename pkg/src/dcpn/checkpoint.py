"""Checkpoint files: a torch blob plus a JSON header sidecar carrying its sha256."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from pathlib import Path

import torch


class ChecksumError(RuntimeError):
    pass


def config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def header_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: Path | str, state: dict, header: dict) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    blob = buf.getvalue()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    header = dict(header, sha256=hashlib.sha256(blob).hexdigest())
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True))
    return header


def read_header(path: Path | str) -> dict:
    hp = header_path(path)
    if not hp.exists():
        raise FileNotFoundError(f"checkpoint header {hp} missing")
    return json.loads(hp.read_text())


def load_checkpoint(path: Path | str) -> tuple[dict, dict]:
    header = read_header(path)
    digest = sha256_file(path)
    if digest != header.get("sha256"):
        raise ChecksumError(f"checkpoint {path} checksum {digest[:12]} does not match header")
    state = torch.load(path, map_location="cpu", weights_only=False)
    return state, header
