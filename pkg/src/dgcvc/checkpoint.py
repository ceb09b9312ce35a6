"""Checkpoint container shared by the ASV and conversion models.

A checkpoint is a ``torch.save`` archive holding ``payload`` (bytes) and its
SHA-256 ``content_hash``. The payload is itself a ``torch.save`` of a dict
with named state-dict blobs, the step count and the INI config snapshot.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

from .config import ARCHITECTURE_SECTIONS, RunConfig, from_ini
from .errors import IntegrityError

FORMAT = "dgcvc-checkpoint/1"


def save_checkpoint(path, kind: str, blobs: dict, cfg: RunConfig, step: int, extra: dict | None = None) -> str:
    payload = {
        "format": FORMAT,
        "kind": kind,
        "blobs": blobs,
        "step": int(step),
        "config": cfg.to_ini(),
        "config_hash": cfg.hash,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    raw = buf.getvalue()
    digest = hashlib.sha256(raw).hexdigest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = io.BytesIO()
    torch.save({"format": FORMAT, "content_hash": digest, "payload": raw}, out)
    path.write_bytes(out.getvalue())
    return digest


def load_checkpoint(path, kind: str | None = None, expect: RunConfig | None = None) -> dict:
    """Verify and unpack a checkpoint.

    Raises :class:`IntegrityError` on hash mismatch, wrong kind, or when the
    architecture sections disagree with ``expect``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        outer = torch.load(io.BytesIO(path.read_bytes()), weights_only=False)
    except Exception as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(outer, dict) or outer.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not a {FORMAT} file")
    raw = outer["payload"]
    if hashlib.sha256(raw).hexdigest() != outer["content_hash"]:
        raise IntegrityError(f"{path}: content hash mismatch")
    payload = torch.load(io.BytesIO(raw), weights_only=False)
    payload["content_hash"] = outer["content_hash"]
    payload["run_config"] = from_ini(payload["config"])
    if kind is not None and payload["kind"] != kind:
        raise IntegrityError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    if expect is not None:
        check_architecture(payload["run_config"], expect, path)
    return payload


def check_architecture(stored: RunConfig, expect: RunConfig, where="checkpoint",
                       sections=ARCHITECTURE_SECTIONS) -> None:
    a, b = stored.architecture(), expect.architecture()
    for name in sections:
        if a[name] != b[name]:
            diff = sorted(k for k in a[name] if a[name][k] != b[name].get(k))
            raise IntegrityError(f"{where}: architecture mismatch in [{name}] ({', '.join(diff)})")
