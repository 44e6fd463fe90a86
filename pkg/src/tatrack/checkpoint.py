"""Checkpoint format: a text manifest plus one blob of little-endian float32 values.

Manifest layout::

    # tatrack checkpoint v1
    @config dim=64
    ...
    <name> <shape as AxBxC> f32 <byte offset> <trainable 0|1|buffer>

Entries appear in blob order. Loading checks every name and shape against a
freshly built model of the recorded config and refuses anything that does
not match exactly.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import LoadError
from .model import ModelConfig, TATrack

MANIFEST = "manifest.txt"
BLOB = "weights.bin"
HEADER = "# tatrack checkpoint v1"


def _entries(model: TATrack):
    for name, p in model.named_params():
        yield name, p.data, "1" if p.trainable else "0"
    for name, buf in model.named_buffers():
        yield name, buf, "buffer"


def save_checkpoint(model: TATrack, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    for k, v in model.cfg.to_dict().items():
        lines.append(f"@config {k}={v}")
    for k, v in (extra or {}).items():
        lines.append(f"@meta {k}={v}")
    offset = 0
    chunks = []
    for name, arr, flag in _entries(model):
        data = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {shape} f32 {offset} {flag}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> tuple[dict, dict, list]:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read manifest in {path}: {exc}") from exc
    if not text or text[0].strip() != HEADER:
        raise LoadError(f"{path / MANIFEST}: missing header line {HEADER!r}")
    config, meta, entries = {}, {}, []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith(("@config ", "@meta ")):
            tag, kv = line.split(" ", 1)
            k, _, v = kv.partition("=")
            (config if tag == "@config" else meta)[k] = v
            continue
        parts = line.split()
        if len(parts) != 5 or parts[2] != "f32":
            raise LoadError(f"{path / MANIFEST}:{lineno}: malformed entry {line!r}")
        name, shape, _, off, flag = parts
        try:
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            entries.append((name, dims, int(off), flag))
        except ValueError as exc:
            raise LoadError(f"{path / MANIFEST}:{lineno}: bad shape/offset in {line!r}") from exc
    return config, meta, entries


def load_checkpoint(path, cfg: ModelConfig | None = None) -> TATrack:
    """Build a model from the manifest config (or ``cfg``) and fill it from the blob."""
    path = Path(path)
    config, _, entries = read_manifest(path)
    if cfg is None:
        try:
            cfg = ModelConfig.from_dict(config)
        except (KeyError, ValueError) as exc:
            raise LoadError(f"{path}: incomplete model config in manifest: {exc}") from exc
    model = TATrack(cfg)
    blob = (path / BLOB).read_bytes() if (path / BLOB).exists() else None
    if blob is None:
        raise LoadError(f"{path}: missing {BLOB}")
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    seen = set()
    end = 0
    for name, dims, off, flag in entries:
        if name not in expected:
            raise LoadError(f"{path}: unexpected entry {name!r} for this config")
        target = params[name].data if name in params else buffers[name]
        if tuple(target.shape) != dims:
            raise LoadError(f"{path}: {name} has shape {dims}, config expects {tuple(target.shape)}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if off != end or off + nbytes > len(blob):
            raise LoadError(f"{path}: {name} offset {off} inconsistent with blob of {len(blob)} bytes")
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        if name in params:
            params[name].assign(values)
            params[name].set_trainable(flag == "1")
        else:
            target[...] = values
        seen.add(name)
        end = off + nbytes
    missing = expected - seen
    if missing:
        raise LoadError(f"{path}: missing entries {sorted(missing)[:5]}")
    if end != len(blob):
        raise LoadError(f"{path}: blob has {len(blob) - end} trailing bytes")
    return model


def copy_weights(src: TATrack, dst: TATrack, prefixes=("backbone.", "head.")) -> None:
    """Copy parameters and buffers whose names start with ``prefixes`` from ``src`` into ``dst``."""
    sp, sb = dict(src.named_params()), dict(src.named_buffers())
    for name, p in dst.named_params():
        if name.startswith(prefixes):
            p.assign(sp[name].data)
    for name, b in dst.named_buffers():
        if name.startswith(prefixes):
            b[...] = sb[name]


def frozen_digest(model: TATrack) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.frozen_named(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
