"""On-disk formats: checkpoints, importance tables and recipes.

Byte-level layouts are documented in FORMATS.md at the repository root.
"""
from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .arch import ArchSpec, shape_table
from .errors import StaleArtifactError, ValidationError
from .importance import ImportanceTable
from .model import Model
from .surgeon import PruneRecipe, validate

CKPT_MAGIC = b"VPCKPT\x00\x01"
CKPT_VERSION = 1
TABLE_MAGIC = "VITPRUNE-IMPORTANCE"
TABLE_VERSION = 1
_DTYPES = {"<f8": np.float64, "<f4": np.float32}


class FormatError(ValidationError):
    kind = "format"


@contextlib.contextmanager
def locked_write(path, mode: str = "wb"):
    """Exclusive advisory lock on ``path``; content lands atomically via rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(str(path) + ".lock", "a") as lk:
        fcntl.flock(lk, fcntl.LOCK_EX)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        try:
            with os.fdopen(fd, mode) as f:
                yield f
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise
        finally:
            fcntl.flock(lk, fcntl.LOCK_UN)
    with contextlib.suppress(FileNotFoundError):
        os.unlink(str(path) + ".lock")


# -- checkpoints -----------------------------------------------------------

def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    table = shape_table(model.spec)
    entries, blobs, off = [], [], 0
    for name, shape in table.items():
        w = np.asarray(model.weights[name])
        if w.dtype not in (np.float64, np.float32):
            raise ValueError(f"{name}: unsupported dtype {w.dtype}")
        data = np.ascontiguousarray(w, dtype=w.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(w.shape), "dtype": w.dtype.newbyteorder("<").str,
                        "offset": off, "nbytes": len(data)})
        blobs.append(data)
        off += len(data)
    header = json.dumps({"spec": model.spec.to_dict(), "tensors": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    with locked_write(path) as f:
        f.write(checkpoint_bytes(model, meta))


def read_checkpoint(buf: bytes, source: str = "checkpoint") -> tuple[Model, dict]:
    if len(buf) < len(CKPT_MAGIC) + 8 + 32 or buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, len(CKPT_MAGIC))
    if version > CKPT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version} is newer than supported {CKPT_VERSION}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{source}: checksum mismatch (file corrupted)")
    start = len(CKPT_MAGIC) + 8
    try:
        header = json.loads(body[start:start + hlen])
        spec = ArchSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{source}: unreadable header: {e}") from None
    data = memoryview(body)[start + hlen:]
    weights = {}
    for e in header["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise FormatError(f"{source}: tensor {e['name']} has unsupported dtype {e['dtype']}")
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).astype(dt).reshape(e["shape"])
        weights[e["name"]] = arr
    model = Model(spec, weights)
    diags = validate(spec, weights)
    if diags:
        raise ValidationError(f"{source}: {diags[0].where}: {diags[0].message}", diags)
    return model, header.get("meta", {})


def load_checkpoint(path, with_meta: bool = False):
    with open(path, "rb") as f:
        model, meta = read_checkpoint(f.read(), str(path))
    return (model, meta) if with_meta else model


# -- importance tables -----------------------------------------------------

def table_text(table: ImportanceTable) -> str:
    doc = {
        "format": TABLE_MAGIC,
        "version": TABLE_VERSION,
        "meta": table.meta,
        "channels": [[c, s, j, v] for (c, s, j), v in table.channel_scores.items()],
        "blocks": table.block_scores,
    }
    return json.dumps(doc, indent=1) + "\n"


def save_table(table: ImportanceTable, path) -> None:
    with locked_write(path, "w") as f:
        f.write(table_text(table))


def parse_table(text: str, source: str = "table") -> ImportanceTable:
    try:
        doc = json.loads(text)
    except ValueError as e:
        raise FormatError(f"{source}: not JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != TABLE_MAGIC:
        raise FormatError(f"{source}: not an importance table")
    if int(doc.get("version", 0)) > TABLE_VERSION:
        raise FormatError(f"{source}: table version {doc['version']} is newer than supported {TABLE_VERSION}")
    ch = {(int(c), str(s), int(j)): float(v) for c, s, j, v in doc["channels"]}
    return ImportanceTable(ch, {str(k): float(v) for k, v in doc["blocks"].items()}, dict(doc["meta"]))


def load_table(path, model: Model | None = None, allow_stale: bool = False) -> ImportanceTable:
    with open(path) as f:
        table = parse_table(f.read(), str(path))
    if model is not None and not allow_stale:
        table.check_model(model)
    return table


# -- recipes ---------------------------------------------------------------

def save_recipe(recipe: PruneRecipe, path) -> None:
    with locked_write(path, "w") as f:
        f.write(recipe.to_text())


def load_recipe(path, model: Model | None = None, allow_stale: bool = False) -> PruneRecipe:
    from .surgeon import spec_fingerprint

    with open(path) as f:
        try:
            recipe = PruneRecipe.from_text(f.read())
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from None
    if model is not None and not allow_stale and recipe.source != spec_fingerprint(model.spec):
        raise StaleArtifactError(f"{path}: recipe source does not match the model architecture")
    return recipe


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
