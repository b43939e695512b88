"""Manifest + flat little-endian float64 blob storage.

The manifest is JSON listing each array's name, shape, byte offset and
element count; the blob is the arrays' raw bytes back to back.  Writing is
deterministic (sorted keys, fixed separators), so equal inputs give
byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "dyss-arrays/1"
DTYPE = np.dtype("<f8")


class ManifestError(ValueError):
    """Manifest or blob does not match the expected layout."""


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def pack(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def unpack(entries: list[dict], blob: bytes, where: str = "blob") -> dict[str, np.ndarray]:
    out = {}
    for i, e in enumerate(entries):
        for field in ("name", "shape", "offset", "count"):
            if field not in e:
                raise ManifestError(f"{where}: entry {i} is missing field '{field}'")
        shape = tuple(int(s) for s in e["shape"])
        count = int(e["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise ManifestError(f"{where}: entry '{e['name']}' field 'shape' {shape} disagrees with count {count}")
        start = int(e["offset"])
        stop = start + count * DTYPE.itemsize
        if stop > len(blob):
            raise ManifestError(f"{where}: size mismatch, entry '{e['name']}' needs bytes up to {stop}, "
                                f"blob has {len(blob)}")
        out[e["name"]] = np.frombuffer(blob, dtype=DTYPE, count=count, offset=start).reshape(shape).copy()
    return out


def save_arrays(directory, stem: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blob = pack(arrays)
    blob_name = f"{stem}.bin"
    (directory / blob_name).write_bytes(blob)
    manifest = {"format": FORMAT, "blob": blob_name, "nbytes": len(blob), "entries": entries,
                "meta": meta or {}}
    path = directory / f"{stem}.json"
    dump_json(manifest, path)
    return path


def load_arrays(manifest_path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: not valid JSON ({exc})") from exc
    for field in ("format", "blob", "nbytes", "entries"):
        if field not in manifest:
            raise ManifestError(f"{manifest_path}: missing field '{field}'")
    if manifest["format"] != FORMAT:
        raise ManifestError(f"{manifest_path}: field 'format' is {manifest['format']!r}, expected {FORMAT!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    if len(blob) != int(manifest["nbytes"]):
        raise ManifestError(f"{manifest_path}: size mismatch, field 'nbytes' says {manifest['nbytes']} "
                            f"but blob has {len(blob)} bytes")
    return unpack(manifest["entries"], blob, str(manifest_path)), manifest.get("meta", {})
