"""On-disk formats.

Binary files pair a structured text (JSON) header with raw little-endian
blocks.  Single-file formats put the header on the first line::

    {"format": "...", ...}\\n<raw bytes>

Directory formats (checkpoints, datasets) keep a ``manifest.json`` next to
their raw blocks and record a SHA-256 per block.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError
from .tokenizer import Codebook

CODEBOOK_FORMAT = "ordermarg-codebook/1"
TOKENS_FORMAT = "ordermarg-tokengrid/1"
BUNDLE_FORMAT = "ordermarg-tensors/1"


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# Measured wall-clock columns; everything else a run writes is a pure function
# of its inputs, config and seeds.
TIMING_COLUMNS = ("wall_clock", "mean_seconds", "p50_seconds", "p95_seconds", "hardware")


def timing_columns(path) -> list[str]:
    """Timing columns present in the header of a CSV file (empty for other files)."""
    path = Path(path)
    if path.suffix != ".csv":
        return []
    with open(path) as f:
        header = f.readline().rstrip("\n").split(",")
    return [h for h in header if h in TIMING_COLUMNS]


def untimed_sha256(path) -> str:
    """SHA-256 of a file with any timing columns blanked (plain hash otherwise)."""
    if not timing_columns(path):
        return sha256_file(path)
    lines = Path(path).read_text().split("\n")
    header = lines[0].split(",")
    drop = {i for i, h in enumerate(header) if h in TIMING_COLUMNS}
    kept = [",".join("" if i in drop else v for i, v in enumerate(line.split(",")))
            if line else line for line in lines]
    return sha256_bytes("\n".join(kept).encode())


def _write_header_file(path, header: dict, payload: bytes) -> None:
    line = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(line)
        f.write(payload)


def _read_header_file(path, fmt: str) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: missing header line")
    header = json.loads(raw[:nl])
    if header.get("format") != fmt:
        raise ConfigError(f"{path}: expected format {fmt}, found {header.get('format')}")
    payload = raw[nl + 1:]
    if "sha256" in header and sha256_bytes(payload) != header["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return header, payload


# -- codebook / token grids ----------------------------------------------

def write_codebook(path, cb: Codebook) -> None:
    """Header (V, D, patch geometry) + float32 centroids [V, D], then mean [D], std [D]."""
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in (cb.centroids, cb.mean, cb.std))
    header = {"format": CODEBOOK_FORMAT, "V": cb.vocab, "D": cb.dim, "patch_h": cb.patch_h,
              "patch_w": cb.patch_w, "channels": cb.channels, "blocks": ["centroids", "mean", "std"],
              "sha256": sha256_bytes(payload)}
    _write_header_file(path, header, payload)


def read_codebook(path) -> Codebook:
    h, payload = _read_header_file(path, CODEBOOK_FORMAT)
    v, d = h["V"], h["D"]
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if arr.size != v * d + 2 * d:
        raise ConfigError(f"{path}: payload size does not match V={v}, D={d}")
    return Codebook(arr[:v * d].reshape(v, d), h["patch_h"], h["patch_w"], h["channels"],
                    mean=arr[v * d:v * d + d], std=arr[v * d + d:])


def write_token_grids(path, tokens: np.ndarray, grid: tuple[int, int], vocab: int) -> None:
    """Header (H_t, W_t, V, count) + one uint16 id per token, row-major."""
    tokens = np.asarray(tokens).reshape(-1, grid[0] * grid[1])
    if vocab > 65536 or (tokens.size and tokens.max() >= vocab):
        raise ConfigError("token ids must fit the declared vocabulary and 16 bits")
    payload = np.ascontiguousarray(tokens, dtype="<u2").tobytes()
    header = {"format": TOKENS_FORMAT, "H_t": grid[0], "W_t": grid[1], "V": vocab,
              "count": len(tokens), "sha256": sha256_bytes(payload)}
    _write_header_file(path, header, payload)


def read_token_grids(path) -> tuple[np.ndarray, tuple[int, int], int]:
    h, payload = _read_header_file(path, TOKENS_FORMAT)
    n = h["H_t"] * h["W_t"]
    tokens = np.frombuffer(payload, dtype="<u2").astype(np.int64).reshape(h["count"], n)
    return tokens, (h["H_t"], h["W_t"]), h["V"]


# -- tensor bundles (checkpoints) ----------------------------------------

def write_bundle(directory, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """``manifest.json`` (meta + tensor index) + ``tensors.bin`` (float32, in index order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blobs.append(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        offset += arr.nbytes
    blob = b"".join(blobs)
    manifest = {"format": BUNDLE_FORMAT, "dtype": "<f4", "tensors": index,
                "sha256": sha256_bytes(blob), "meta": meta}
    (directory / "tensors.bin").write_bytes(blob)
    (directory / "manifest.json").write_text(dumps(manifest))


def read_bundle(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ConfigError(f"{directory}: not a tensor bundle")
    blob = (directory / "tensors.bin").read_bytes()
    if sha256_bytes(blob) != manifest["sha256"]:
        raise ChecksumError(f"{directory}: tensors.bin does not match its recorded checksum")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return tensors, manifest["meta"]


# -- datasets ------------------------------------------------------------

def write_image_dataset(directory, images: np.ndarray, labels: np.ndarray, split: np.ndarray,
                        spec: dict, class_names=()) -> None:
    """Manifest + ``images.u8`` (8-bit pixels) + ``labels.u16`` + ``split.u8``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pix = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    blocks = {"images.u8": pix.tobytes(),
              "labels.u16": np.asarray(labels, dtype="<u2").tobytes(),
              "split.u8": np.asarray(split, dtype=np.uint8).tobytes()}
    for name, data in blocks.items():
        (directory / name).write_bytes(data)
    manifest = {"kind": "images", "spec": spec, "count": int(len(labels)),
                "image_shape": list(pix.shape[1:]), "n_classes": int(spec.get("n_classes", 0)
                                                                      or len(class_names)),
                "class_names": list(class_names),
                "checksums": {k: sha256_bytes(v) for k, v in blocks.items()}}
    (directory / "manifest.json").write_text(dumps(manifest))


def write_token_dataset(directory, tokens: np.ndarray, labels: np.ndarray, split: np.ndarray,
                        grid: tuple[int, int], vocab: int, n_classes: int, spec: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_token_grids(directory / "tokens.tg", tokens, grid, vocab)
    blocks = {"labels.u16": np.asarray(labels, dtype="<u2").tobytes(),
              "split.u8": np.asarray(split, dtype=np.uint8).tobytes()}
    for name, data in blocks.items():
        (directory / name).write_bytes(data)
    checksums = {k: sha256_bytes(v) for k, v in blocks.items()}
    checksums["tokens.tg"] = sha256_file(directory / "tokens.tg")
    manifest = {"kind": "tokens", "spec": spec, "count": int(len(labels)),
                "grid": list(grid), "vocab": vocab, "n_classes": n_classes,
                "checksums": checksums}
    (directory / "manifest.json").write_text(dumps(manifest))


def read_dataset(directory):
    """Load either dataset kind, verifying every block checksum."""
    from .data import ImageDataset, TokenDataset

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    for name, digest in manifest["checksums"].items():
        if sha256_file(directory / name) != digest:
            raise ChecksumError(f"{directory / name}: checksum mismatch")
    labels = np.frombuffer((directory / "labels.u16").read_bytes(), dtype="<u2").astype(np.int64)
    split = np.frombuffer((directory / "split.u8").read_bytes(), dtype=np.uint8).astype(np.int64)
    if manifest["kind"] == "images":
        shape = [manifest["count"], *manifest["image_shape"]]
        pix = np.frombuffer((directory / "images.u8").read_bytes(), dtype=np.uint8).reshape(shape)
        return ImageDataset(pix.astype(np.float64) / 255.0, labels, split,
                            manifest["n_classes"], tuple(manifest["class_names"])), manifest
    tokens, grid, vocab = read_token_grids(directory / "tokens.tg")
    return TokenDataset(tokens, labels, split, vocab, manifest["n_classes"], grid), manifest


# -- heatmaps / tables ---------------------------------------------------

def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM, min-max normalized; bounds go to ``<path>.txt``."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pix.tobytes())
    Path(str(path) + ".txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def write_grid_csv(path, values: np.ndarray) -> None:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    with open(path, "w") as f:
        for row in values:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def write_records_csv(path, records: list[dict], fields: list[str]) -> None:
    with open(path, "w") as f:
        f.write(",".join(fields) + "\n")
        for rec in records:
            f.write(",".join(_fmt(rec.get(k, "")) for k in fields) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    Path(tmp).write_text(text)
    os.replace(tmp, path)
