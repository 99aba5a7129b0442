"""Embedding file I/O and the toy cosine retrieval verb.

Embedding container:
    magic "XMEB" | version u32 | count u32 | dim u32 | count*dim float64 LE
plus a JSON sidecar (<file>.tags.json) listing one modality tag per row.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write
from .errors import ContractError, FormatError

EMB_MAGIC = b"XMEB"
EMB_VERSION = 1

_HEADER = struct.Struct("<4sIII")


def save_embeddings(path, matrix: np.ndarray, tags: list[str]) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"embedding matrix must be 2-D, got {matrix.shape}")
    if len(tags) != matrix.shape[0]:
        raise ContractError(f"{len(tags)} tags for {matrix.shape[0]} embeddings")
    blob = _HEADER.pack(EMB_MAGIC, EMB_VERSION, *matrix.shape)
    atomic_write(path, blob + matrix.astype("<f8").tobytes())
    sidecar = {"version": EMB_VERSION, "modalities": list(tags)}
    atomic_write(str(path) + ".tags.json",
                 json.dumps(sidecar, sort_keys=True).encode())


def load_embeddings(path) -> tuple[np.ndarray, list[str]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported embedding version {version}")
    expected = _HEADER.size + 8 * count * dim
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} != expected {expected}")
    matrix = np.frombuffer(raw, "<f8", count * dim, _HEADER.size).reshape(count, dim).copy()
    sidecar = Path(str(path) + ".tags.json")
    tags = json.loads(sidecar.read_text())["modalities"] if sidecar.exists() else []
    return matrix, tags


def rank_by_cosine(query: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """Top-k gallery indices per query row by cosine similarity, ties broken
    by the lower gallery index. Zero vectors have similarity 0 to anything."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ContractError(f"dimension mismatch: query {query.shape} vs "
                            f"gallery {gallery.shape}")
    if k < 0 or k > gallery.shape[0]:
        raise ContractError(f"k={k} outside [0, {gallery.shape[0]}]")
    if k == 0:
        return np.zeros((query.shape[0], 0), dtype=np.int64)
    qn = np.linalg.norm(query, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    sims = (query / np.where(qn == 0, 1, qn)) @ (gallery / np.where(gn == 0, 1, gn)).T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)
