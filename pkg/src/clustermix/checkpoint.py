"""Single-file checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 manifest length, the
JSON manifest, then the named weight arrays as raw little-endian
float64 in row-major order. The manifest records shapes, byte offsets
and a CRC per array, so truncation and byte corruption are both caught
at load time.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from pathlib import Path

import numpy as np

from .clustering import ClusterModel
from .model import Model, ModelConfig
from .tensor import make_rng

MAGIC = b"CMIXCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, corrupt, or incompatible."""


def save_checkpoint(
    path,
    model: Model,
    cluster_model: ClusterModel | None = None,
    step: int = 0,
    rng_state: dict | None = None,
    corpus_fingerprint: str | None = None,
    extra: dict | None = None,
) -> None:
    named = model.named_parameters()
    names = [name for name, _ in named]
    if len(set(names)) != len(names):
        raise CheckpointError(f"duplicate parameter names in census: {names}")

    blobs: list[bytes] = []
    arrays = []
    offset = 0
    entries: list[tuple[str, np.ndarray, bool]] = [
        (name, p.data, p.trainable) for name, p in named
    ]
    if cluster_model is not None:
        entries.append(("cluster.centroids", cluster_model.centroids, False))
    for name, data, trainable in entries:
        raw = np.ascontiguousarray(data, dtype="<f8").tobytes()
        arrays.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
            "trainable": trainable,
        })
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "adapters": model.layers[0].q_mix is not None,
        "step": step,
        "rng_state": rng_state,
        "corpus_fingerprint": corpus_fingerprint,
        "cluster": (
            {
                "final_objective": cluster_model.final_objective,
                "iterations_run": cluster_model.iterations_run,
            }
            if cluster_model is not None
            else None
        ),
        "arrays": arrays,
        "extra": extra or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest_bytes).to_bytes(8, "little"))
        fh.write(manifest_bytes)
        for raw in blobs:
            fh.write(raw)


def _read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        manifest_len = int.from_bytes(fh.read(8), "little")
        raw = fh.read(manifest_len)
        if len(raw) != manifest_len:
            raise CheckpointError(f"{path}: truncated manifest")
        manifest = json.loads(raw.decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}"
        )
    return manifest, len(MAGIC) + 8 + manifest_len


def read_manifest(path) -> dict:
    return _read_header(path)[0]


def load_checkpoint(path) -> tuple[Model, ClusterModel | None, dict]:
    path = Path(path)
    manifest, header_size = _read_header(path)
    payload = path.read_bytes()[header_size:]

    def read_array(entry: dict) -> np.ndarray:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"array {entry['name']} truncated")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"array {entry['name']} failed its checksum")
        return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    by_name = {entry["name"]: entry for entry in manifest["arrays"]}

    config = ModelConfig(**manifest["model_config"])
    model = Model(config, init_rng=make_rng(0, "checkpoint-load"))

    cluster_model = None
    if manifest["cluster"] is not None:
        centroids = read_array(by_name["cluster.centroids"])
        cluster_model = ClusterModel(
            centroids=centroids,
            final_objective=manifest["cluster"]["final_objective"],
            iterations_run=manifest["cluster"]["iterations_run"],
        )

    if manifest["adapters"]:
        model.freeze_dense()
        needs_table = config.gating_mode == "cluster" and config.combine_mode != "dense"
        centroids = cluster_model.centroids if (needs_table and cluster_model) else None
        model.attach_adapters(centroids, make_rng(0, "checkpoint-adapters"))

    expected = {name for name, _ in model.named_parameters()}
    stored = set(by_name) - {"cluster.centroids"}
    if expected != stored:
        missing = expected - stored
        surplus = stored - expected
        raise CheckpointError(
            f"parameter census mismatch: missing={sorted(missing)} surplus={sorted(surplus)}"
        )
    for name, param in model.named_parameters():
        entry = by_name[name]
        data = read_array(entry)
        if data.shape != param.data.shape:
            raise CheckpointError(
                f"array {name} has shape {data.shape}, expected {param.data.shape}"
            )
        param.data[...] = data
        if entry["trainable"]:
            param.trainable = True
            param.requires_grad = True
        else:
            param.freeze()
    return model, cluster_model, manifest
