"""Persistence: canonical JSON, cloud CSVs, dataset manifests, checkpoints.

Every artifact is byte-deterministic: JSON is dumped with sorted keys and
fixed separators, floats go through repr (shortest round-trip), cloud
CSVs carry 9 significant digits, and checkpoints are a fixed binary
container (JSON header + raw little-endian float64 blobs). Saving, then
loading, then saving again reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embeddings import PointCloud
from .network import NetConfig, NetParams
from .sampling import RigidTransform

CHECKPOINT_MAGIC = b"PCCKPT01"
CHECKPOINT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Point cloud CSV: one `x,y,z[,label]` row per point, 9 significant digits
# ---------------------------------------------------------------------------

def write_cloud_csv(path, cloud: PointCloud) -> None:
    lines = []
    labeled = cloud.labels is not None
    for i in range(cloud.n_points):
        row = ",".join("%.9g" % v for v in cloud.coords[i])
        if labeled:
            row += ",%d" % cloud.labels[i]
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud_csv(path, cloud_id: str = "") -> PointCloud:
    rows = [ln.split(",") for ln in
            Path(path).read_text(encoding="utf-8").strip().splitlines()]
    width = len(rows[0])
    if width not in (3, 4):
        raise ValueError(f"cloud CSV rows must have 3 or 4 fields, got {width}")
    coords = np.array([[float(v) for v in r[:3]] for r in rows])
    labels = np.array([int(r[3]) for r in rows]) if width == 4 else None
    return PointCloud(coords, labels=labels, id=cloud_id)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

def transform_to_dict(t: RigidTransform) -> dict:
    return {"rotation": [float(v) for v in t.rotation.reshape(-1)],
            "translation": [float(v) for v in t.translation],
            "scale": float(t.scale)}


def transform_from_dict(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]).reshape(3, 3),
                          np.array(d["translation"]), float(d["scale"]))


@dataclass
class SegmentationDataset:
    train: list         # list of PointCloud
    eval: list
    config: dict = field(default_factory=dict)


@dataclass
class MatchingDataset:
    train: list         # list of (cloud_i, cloud_j, RigidTransform)
    eval: list
    config: dict = field(default_factory=dict)


def write_segmentation_dataset(out_dir, train, eval_scenes, config: dict,
                               seed: int) -> Path:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    entries = {"train": [], "eval": []}
    for split, scenes in (("train", train), ("eval", eval_scenes)):
        for i, cloud in enumerate(scenes):
            rel = f"clouds/{split}_{i:04d}.csv"
            write_cloud_csv(out / rel, cloud)
            entries[split].append(rel)
    manifest = {"task": "segmentation", "seed": seed, "config": config,
                "files": entries}
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def write_matching_dataset(out_dir, train, eval_pairs, config: dict,
                           seed: int) -> Path:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    entries = {"train": [], "eval": []}
    for split, pairs in (("train", train), ("eval", eval_pairs)):
        for i, (cloud_i, cloud_j, transform) in enumerate(pairs):
            rel_i = f"clouds/{split}_{i:04d}_i.csv"
            rel_j = f"clouds/{split}_{i:04d}_j.csv"
            write_cloud_csv(out / rel_i, cloud_i)
            write_cloud_csv(out / rel_j, cloud_j)
            entries[split].append({"i": rel_i, "j": rel_j,
                                   "transform": transform_to_dict(transform)})
    manifest = {"task": "matching", "seed": seed, "config": config,
                "files": entries}
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_dataset(manifest_path):
    manifest = read_json(manifest_path)
    base = Path(manifest_path).parent
    task = manifest.get("task")
    if task == "segmentation":
        splits = {}
        for split in ("train", "eval"):
            splits[split] = [read_cloud_csv(base / rel, cloud_id=rel)
                             for rel in manifest["files"][split]]
        return SegmentationDataset(splits["train"], splits["eval"],
                                   manifest.get("config", {}))
    if task == "matching":
        splits = {}
        for split in ("train", "eval"):
            pairs = []
            for entry in manifest["files"][split]:
                pairs.append((read_cloud_csv(base / entry["i"], cloud_id=entry["i"]),
                              read_cloud_csv(base / entry["j"], cloud_id=entry["j"]),
                              transform_from_dict(entry["transform"])))
            splits[split] = pairs
        return MatchingDataset(splits["train"], splits["eval"],
                               manifest.get("config", {}))
    raise ValueError(f"unknown dataset task {task!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    net_config: NetConfig
    tensors: dict                      # name -> float64 ndarray
    heads: tuple
    frozen: tuple = ()
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def checkpoint_from_params(params: NetParams, metadata: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(
        net_config=params.config,
        tensors={name: np.array(v.value, dtype=np.float64)
                 for name, v in params.tensors.items()},
        heads=tuple(sorted(params.heads)),
        frozen=tuple(sorted(params.frozen)),
        metadata=dict(metadata or {}),
    )


def params_from_checkpoint(ckpt: Checkpoint) -> NetParams:
    from . import autodiff as ad
    params = NetParams(config=ckpt.net_config,
                       tensors={name: ad.Var(arr) for name, arr in ckpt.tensors.items()},
                       heads=frozenset(ckpt.heads),
                       frozen=frozenset(ckpt.frozen))
    return params


def _net_config_to_dict(cfg: NetConfig) -> dict:
    return {"embed_dim": cfg.embed_dim, "hidden": list(cfg.hidden),
            "num_classes": cfg.num_classes, "rank": cfg.rank,
            "dropout": cfg.dropout, "context_neighbors": cfg.context_neighbors,
            "head_hidden": list(cfg.head_hidden)}


def net_config_from_dict(d: dict) -> NetConfig:
    return NetConfig(embed_dim=d["embed_dim"], hidden=tuple(d["hidden"]),
                     num_classes=d["num_classes"], rank=d["rank"],
                     dropout=d["dropout"], context_neighbors=d["context_neighbors"],
                     head_hidden=tuple(d.get("head_hidden", (32,))))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.tensors)
    header = {
        "format_version": ckpt.format_version,
        "net_config": _net_config_to_dict(ckpt.net_config),
        "heads": list(ckpt.heads),
        "frozen": list(ckpt.frozen),
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
    }
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(ckpt.tensors[n], dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    offset = 16 + header_len
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[spec["name"]] = np.array(arr)  # own the memory
        offset += count * 8
    return Checkpoint(net_config=net_config_from_dict(header["net_config"]),
                      tensors=tensors, heads=tuple(header["heads"]),
                      frozen=tuple(header["frozen"]), metadata=header["metadata"],
                      format_version=header["format_version"])
