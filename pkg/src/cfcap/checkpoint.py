"""Self-describing single-file checkpoint container.

Layout: one UTF-8 JSON header line (version, model config, stage tag, array
table with offsets), then the raw little-endian array bytes in canonical
parameter order. Byte-deterministic for identical inputs, unlike zip-based
containers that embed timestamps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelConfig

MAGIC = "cfcap-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    stage: str
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: dict, stage: str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays, blobs, offset = [], [], 0
    for name in PARAM_NAMES:
        a = np.ascontiguousarray(params[name], dtype=np.float64)
        b = a.tobytes()
        arrays.append({"name": name, "dtype": "float64", "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "model_config": config.to_dict(),
        "stage": stage,
        "extra": extra or {},
        "arrays": arrays,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode())
    if header.get("magic") != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    params = {}
    for spec in header["arrays"]:
        raw = payload[spec["offset"] : spec["offset"] + spec["nbytes"]]
        params[spec["name"]] = np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).copy()
    return Checkpoint(
        config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        stage=header["stage"],
        extra=header.get("extra", {}),
    )
