"""Checkpoint container.

Layout (all little-endian)::

    8 bytes   magic  b"SINEDAE1"
    uint32    manifest length M
    M bytes   manifest, UTF-8 JSON (sorted keys)
    rest      float64 parameters, concatenated in ``manifest["param_order"]``
              (conv1, conv2, then f, phi, b / f, phi / w depending on the decoder)

The manifest holds the training config, its hash, decoder variant, epoch,
per-epoch loss history, RNG seed and parameter shapes. Nothing time- or
host-dependent is stored, so identical runs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .model import ModelConfig, SineDAE, flatten_params

if TYPE_CHECKING:
    from .training import TrainConfig

MAGIC = b"SINEDAE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save(path: str | Path, model: SineDAE, cfg: "TrainConfig", epoch: int, history: list[float]) -> None:
    order = list(model.config.param_shapes())
    cfg_dict = cfg.to_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "decoder": model.config.decoder,
        "squared": model.config.squared,
        "epoch": epoch,
        "loss_history": [float(x) for x in history],
        "seed": cfg.seed,
        "param_order": order,
        "param_shapes": {k: list(v) for k, v in model.config.param_shapes().items()},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    blob = flatten_params(model.params, order).astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(head)) + head + blob)
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    (mlen,) = struct.unpack_from("<I", data, 8)
    try:
        manifest = json.loads(data[12:12 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, data[12 + mlen:]


def load(path: str | Path) -> tuple[SineDAE, dict]:
    """Return the model and its manifest."""
    from .training import TrainConfig

    manifest, blob = read_manifest(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    mcfg: ModelConfig = cfg.model
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    params, pos = {}, 0
    for name in manifest["param_order"]:
        shape = tuple(manifest["param_shapes"][name])
        size = int(np.prod(shape))
        if pos + size > flat.size:
            raise CheckpointError(f"{path}: parameter blob truncated at {name}")
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise CheckpointError(f"{path}: {flat.size - pos} trailing values in parameter blob")
    return SineDAE(mcfg, params), manifest
