"""Model checkpoints: a JSON manifest next to a raw little-endian parameter blob.

``save_checkpoint(model, "run/base")`` writes ``run/base.json`` and
``run/base.bin``. The manifest records layer specs, split point, frame
rates, loss weights, per-array offsets into the blob and the model hash.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from acom.errors import ConfigError, FramingError
from acom.model.losses import LossWeights
from acom.model.network import SplitModel

FORMAT = "acom-model"
VERSION = 1
DTYPE = "<f8"


def _paths(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".json", ".bin"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def manifest(model: SplitModel, weights: LossWeights | None = None) -> dict:
    weights = weights or LossWeights()
    params, offset = [], 0
    for layer, name, arr in model.parameters():
        params.append({"layer": layer, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    return {
        "format": FORMAT,
        "version": VERSION,
        "task": model.task,
        "layers": model.specs(),
        "split": model.split,
        "input_rate": model.input_rate,
        "frame_rate": model.frame_rate(),
        "lambda": weights.lam,
        "beta": weights.beta,
        "epsilon": weights.epsilon,
        "normalize_dequantized": model.normalize_dequantized,
        "dtype": DTYPE,
        "params": params,
        "blob_bytes": offset,
        "model_hash": f"{model.hash():016x}",
    }


def save_checkpoint(model: SplitModel, prefix, weights: LossWeights | None = None):
    """Write the manifest and blob; returns both paths."""
    meta_path, blob_path = _paths(prefix)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(model.param_bytes())
    meta_path.write_text(json.dumps(manifest(model, weights), indent=2) + "\n")
    return meta_path, blob_path


def load_checkpoint(prefix):
    """Returns ``(model, weights)``; the blob must hash to ``model_hash``."""
    meta_path, blob_path = _paths(prefix)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{meta_path}: not valid JSON ({exc})") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise ConfigError(f"{meta_path}: not a version {VERSION} model checkpoint")
    if meta.get("dtype") != DTYPE:
        raise ConfigError(f"{meta_path}: unsupported parameter dtype {meta.get('dtype')!r}")
    blob = blob_path.read_bytes()
    if len(blob) != meta["blob_bytes"]:
        raise FramingError(f"{blob_path}: expected {meta['blob_bytes']} bytes, found {len(blob)}",
                           offset=min(len(blob), meta["blob_bytes"]))
    model = SplitModel.from_specs(meta["layers"], meta["split"], meta["input_rate"], meta["task"],
                                  normalize_dequantized=meta.get("normalize_dequantized", False))
    entries = model.parameters()
    if len(entries) != len(meta["params"]):
        raise ConfigError(f"{meta_path}: parameter table does not match the layer specs")
    for (layer, name, arr), entry in zip(entries, meta["params"]):
        if (layer, name, list(arr.shape)) != (entry["layer"], entry["name"], entry["shape"]):
            raise ConfigError(f"{meta_path}: parameter {entry['layer']}.{entry['name']} has the wrong shape")
        start = entry["offset"]
        arr[...] = np.frombuffer(blob, dtype=DTYPE, count=arr.size, offset=start).reshape(arr.shape)
    if f"{model.hash():016x}" != meta["model_hash"]:
        raise FramingError(f"{blob_path}: parameters do not match model_hash {meta['model_hash']}")
    weights = LossWeights(meta["lambda"], meta["beta"], meta["epsilon"])
    return model, weights
