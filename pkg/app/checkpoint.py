"""
Checkpoint files for trained models.

A checkpoint is a JSON document holding the embedding description, the
SCD taps, the score scale and every parameter and running statistic as
base64-encoded little-endian float64 bytes, so a reload is bit-exact.
"""

import base64
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from app.errors import ConfigError
from app.layers import EmbeddingConfig
from app.siamese import SiameseModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "scd-siamese-checkpoint"
CHECKPOINT_VERSION = 1


def encode_array(array: np.ndarray) -> dict[str, Any]:
    values = np.ascontiguousarray(array, dtype="<f8")
    return {
        "shape": list(values.shape),
        "dtype": "<f8",
        "data": base64.b64encode(values.tobytes()).decode("ascii"),
    }


def decode_array(entry: dict[str, Any]) -> np.ndarray:
    """Inverse of encode_array."""
    try:
        raw = base64.b64decode(entry["data"])
        values = np.frombuffer(raw, dtype=entry["dtype"]).astype(np.float64)
        return values.reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Malformed array entry in checkpoint: {e}") from e


def save_checkpoint(
    model: SiameseModel,
    path: str | Path,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """
    Write a model to disk.

    Args:
        model: Model to save
        path: Target file; parent directories are created
        metadata: Extra JSON-serialisable fields (epoch, variant tag, ...)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "embedding": model.embedding.model_dump(mode="json"),
        "scd_taps": list(model.scd_taps),
        "score_scale": model.score_scale,
        "metadata": metadata or {},
        "parameters": {key: encode_array(value) for key, value in model.state_dict().items()},
    }
    path.write_text(json.dumps(document, sort_keys=True, indent=1), encoding="utf-8")
    logger.info(f"Saved checkpoint to {path}")
    return path


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    """Read and sanity-check a checkpoint document without building a model."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Checkpoint {path} is not valid JSON: {e}") from e

    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {document.get('version')}")
    for key in ("embedding", "parameters"):
        if key not in document:
            raise ConfigError(f"{path}: missing '{key}'")
    return document


def load_checkpoint(path: str | Path) -> SiameseModel:
    """
    Rebuild a model from a checkpoint.

    Returns:
        SiameseModel with parameters and batch-norm statistics restored
    """
    document = read_checkpoint(path)
    try:
        embedding = EmbeddingConfig.model_validate(document["embedding"])
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid embedding description: {e}") from e

    model = SiameseModel(
        embedding,
        scd_taps=document.get("scd_taps", ()),
        score_scale=document.get("score_scale", 1e-3),
    )
    model.load_state_dict({key: decode_array(entry) for key, entry in document["parameters"].items()})
    logger.info(f"Loaded checkpoint {path} ({embedding.name}, {len(document['parameters'])} arrays)")
    return model
