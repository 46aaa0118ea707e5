"""Checkpoints: a HEAW0001 weight file plus a JSON sidecar.

The sidecar (``<weights>.json``) records the model spec needed to rebuild
and validate the weights, and optionally the data description and metrics
measured when the checkpoint was written, so an evaluation can be replayed.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple

from .exceptions import FormatError
from .model import ModelSpec, spec_for_weights
from .weights import Weights, load_weights, save_weights


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, weights: Weights, spec: ModelSpec, meta: Optional[dict] = None) -> None:
    save_weights(weights, path)
    doc = {"spec": asdict(spec)}
    if meta:
        doc.update(meta)
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Tuple[Weights, ModelSpec, dict]:
    """Load weights validated against the spec stored in the sidecar."""
    side = sidecar_path(path)
    if not side.is_file():
        raise FormatError(f"{path}: missing sidecar {side.name} describing the model spec")
    try:
        doc = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: {exc}") from None
    if "spec" not in doc:
        raise FormatError(f"{side}: no 'spec' entry")
    spec = ModelSpec.from_dict(doc.pop("spec"))
    return load_weights(path, spec_for_weights(spec)), spec, doc
