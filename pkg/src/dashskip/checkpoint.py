"""``dash-ckpt-v1`` checkpoint documents.

A checkpoint is one JSON document holding the model config, the training
seed, every weight array as nested lists, and optional ``scale_table`` and
``scorer`` sections. Keys are sorted and floats use Python's shortest
round-trip repr, so the same weights always serialise to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .calibration import ScaleTable
from .model import ModelConfig, ToyModel
from .policy import ScorerParams, scorer_from_dict, scorer_to_dict
from .tasks import TaskSpec

FORMAT = "dash-ckpt-v1"


class CheckpointError(ValueError):
    pass


def _weights(model: ToyModel) -> dict:
    return {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()}
            for k, v in model.state_dict().items()}


def checkpoint_dict(model: ToyModel, task_spec: TaskSpec | None = None, seed: int | None = None,
                    scales: ScaleTable | None = None, scorer: ScorerParams | None = None,
                    extra: dict | None = None) -> dict:
    doc = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "seed": model.config.seed if seed is None else seed,
        "weights": _weights(model),
    }
    if task_spec is not None:
        doc["task"] = asdict(task_spec)
    if scales is not None:
        doc["scale_table"] = scales.to_dict()
    if scorer is not None:
        doc["scorer"] = scorer_to_dict(scorer)
    if extra:
        doc["extra"] = extra
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save_checkpoint(path, model: ToyModel, **sections) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(checkpoint_dict(model, **sections)))
    return path


def update_checkpoint(path, **sections) -> Path:
    """Add or replace ``scale_table`` / ``scorer`` / ``extra`` sections in place."""
    path = Path(path)
    doc = read_document(path)
    if "scales" in sections and sections["scales"] is not None:
        doc["scale_table"] = sections["scales"].to_dict()
    if "scorer" in sections and sections["scorer"] is not None:
        doc["scorer"] = scorer_to_dict(sections["scorer"])
    if sections.get("extra"):
        doc.setdefault("extra", {}).update(sections["extra"])
    path.write_text(dumps(doc))
    return path


def read_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: expected format {FORMAT!r}, got {doc.get('format')!r}")
    return doc


def model_from_document(doc: dict) -> ToyModel:
    cfg = ModelConfig(**doc["config"])
    model = ToyModel(cfg)
    state = {}
    for k, v in doc["weights"].items():
        state[k] = torch.tensor(v["data"], dtype=torch.float64).reshape(v["shape"])
    model.load_state_dict(state)
    model.eval()
    return model


class Checkpoint:
    """Parsed checkpoint: model plus whatever optional sections exist."""

    def __init__(self, doc: dict):
        self.doc = doc
        self.model = model_from_document(doc)
        self.seed = doc.get("seed")
        self.task_spec = TaskSpec(**doc["task"]) if "task" in doc else None
        self.scales = ScaleTable.from_dict(doc["scale_table"]) if "scale_table" in doc else None
        self.scorer = scorer_from_dict(doc["scorer"]) if "scorer" in doc else None
        self.extra = doc.get("extra", {})


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint(read_document(path))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-able config for provenance lines."""
    text = json.dumps(obj, sort_keys=True, default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serialisable: {type(o)}")
