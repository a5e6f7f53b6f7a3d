"""Honest FL client whose PEFT update is what the curious server intercepts.

One local step of vanilla SGD on a single private image; the upload holds
only the hot-parameter gradients (plus the post-step values) and harmless
metadata. Neither the image, its label, nor any frozen-parameter gradient
ever enters the leak.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .model import MultimodalModel, peft_grads

Array = np.ndarray

LEAK_MAGIC = b"PARVOLK1"
LEAK_FORMAT_VERSION = "parvo-leak-v1"


@dataclass
class LeakedUpdate:
    peft_mode: str
    gradients: dict  # name -> array, keyed like MultimodalModel.hot_params
    updated_params: dict | None
    eta: float
    image_height: int
    image_width: int
    channels: int
    class_names: list
    model_fingerprint: str

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("client learning rate must be positive")


def client_step(model: MultimodalModel, image: Array, label: int, eta: float) -> LeakedUpdate:
    """One vanilla-SGD step on (image, label); returns what the server sees."""
    if eta <= 0:
        raise ValueError("client learning rate must be positive")
    grads = peft_grads(model, image, label)
    updated = {k: model.hot_params()[k] - eta * g for k, g in grads.items()}
    c, h, w = model.image_shape
    return LeakedUpdate(
        peft_mode=model.peft_mode,
        gradients=grads,
        updated_params=updated,
        eta=float(eta),
        image_height=h,
        image_width=w,
        channels=c,
        class_names=list(model.class_names),
        model_fingerprint=model.fingerprint(),
    )


def _pack(a: Array) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(d: dict) -> Array:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_leak(leak: LeakedUpdate, path) -> None:
    doc = {
        "version": LEAK_FORMAT_VERSION,
        "peft_mode": leak.peft_mode,
        "eta": leak.eta,
        "image_height": leak.image_height,
        "image_width": leak.image_width,
        "channels": leak.channels,
        "class_names": leak.class_names,
        "model_fingerprint": leak.model_fingerprint,
        "gradients": {k: _pack(v) for k, v in leak.gradients.items()},
        "updated_params": (
            None
            if leak.updated_params is None
            else {k: _pack(v) for k, v in leak.updated_params.items()}
        ),
    }
    with open(path, "wb") as f:
        f.write(LEAK_MAGIC)
        f.write(json.dumps(doc).encode("utf-8"))


def load_leak(path, model: MultimodalModel | None = None) -> LeakedUpdate:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(LEAK_MAGIC)] != LEAK_MAGIC:
        raise ValueError("not a leaked-update file (bad magic bytes)")
    try:
        doc = json.loads(blob[len(LEAK_MAGIC) :].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError("truncated or corrupt leaked-update file: %s" % e) from e
    if doc.get("version") != LEAK_FORMAT_VERSION:
        raise ValueError(
            "unsupported leaked-update version %r (expected %r)"
            % (doc.get("version"), LEAK_FORMAT_VERSION)
        )
    leak = LeakedUpdate(
        peft_mode=doc["peft_mode"],
        gradients={k: _unpack(v) for k, v in doc["gradients"].items()},
        updated_params=(
            None
            if doc["updated_params"] is None
            else {k: _unpack(v) for k, v in doc["updated_params"].items()}
        ),
        eta=float(doc["eta"]),
        image_height=doc["image_height"],
        image_width=doc["image_width"],
        channels=doc["channels"],
        class_names=list(doc["class_names"]),
        model_fingerprint=doc["model_fingerprint"],
    )
    if model is not None and leak.model_fingerprint != model.fingerprint():
        warnings.warn("frozen-weight mismatch between leak and model", stacklevel=2)
    return leak
