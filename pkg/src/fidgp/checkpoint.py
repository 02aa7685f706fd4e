"""Versioned JSON checkpoints.

Arrays are stored as base64 of their little-endian float64 bytes together with
shape and dtype tags, so a save/load roundtrip is bit exact.  Power-iteration
vectors of every flow are included so training can resume exactly.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .config import RunConfig, apply_overrides, flatten
from .errors import CheckpointError
from .linalg import PowerIterState
from .model import FidgpNet, Standardizer

SCHEMA_VERSION = 1


def encode_array(a):
    # ascontiguousarray would promote 0-d arrays to 1-d
    a = np.array(a, dtype="<f8", order="C")
    return {"shape": list(a.shape), "dtype": "float64", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    if d.get("dtype") != "float64":
        raise CheckpointError(f"unsupported dtype tag {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(tuple(d["shape"]))


def _power_states(net: FidgpNet):
    out = {}
    for k, layer in enumerate(net.layers, start=1):
        flow = getattr(layer, "flow", None)
        if flow is None:
            continue
        for name, lin in flow.sublayers():
            out[f"layer{k}.flow.{name}"] = lin
    return out


def to_document(net: FidgpNet, cfg: RunConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "widths": list(net.widths),
        "scalers": {
            "x_mean": encode_array(net.x_scale.mean),
            "x_std": encode_array(net.x_scale.std),
            "y_mean": encode_array(net.y_scale.mean),
            "y_std": encode_array(net.y_scale.std),
        },
        "params": {name: encode_array(p.data) for name, p in net.named_parameters().items()},
        "power": {
            name: {"left": encode_array(lin.power.left_vec), "right": encode_array(lin.power.right_vec)}
            for name, lin in _power_states(net).items()
        },
    }


def save(path, net: FidgpNet, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_document(net, cfg), fh)


def from_document(doc: dict):
    from .experiments import build_model

    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema_version {version!r} (expected {SCHEMA_VERSION})")
    try:
        cfg = apply_overrides(RunConfig(), flatten(doc["config"])).validate()
        widths = doc["widths"]
        net = build_model(cfg, widths[0], widths[-1], np.random.default_rng(0))
        if list(net.widths) != list(widths):
            raise CheckpointError(f"checkpoint widths {widths} do not match config widths {net.widths}")
        params = net.named_parameters()
        if set(params) != set(doc["params"]):
            missing = sorted(set(params) ^ set(doc["params"]))
            raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for name, p in params.items():
            arr = decode_array(doc["params"][name])
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} vs model shape {p.shape}")
            p.data = arr
        states = _power_states(net)
        for name, lin in states.items():
            s = doc["power"][name]
            lin.power = PowerIterState(decode_array(s["left"]), decode_array(s["right"]))
        sc = doc["scalers"]
        net.x_scale = Standardizer(decode_array(sc["x_mean"]), decode_array(sc["x_std"]))
        net.y_scale = Standardizer(decode_array(sc["y_mean"]), decode_array(sc["y_std"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return net, cfg


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from None
    return from_document(doc)

