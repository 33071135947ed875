"""Self-describing checkpoint container.

Layout: magic, u32 version, u64 header length, UTF-8 JSON header, then a flat
little-endian float32 parameter blob addressed by the header's tensor index.
An optional float64 section carries optimizer moments for exact resume.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .heads import ClassificationHead, HeadModel, RegressionHead
from .model import ModelConfig, TinyLM
from .optim import Adam

_MAGIC = b"TLMC"
_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file malformed or incompatible."""


def _tensor_index(state: dict[str, torch.Tensor]) -> tuple[list[dict], int]:
    index = []
    offset = 0
    for name, tensor in state.items():
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.numel()
    return index, offset


def save_checkpoint(
    path: str | Path,
    model: TinyLM | HeadModel,
    *,
    optimizer: Adam | None = None,
    step: int = 0,
    loss_curve: list[float] | None = None,
    config_hash: str | None = None,
    extra: dict | None = None,
) -> None:
    if isinstance(model, HeadModel):
        base = model.base
        head_info: dict[str, Any] | None = {"kind": model.kind}
        if model.kind == "classification":
            head_info["n_classes"] = model.head.n_classes
            head_info["options"] = list(model.options or [])
        else:
            head_info["target_mean"] = float(model.head.target_mean.item())
            head_info["target_std"] = float(model.head.target_std.item())
        state = {f"base.{k}": v for k, v in base.state_dict().items()}
        state.update({f"head.{k}": v for k, v in model.head.state_dict().items()})
        model_config = base.cfg
    else:
        base = model
        head_info = None
        state = dict(model.state_dict())
        model_config = model.cfg

    index, total = _tensor_index(state)
    header: dict[str, Any] = {
        "model_config": model_config.to_dict(),
        "tensors": index,
        "dtype": "float32_le",
        "step": step,
        "loss_curve": list(loss_curve or []),
        "config_hash": config_hash,
        "head": head_info,
        "extra": extra or {},
        "optimizer": None,
    }

    blob = np.empty(total, dtype="<f4")
    for entry in index:
        tensor = state[entry["name"]]
        flat = tensor.detach().to(torch.float32).reshape(-1).numpy().astype("<f4")
        blob[entry["offset"] : entry["offset"] + flat.size] = flat

    opt_blob = np.empty(0, dtype="<f8")
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        moments = []
        for key in ("m", "v"):
            for tensor in opt_state[key]:
                moments.append(tensor.reshape(-1).numpy().astype("<f8"))
        opt_blob = np.concatenate(moments) if moments else opt_blob
        header["optimizer"] = {
            "t": opt_state["t"],
            "n_values": int(opt_blob.size),
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as handle:
        handle.write(_MAGIC)
        handle.write(struct.pack("<I", _VERSION))
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        handle.write(blob.tobytes())
        if opt_blob.size:
            handle.write(opt_blob.tobytes())


def load_checkpoint(
    path: str | Path,
    *,
    with_optimizer: bool = False,
) -> tuple[TinyLM | HeadModel, dict]:
    """Rebuild the model (and head, when present); extras carry step/curve/hash.

    With with_optimizer=True, extras["optimizer"] is an Adam instance restored
    over the returned model's parameters.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_start = 16
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    blob_start = header_start + header_len

    index = header["tensors"]
    total = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in index)
    blob = np.frombuffer(raw, dtype="<f4", count=total, offset=blob_start)

    cfg = ModelConfig.from_dict(header["model_config"])
    base = TinyLM(cfg)

    def tensor_for(entry: dict) -> torch.Tensor:
        numel = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = blob[entry["offset"] : entry["offset"] + numel]
        return torch.from_numpy(chunk.copy()).reshape(entry["shape"])

    head_info = header.get("head")
    if head_info is None:
        state = {e["name"]: tensor_for(e) for e in index}
        base.load_state_dict(state)
        model: TinyLM | HeadModel = base
    else:
        base_state = {}
        head_state = {}
        for entry in index:
            value = tensor_for(entry)
            if entry["name"].startswith("base."):
                base_state[entry["name"][5:]] = value
            elif entry["name"].startswith("head."):
                head_state[entry["name"][5:]] = value
        base.load_state_dict(base_state)
        if head_info["kind"] == "classification":
            head: ClassificationHead | RegressionHead = ClassificationHead(
                cfg.d_model, int(head_info["n_classes"])
            )
            options = tuple(head_info.get("options") or ())
            model = HeadModel(base, head, "classification", options=options or None)
        else:
            head = RegressionHead(
                cfg.d_model,
                target_mean=head_info["target_mean"],
                target_std=head_info["target_std"],
            )
            model = HeadModel(base, head, "regression")
        # buffers were rebuilt from the header at full precision; keep those
        head_state = {k: v for k, v in head_state.items() if k not in ("target_mean", "target_std")}
        model.head.load_state_dict(head_state, strict=False)

    model.eval()
    extras = {
        "step": header.get("step", 0),
        "loss_curve": header.get("loss_curve", []),
        "config_hash": header.get("config_hash"),
        "extra": header.get("extra", {}),
    }
    if with_optimizer and header.get("optimizer"):
        opt_meta = header["optimizer"]
        opt_start = blob_start + total * 4
        values = np.frombuffer(raw, dtype="<f8", count=int(opt_meta["n_values"]), offset=opt_start)
        optimizer = Adam(
            model.parameters(),
            beta1=opt_meta.get("beta1", 0.9),
            beta2=opt_meta.get("beta2", 0.95),
            eps=opt_meta.get("eps", 1e-8),
        )
        cursor = 0
        state = {"t": int(opt_meta["t"]), "m": [], "v": []}
        for key in ("m", "v"):
            for param in optimizer.params:
                chunk = values[cursor : cursor + param.numel()]
                state[key].append(torch.from_numpy(chunk.copy()).reshape(param.shape))
                cursor += param.numel()
        optimizer.load_state_dict(state)
        extras["optimizer"] = optimizer
    return model, extras
