"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 version, uint64 header length, a
UTF-8 JSON header, then every tensor as raw little-endian float64 in header
order.  Nothing time-dependent is stored, so equal states give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .numerics import OptimizerState
from .training import ObjectiveConfig, TrainConfig, TrainState

MAGIC = b"DAMBACK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _tables(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.data) for name, p in state.model.named_parameters()]
    for name in sorted(state.opt.m):
        out.append((f"opt.m.{name}", state.opt.m[name]))
        out.append((f"opt.v.{name}", state.opt.v[name]))
    return out


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> Path:
    tables = _tables(state)
    entries, offset = [], 0
    for name, arr in tables:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    cfg = state.cfg
    header = {
        "version": VERSION,
        "params": entries,
        "domains": list(state.domains),
        "model_config": asdict(state.model.cfg),
        "train_config": {"lr": cfg.lr, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                         "seed": cfg.seed, "objective": asdict(cfg.objective)},
        "optimizer": {"lr": state.opt.lr, "beta1": state.opt.beta1, "beta2": state.opt.beta2,
                      "eps": state.opt.eps, "step": state.opt.step,
                      "t": {k: state.opt.t[k] for k in sorted(state.opt.t)}},
        "rng_state": state.rng.bit_generator.state,
        "epoch": state.epoch,
        "extra": dict(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tables:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    values = np.frombuffer(raw, dtype="<f8", offset=start) if len(raw) > start else np.zeros(0)
    arrays = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + n > values.size:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = values[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> TrainState:
    header, arrays = read_checkpoint(path)
    mc = ModelConfig(**header["model_config"])
    tc_raw = header["train_config"]
    tc = TrainConfig(lr=tc_raw["lr"], epochs=tc_raw["epochs"], batch_size=tc_raw["batch_size"],
                     seed=tc_raw["seed"], objective=ObjectiveConfig(**tc_raw["objective"]))
    state = TrainState.create(mc, header["domains"], tc)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    try:
        state.model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    o = header["optimizer"]
    opt = OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
    opt.t = dict(o["t"])
    for name in opt.t:
        opt.m[name] = arrays[f"opt.m.{name}"]
        opt.v[name] = arrays[f"opt.v.{name}"]
    state.opt = opt
    state.rng.bit_generator.state = header["rng_state"]
    state.epoch = int(header["epoch"])
    state.model.invalidate_cache()
    return state


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = ["CheckpointError", "MAGIC", "VERSION", "file_digest", "load_checkpoint",
           "read_checkpoint", "save_checkpoint"]
