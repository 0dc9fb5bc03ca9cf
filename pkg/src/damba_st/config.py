"""Flat key=value run configs and the block format used by gen-data.

Keys carry their unit where one applies (``patch_len_steps``).  Blank lines and
``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DomainSpec
from .model import ModelConfig
from .ssm import ContractError
from .training import ObjectiveConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(where + message)
        self.line = line


def _split_line(raw: str, lineno: int, source: str) -> tuple[str, str] | None:
    text = raw.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"expected key = value, got {text!r}", lineno, source)
    key, value = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError("empty key", lineno, source)
    return key, value


# key -> (type, range check or None)
_RUN_KEYS = {
    "d_model": (int, lambda v: 1 <= v <= 512),
    "d_state": (int, lambda v: 1 <= v <= 256),
    "k_eig": (int, lambda v: v >= 1),
    "patch_len_steps": (int, lambda v: v >= 1),
    "stride_steps": (int, lambda v: v >= 1),
    "history_steps": (int, lambda v: v >= 1),
    "horizon_steps": (int, lambda v: v >= 1),
    "max_lag_steps": (int, lambda v: v >= 0),
    "delay_hidden": (int, lambda v: v >= 1),
    "alpha": (float, lambda v: v >= 0),
    "beta": (float, lambda v: v >= 0),
    "sigma": (float, lambda v: v > 0),
    "c0": (str, None),
    "w1": (float, lambda v: v > 0),
    "w2": (float, lambda v: v >= 0),
    "lr": (float, lambda v: v >= 0),
    "epochs": (int, lambda v: v >= 0),
    "batch_windows": (int, lambda v: v >= 1),
    "train_fraction": (float, lambda v: 0 < v < 1),
    "variant": (str, lambda v: v in ("damba", "fused")),
    "scan": (str, lambda v: v in ("parallel", "sequential")),
    "seed": (int, lambda v: 0 <= v < 2 ** 64),
    "domains": (str, None),
    "heldout": (str, None),
    "out_dir": (str, None),
}


@dataclass
class RunConfig:
    domains: list[Path] = field(default_factory=list)
    heldout: Path | None = None
    out_dir: Path = Path("runs")
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_fraction: float = 0.8

    def check_paths(self) -> None:
        for p in self.domains + ([self.heldout] if self.heldout else []):
            if not Path(p).is_dir():
                raise ConfigError(f"dataset directory does not exist: {p}")


def parse_run_config(text: str, base_dir=".", source: str = "<config>") -> RunConfig:
    base = Path(base_dir)
    vals: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        kv = _split_line(raw, lineno, source)
        if kv is None:
            continue
        key, value = kv
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in vals:
            raise ConfigError(f"duplicate key {key!r}", lineno, source)
        typ, check = _RUN_KEYS[key]
        try:
            v = typ(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}", lineno, source) from None
        if check is not None and not check(v):
            raise ConfigError(f"{key}={value} is outside its allowed range", lineno, source)
        vals[key] = v

    def path(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    c0 = vals.get("c0", "auto")
    try:
        c0_val = None if c0 == "auto" else float(c0)
        mc = ModelConfig(
            d_model=vals.get("d_model", 16), d_state=vals.get("d_state", 8), k_eig=vals.get("k_eig", 8),
            patch_len=vals.get("patch_len_steps", 12), stride=vals.get("stride_steps", 12),
            history=vals.get("history_steps", 48), horizon=vals.get("horizon_steps", 48),
            max_lag=vals.get("max_lag_steps", 24), delay_hidden=vals.get("delay_hidden", 8),
            w1=vals.get("w1", 0.4), w2=vals.get("w2", 0.6), variant=vals.get("variant", "damba"),
            scan=vals.get("scan", "parallel"))
        obj = ObjectiveConfig(alpha=vals.get("alpha", 1.0), beta=vals.get("beta", 0.5),
                              sigma=vals.get("sigma", 1.0), c0=c0_val)
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc), source=source) from exc
    tc = TrainConfig(lr=vals.get("lr", 1e-3), epochs=vals.get("epochs", 200),
                     batch_size=vals.get("batch_windows", 8), seed=vals.get("seed", 0), objective=obj)
    domains = [path(p.strip()) for p in str(vals.get("domains", "")).split(",") if p.strip()]
    heldout = path(vals["heldout"]) if vals.get("heldout") else None
    return RunConfig(domains, heldout, path(vals.get("out_dir", "runs")), mc, tc,
                     vals.get("train_fraction", 0.8))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(), path.parent, str(path))


# -- gen-data spec files ------------------------------------------------------------------

_SPEC_TYPES = {f.name: f.type for f in fields(DomainSpec)}
_CASTS = {"int": int, "float": float, "str": str}


@dataclass
class GenSpec:
    out_dir: Path
    domains: list[DomainSpec]


def parse_gen_spec(text: str, base_dir=".", source: str = "<spec>") -> GenSpec:
    """``out_dir = ...`` then one ``[domain NAME]`` block of DomainSpec fields per domain."""
    out_dir = None
    blocks: list[tuple[int, str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"unterminated block header {stripped!r}", lineno, source)
            parts = stripped[1:-1].split()
            if len(parts) != 2 or parts[0] != "domain":
                raise ConfigError("block header must be [domain NAME]", lineno, source)
            if any(b[1] == parts[1] for b in blocks):
                raise ConfigError(f"duplicate domain {parts[1]!r}", lineno, source)
            blocks.append((lineno, parts[1], {}))
            continue
        kv = _split_line(raw, lineno, source)
        if kv is None:
            continue
        key, value = kv
        if not blocks:
            if key != "out_dir":
                raise ConfigError(f"unknown top-level key {key!r}", lineno, source)
            out_dir = value
            continue
        if key not in _SPEC_TYPES or key == "name":
            raise ConfigError(f"unknown domain key {key!r}", lineno, source)
        cast = _CASTS[_SPEC_TYPES[key]]
        try:
            blocks[-1][2][key] = cast(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot read {value!r}", lineno, source) from None
    if not blocks:
        raise ConfigError("no [domain NAME] blocks", source=source)
    specs = []
    for lineno, name, kw in blocks:
        try:
            specs.append(DomainSpec(name=name, **kw))
        except ContractError as exc:
            raise ConfigError(str(exc), lineno, source) from exc
    base = Path(base_dir)
    out = Path(out_dir) if out_dir else Path("data")
    return GenSpec(out if out.is_absolute() else base / out, specs)


def load_gen_spec(path) -> GenSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    return parse_gen_spec(path.read_text(), path.parent, str(path))


__all__ = ["ConfigError", "GenSpec", "RunConfig", "load_gen_spec", "load_run_config",
           "parse_gen_spec", "parse_run_config"]
