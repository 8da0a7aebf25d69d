"""Flat key=value run configuration shared by every CLI subcommand.

One line per setting, dotted section prefixes, ``#`` comments. Every key is
declared in the schema below; anything else is rejected so typos fail fast
instead of silently running with defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError
from .measures import MeasureKind
from .model import ModelConfig
from .train import TrainConfig
from .trajectory import GridSpec

# key -> value kind; "floats" is a comma-separated list
SCHEMA: dict[str, str] = {
    "seed": "int",
    "grid.min_lon": "float",
    "grid.min_lat": "float",
    "grid.max_lon": "float",
    "grid.max_lat": "float",
    "grid.cell_size_m": "float",
    "grid.planar": "bool",
    "node2vec.walk_len": "int",
    "node2vec.walks_per_node": "int",
    "node2vec.p": "float",
    "node2vec.q": "float",
    "node2vec.window": "int",
    "node2vec.negatives": "int",
    "node2vec.epochs": "int",
    "node2vec.lr": "float",
    "model.d": "int",
    "model.enc_layers": "int",
    "model.enc_heads": "int",
    "model.pred_layers": "int",
    "model.pred_heads": "int",
    "model.max_len": "int",
    "model.m_targets": "int",
    "model.target_ratios": "floats",
    "model.successive_p": "float",
    "model.context_ratio_min": "float",
    "model.context_ratio_max": "float",
    "model.ema_momentum": "float",
    "model.pooling": "str",
    "model.use_adjfuse": "bool",
    "train.epochs": "int",
    "train.lr": "float",
    "train.lr_halve_every": "int",
    "train.early_stop_patience": "int",
    "train.batch_size": "int",
    "preprocess.min_len": "int",
    "preprocess.max_len": "int",
    "eval.n_queries": "int",
    "eval.db_size": "int",
    "eval.db_fractions": "floats",
    "eval.levels": "floats",
    "eval.k": "int",
    "eval.measure": "str",
    "eval.eps_m": "float",
    "eval.n_pairs": "int",
    "eval.finetune_epochs": "int",
    "eval.finetune_lr": "float",
    "eval.distort_magnitude_m": "float",
    "paths.run_dir": "str",
}

_GRID_KEYS = ("min_lon", "min_lat", "max_lon", "max_lat", "cell_size_m")


@dataclass(frozen=True)
class RunConfig:
    """Parsed settings plus the original text for byte-exact echoing."""

    values: dict[str, object]
    raw_text: str = ""

    def get(self, key: str, default=None):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, default)

    def require(self, key: str):
        v = self.get(key)
        if v is None:
            raise ConfigError(f"missing required config key {key!r}")
        return v

    def seed(self) -> int:
        """Config seed, overridden by the TJEPA_SEED environment variable."""
        env = os.environ.get("TJEPA_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"TJEPA_SEED must be an integer, got {env!r}")
        return int(self.get("seed", 0))

    def grid(self) -> GridSpec:
        return GridSpec(
            *(float(self.require(f"grid.{k}")) for k in _GRID_KEYS),
            planar=bool(self.get("grid.planar", False)),
        )

    def model_config(self) -> ModelConfig:
        kw: dict[str, object] = {}
        for name in (
            "d", "enc_layers", "enc_heads", "pred_layers", "pred_heads",
            "max_len", "m_targets", "successive_p", "ema_momentum", "pooling",
            "use_adjfuse",
        ):
            v = self.get(f"model.{name}")
            if v is not None:
                kw[name] = v
        ratios = self.get("model.target_ratios")
        if ratios is not None:
            kw["target_ratios"] = tuple(ratios)
        lo = self.get("model.context_ratio_min")
        hi = self.get("model.context_ratio_max")
        if (lo is None) != (hi is None):
            raise ConfigError("set both model.context_ratio_min and model.context_ratio_max")
        if lo is not None:
            kw["context_ratio_range"] = (lo, hi)
        return ModelConfig(**kw)

    def train_config(self, warm_start: str | None = None) -> TrainConfig:
        kw: dict[str, object] = {"seed": self.seed(), "warm_start": warm_start}
        for name in ("epochs", "lr", "lr_halve_every", "early_stop_patience", "batch_size"):
            v = self.get(f"train.{name}")
            if v is not None:
                kw[name] = v
        return TrainConfig(**kw)

    def measure_kind(self) -> MeasureKind:
        kind = str(self.get("eval.measure", "hausdorff"))
        eps = self.get("eval.eps_m")
        planar = bool(self.get("grid.planar", False))
        return MeasureKind(kind=kind, eps_m=eps, planar=planar)


def _parse_value(key: str, text: str) -> object:
    kind = SCHEMA[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError("expected true or false")
        if kind == "floats":
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if not parts:
                raise ValueError("expected a comma-separated list")
            return tuple(float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {kind} ({exc})")


def parse_run_config(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    return RunConfig(values=values, raw_text=text)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_run_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}")


def echo_config(cfg: RunConfig, run_dir: str) -> str:
    """Write the original config text into the run directory; returns the path."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.echo")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.raw_text)
    return path
