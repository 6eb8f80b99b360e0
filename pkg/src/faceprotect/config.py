"""Flat ``key = value`` run configuration.

One key per line; ``#`` starts a comment. Values are parsed by the type of the
field default: ints, floats, booleans (true/false), ``none``, strings, and
comma-separated tuples. Every key is listed in ``RunConfig`` and documented in
``KEY_DOCS``; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    # dataset
    data_root: str = ""  # directory holding manifest.tsv; empty -> synthesize toy data
    data_seed: int = 0  # seeds the toy data, the splits and the extractor
    num_identities: int = 32
    samples_per_identity: int = 20
    gallery_fraction: float = 0.5
    num_targets: int = 8  # swap-target identities, disjoint from the probe identities
    target_samples: int = 4
    # extractor
    extractor_backend: str = "base"
    extractor_epochs: int = 60
    extractor_batch_size: int = 32
    # evaluation
    topk: tuple[int, ...] = (1, 5)
    topk_mode: str = "identity"
    swap_variants: tuple[str, ...] = ("shallow", "deep")
    swap_epochs: int = 30
    swap_min_transfer: float = 0.7  # clean source-vs-swap cosine a proxy must reach on probes
    alpha_grid: tuple[float, ...] = (0.05, 0.1, 0.25, 0.5)
    alpha_epochs: int = 0  # 0 -> same as train.epochs
    out: str = "run"

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _RUN_KEYS}
        d.update(self.train.to_dict())
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def fingerprint(self) -> str:
        """Hash of the canonical config; the output location is not part of it."""
        d = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        lines = []
        for k, v in sorted(self.to_dict().items()):
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"


_RUN_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig) if f.name != "train")

KEY_DOCS = {
    "epochs": "training epochs", "batch_size": "training batch size", "lr_gen": "generator Adam learning rate",
    "lr_fpm": "perturbation-module learning rate (none -> lr_gen / 2)",
    "lr_disc": "discriminator learning rate (none -> lr_gen)", "beta1": "Adam beta1", "beta2": "Adam beta2",
    "alpha": "perturbation scale", "lambda_a": "adversarial loss weight", "lambda_p": "pixel loss weight",
    "lambda_l": "perceptual loss weight", "lambda_d": "deviate loss weight",
    "disc_period": "discriminator update period in steps", "seed": "master seed",
    "resolution": "image side in pixels", "d_f": "embedding size", "d_h": "perturbation hidden size (none -> 2 d_f)",
    "stem_channels": "generator full-resolution channels", "channels": "generator stage channels",
    "window": "attention window side", "heads": "attention heads", "id_hidden": "fusion hidden size (none -> d_f)",
    "disc_channels": "discriminator channels", "interference": "enable the interference layer",
    "interference_on_loss_pair": "also transform the pixel/perceptual loss pair",
    "perceptual_normalize": "unit-normalize perceptual features per channel vector",
    "input_residual": "generator predicts a residual on the input image",
    "lr_decay_start": "run fraction after which learning rates decay linearly to 0 (1 disables)",
    "data_root": "dataset directory with manifest.tsv (empty -> synthetic toy data)",
    "data_seed": "seed for toy data, splits and extractor", "num_targets": "synthetic swap-target identities",
    "target_samples": "samples per swap-target identity", "num_identities": "synthetic identities", "samples_per_identity": "synthetic samples per identity",
    "gallery_fraction": "per-identity gallery share", "extractor_backend": "extractor backend (base or alt)",
    "extractor_epochs": "extractor training epochs", "extractor_batch_size": "extractor training batch size", "topk": "k values for identification",
    "topk_mode": "identity or sample candidate ranking", "swap_variants": "swap proxy variants",
    "swap_epochs": "swap proxy training epochs",
    "swap_min_transfer": "minimum clean identity transfer a swap proxy must reach", "alpha_grid": "alpha values for the trade-off sweep",
    "alpha_epochs": "epochs per alpha (0 -> epochs)", "out": "run directory",
}


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_render(x) for x in v)
    return str(v)


def _parse_scalar(raw: str, typ):
    low = raw.lower()
    if low == "none":
        return None
    if typ is bool:
        if low not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {raw!r}")
        return low == "true"
    return typ(raw)


def _field_types() -> dict:
    types = {k: v for k, v in get_type_hints(TrainConfig).items()}
    types.update({k: v for k, v in get_type_hints(RunConfig).items() if k != "train"})
    return types


def _coerce(key: str, raw: str):
    typ = _field_types()[key]
    args = getattr(typ, "__args__", ())
    origin = getattr(typ, "__origin__", None)
    try:
        if origin is tuple:
            return tuple(_parse_scalar(x.strip(), args[0]) for x in raw.split(",") if x.strip())
        if args and type(None) in args:  # Optional[X]
            inner = next(a for a in args if a is not type(None))
            return _parse_scalar(raw, inner)
        return _parse_scalar(raw, typ)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None


def from_mapping(values: dict) -> RunConfig:
    unknown = set(values) - set(_TRAIN_KEYS) - set(_RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    run_kw = {k: v for k, v in values.items() if k in _RUN_KEYS}
    try:
        cfg = RunConfig(train=TrainConfig(**train_kw), **run_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.topk_mode not in ("identity", "sample"):
        raise ConfigError(f"topk_mode must be identity or sample, got {cfg.topk_mode!r}")
    return cfg


def parse(text: str) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key}")
        if key not in _TRAIN_KEYS and key not in _RUN_KEYS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return from_mapping(values)


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text())


def override(cfg: RunConfig, **values) -> RunConfig:
    d = cfg.to_dict()
    d.update({k: v for k, v in values.items() if v is not None})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return from_mapping(d)
