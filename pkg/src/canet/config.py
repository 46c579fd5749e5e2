"""INI experiment configuration: [model], [train] and [data] sections."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Dict, Optional

from .model import EncoderConfig, ModelConfig
from .synthdata import DatasetSpec, make_dataset_family
from .trainer import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "load_spec_file"]


class ConfigError(ValueError):
    """Invalid or unknown configuration key; the message starts with the key."""


_MODEL_KEYS = {"eta", "widths", "kinds", "pooling_mode", "icm_width", "ratio", "bn_scope", "seed"}
_TRAIN_KEYS = {"lr", "momentum", "weight_decay", "epochs", "batch", "batch_size", "seed", "scope", "ablation", "augment_hflip"}
_DATA_EXTRA = {"path", "family", "base_seed", "size"}
_DATA_SPEC_KEYS = set(DatasetSpec(name="x").to_kv())
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _int_list(key, raw):
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None


def _convert(section, key, raw, kind):
    try:
        if kind is bool:
            return _BOOL[raw.strip().lower()]
        return kind(raw.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Dict[str, str] = field(default_factory=dict)

    def dataset_spec(self) -> Optional[DatasetSpec]:
        kv = {k: v for k, v in self.data.items() if k in _DATA_SPEC_KEYS}
        if not kv:
            return None
        kv.setdefault("name", "data")
        try:
            return DatasetSpec.from_kv(kv)
        except KeyError as exc:
            raise ConfigError(f"data.{exc.args[0]}: unknown key") from None
        except ValueError as exc:
            raise ConfigError(f"data.{exc}") from None

    def family(self):
        """The four-member dataset family when ``family`` is set in [data], else None."""
        if not _BOOL.get(self.data.get("family", "false").lower(), False):
            return None
        seed = _convert("data", "base_seed", self.data.get("base_seed", "0"), int)
        overrides = {}
        if "size" in self.data:
            s = _int_list("data.size", self.data["size"])
            overrides["image_size"] = s * 2 if len(s) == 1 else s
        for key in ("n_train", "n_val", "n_test"):
            if key in self.data:
                overrides[key] = _convert("data", key, self.data[key], int)
        try:
            return make_dataset_family(seed, **overrides)
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from None

    def to_ini(self) -> str:
        m = self.model
        t = self.train
        lines = [
            "[model]",
            f"eta = {m.eta}",
            f"widths = {','.join(map(str, m.encoder.widths))}",
            f"kinds = {','.join(m.encoder.kinds)}",
            f"pooling_mode = {m.pool_mode}",
            f"icm_width = {m.icm_width}",
            f"ratio = {m.ratio}",
            f"bn_scope = {m.bn_scope}",
            f"seed = {m.seed}",
            "",
            "[train]",
            f"lr = {t.lr!r}",
            f"momentum = {t.momentum!r}",
            f"weight_decay = {t.weight_decay!r}",
            f"epochs = {t.epochs}",
            f"batch_size = {t.batch_size}",
            f"seed = {t.seed}",
            f"scope = {t.scope}",
            f"ablation = {t.ablation}",
            f"augment_hflip = {str(t.augment_hflip).lower()}",
            "",
            "[data]",
        ]
        lines += [f"{k} = {v}" for k, v in self.data.items()]
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    for section in parser.sections():
        if section not in ("model", "train", "data"):
            raise ConfigError(f"[{section}]: unknown section")
    model_kw = {}
    enc_kw = {}
    if parser.has_section("model"):
        for key, raw in parser.items("model"):
            if key not in _MODEL_KEYS:
                raise ConfigError(f"model.{key}: unknown key")
            if key == "widths":
                enc_kw["widths"] = _int_list("model.widths", raw)
            elif key == "kinds":
                enc_kw["kinds"] = tuple(v.strip() for v in raw.split(",") if v.strip())
            elif key == "pooling_mode":
                model_kw["pool_mode"] = raw.strip()
            elif key == "bn_scope":
                model_kw["bn_scope"] = raw.strip()
            else:
                model_kw[key] = _convert("model", key, raw, int)
    train_kw = {}
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"train.{key}: unknown key")
            if key in ("lr", "momentum", "weight_decay"):
                train_kw[key] = _convert("train", key, raw, float)
            elif key in ("epochs", "seed"):
                train_kw[key] = _convert("train", key, raw, int)
            elif key in ("batch", "batch_size"):
                train_kw["batch_size"] = _convert("train", key, raw, int)
            elif key == "augment_hflip":
                train_kw[key] = _convert("train", key, raw, bool)
            else:
                train_kw[key] = raw.strip()
    data = {}
    if parser.has_section("data"):
        for key, raw in parser.items("data"):
            if key not in _DATA_SPEC_KEYS and key not in _DATA_EXTRA:
                raise ConfigError(f"data.{key}: unknown key")
            data[key] = raw.strip()
    try:
        encoder = EncoderConfig(**enc_kw)
    except ValueError as exc:
        raise ConfigError(f"model.{'kinds' if 'kind' in str(exc) else 'widths'}: {exc}") from None
    try:
        model = ModelConfig(encoder=encoder, **model_kw)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    cfg = ExperimentConfig(model, train, data)
    cfg.dataset_spec()  # validate spec keys early
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def load_spec_file(path) -> ExperimentConfig:
    """Read a dataset spec: either an INI with a [data] section or bare ``key = value`` lines."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"spec: cannot read {path}: {exc.strerror}") from None
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = "[data]\n" + text
    return parse_config(text)
