"""INI run configuration: five sections, strict keys, documented defaults.

Every key maps onto a field of one of the pipeline dataclasses.  Unknown
sections or keys are rejected so a typo never silently falls back to a
default.  ``RunConfig.hash`` is recorded in every output manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .corpus import CANDIDATE_ROOTS, CorpusSpec, FeatureConfig, default_zc_config
from .errors import ConfigurationError
from .features import StftConfig
from .fusion_net import NetConfig
from .train import TrainConfig


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _strs(text: str) -> tuple:
    return tuple(t for t in text.replace(" ", "").split(",") if t)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (section, key) -> (parser, default)
SCHEMA = {
    "synth": {
        "n_train": (int, 300),
        "n_val": (int, 30),
        "n_test": (int, 40),
        "n_ood": (int, 40),
        "snrs": (_floats, (0.0, 10.0)),
        "distance_tags": (_strs, ("D00",)),
        "los_tags": (_strs, ("S00",)),
        "length": (int, 1 << 16),
        "id_classes": (_ints, (0, 1, 2, 3, 4, 5)),
        "ood_classes": (_ints, (6, 7)),
    },
    "features": {
        "stft_window_len": (int, 256),
        "stft_hop": (int, 128),
        "stft_window": (str, "hann"),
        "tfi_height": (int, 32),
        "tfi_width": (int, 32),
        "tfi_channels": (int, 1),
        "zc_upsample": (int, 8),
        "pool_u": (int, 100),
        "pool_v": (int, 64),
        "n_seg": (int, 1),
        "seg_len": (int, 100 * 64 + 139 * 8),
        "iq_len": (int, 1024),
    },
    "model": {
        "variant": (str, "fusion_proposed"),
        "channels": (int, 32),
        "spatial": (int, 4),
        "depth": (int, 4),
        "alpha": (float, 0.5),
        "afw_momentum": (float, 0.9),
    },
    "train": {
        "lr": (float, TrainConfig.lr),
        "batch_size": (int, 32),
        "max_epochs": (int, 40),
        "patience": (int, 6),
        "min_delta": (float, 1e-3),
        "precision": (str, "train"),
        "ood_quantile": (float, 0.05),
    },
    "eval": {
        "sweep_axis": (str, "snr"),
        "sweep_values": (_strs, tuple(str(v) for v in range(-15, 16, 2))),
        "repetitions": (int, 1),
        "n_per_class": (int, 20),
        "audit": (_bool, True),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)  # section -> {key: parsed value}
    seed: int = 0

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def hash(self) -> str:
        return config_hash(self)

    # -- builders -----------------------------------------------------------
    def corpus_spec(self) -> CorpusSpec:
        s = self.values["synth"]
        return CorpusSpec(n_train=s["n_train"], n_val=s["n_val"], n_test=s["n_test"], n_ood=s["n_ood"],
                          snrs=s["snrs"], distance_tags=s["distance_tags"], los_tags=s["los_tags"],
                          length=s["length"], seed=self.seed, id_classes=s["id_classes"],
                          ood_classes=s["ood_classes"])

    def feature_config(self) -> FeatureConfig:
        f = self.values["features"]
        zc = default_zc_config(candidates=tuple((r, V, f["zc_upsample"]) for r, V in CANDIDATE_ROOTS),
                               pool_u=f["pool_u"], pool_v=f["pool_v"], n_seg=f["n_seg"], seg_len=f["seg_len"])
        return FeatureConfig(stft=StftConfig(f["stft_window_len"], f["stft_hop"], f["stft_window"]),
                             tfi_hw=(f["tfi_height"], f["tfi_width"]), tfi_channels=f["tfi_channels"],
                             zc=zc, iq_len=f["iq_len"])

    def net_config(self) -> NetConfig:
        m, f = self.values["model"], self.values["features"]
        if f["tfi_height"] != f["tfi_width"]:
            raise ConfigurationError("the network expects a square TFI")
        return NetConfig(channels=m["channels"], spatial=m["spatial"], depth=m["depth"],
                         class_count=len(self.values["synth"]["id_classes"]), tfi_hw=f["tfi_height"],
                         tfi_channels=f["tfi_channels"], zc_rows=len(CANDIDATE_ROOTS), zc_cols=f["pool_v"],
                         alpha=m["alpha"], afw_momentum=m["afw_momentum"], variant=m["variant"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])


def defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _parse(section: str, key: str, raw: str):
    if section not in SCHEMA:
        raise ConfigurationError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key} = {raw!r}: {exc}") from None


def load_config(path=None, overrides=(), seed: int = 0) -> RunConfig:
    """Read ``path`` (optional), apply ``section.key=value`` overrides, validate."""
    values = defaults()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror or exc}") from None
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    for section in cp.sections():
        for key, raw in cp.items(section):
            values.setdefault(section, {})
            values[section][key] = _parse(section, key, raw)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        values[section][key] = _parse(section, key, raw.strip())
    cfg = RunConfig(values=values, seed=int(seed))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Construct every derived dataclass once so bad values fail early."""
    s = cfg.values["synth"]
    for k in ("n_train", "n_val", "n_test", "n_ood"):
        if s[k] < 0:
            raise ConfigurationError(f"[synth] {k} must be >= 0")
    if not s["snrs"]:
        raise ConfigurationError("[synth] snrs must list at least one value")
    if cfg.values["eval"]["repetitions"] < 1:
        raise ConfigurationError("[eval] repetitions must be >= 1")
    try:
        cfg.feature_config()
        cfg.net_config()
        tc = cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from None
    if tc.precision not in ("train", "test"):
        raise ConfigurationError(f"[train] precision must be 'train' or 'test', got {tc.precision!r}")


def as_jsonable(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed,
            **{sec: {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(keys.items())}
               for sec, keys in sorted(cfg.values.items())}}


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(as_jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def with_values(cfg: RunConfig, section: str, **kw) -> RunConfig:
    values = {s: dict(v) for s, v in cfg.values.items()}
    for k, v in kw.items():
        if k not in SCHEMA[section]:
            raise ConfigurationError(f"unknown key {k!r} in section [{section}]")
        values[section][k] = v
    return dataclasses.replace(cfg, values=values)
