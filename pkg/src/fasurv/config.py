"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Values are parsed as int,
float, bool (true/false/yes/no/on/off) or left as strings. Unknown keys are
an error so typos do not pass silently. Command-line flags override file
values.
"""
from __future__ import annotations

from pathlib import Path

# key -> (type, default)
KEYS: dict[str, tuple[type, object]] = {
    # training
    "epochs": (int, 30),
    "batch_size": (int, 64),
    "horizon": (int, 20),
    "depth": (int, 1),
    "d_emb": (int, 16),
    "n_heads": (int, 2),
    "no_fa": (bool, False),
    "no_cet": (bool, False),
    "causal": (bool, True),
    "shared_query": (bool, True),
    "lr": (float, 1e-4),
    "weight_decay": (float, 1e-5),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "patience": (int, 5),
    "freeze_landmarks": (bool, False),
    "landmark_correction": (bool, True),
    "init_head_bias": (bool, True),
    "ema_decay": (float, 0.99),
    "strict_ranges": (bool, True),
    "seed": (int, 0),
    # data and grid
    "interval_width": (float, 1.0),
    "n_intervals": (int, 40),
    "n_causes": (int, 0),
    # splits
    "folds": (int, 5),
    "test_fraction": (float, 0.2),
    "val_fraction": (float, 0.1),
    # prediction and metrics
    "landmark": (str, "first"),
    "bins": (int, 10),
    "calib_interval": (int, 0),
    "ctd_convention": (str, "ta"),
    # synthetic generator
    "n_subjects": (int, 2000),
    "censor_hazard": (float, 0.0),
    "base_hazard": (float, 0.012),
    "driver_multiplier": (float, 3.0),
    "numeric_effect": (float, 3.0),
    "n_numeric": (int, 2),
    "missing_rate": (float, -1.0),
    "scenario": (str, "standard"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def coerce(key: str, raw, where: str = "") -> object:
    if key not in KEYS:
        raise ConfigError(f"{where}unknown config key {key!r}")
    kind = KEYS[key][0]
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {kind.__name__}") from None


def defaults() -> dict:
    return {k: v for k, (_, v) in KEYS.items()}


def parse(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value, f"{source}:{lineno}: ")
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    cfg = defaults()
    if path is not None:
        p = Path(path)
        cfg.update(parse(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
