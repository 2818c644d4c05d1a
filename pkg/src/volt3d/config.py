"""Plain ``key=value`` run configuration with command-line overrides."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

# key -> (type, default).  Lists are comma separated.
DEFAULTS = {
    "data.root": (str, ""),
    "data.phantom.train_counts": ("ints", (9, 9)),
    "data.phantom.test_counts": ("ints", (5, 5)),
    "data.phantom.grid": ("ints", (32, 32, 16)),
    "data.phantom.noise_sigma": (float, 0.1),
    "data.phantom.scales": ("floats", (1.0, 1.6)),
    "data.phantom.seed": (int, 0),
    "data.phantom.seeds": ("ints", (0, 1, 2, 3, 4)),
    "data.phantom.compress": (bool, True),
    "model.input_shape": ("ints", (128, 128, 64)),
    "model.filters": ("ints", (64, 64, 128, 256)),
    "model.dense_units": (int, 512),
    "model.dropout": (float, 0.3),
    "model.block_order": (str, "conv_relu_pool_bn"),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 2),
    "train.lr": (float, 1e-4),
    "train.seed": (int, 0),
    "train.noise_sigma": (float, 0.0),
    "train.validation": (str, "none"),
    "augment.enabled": (bool, False),
    "augment.count": (int, 7),
    "augment.noise_sigma": (float, 0.0),
    "augment.flip_axis": (int, 1),
    "ab.baseline_epochs": (int, 50),
    "ab.augmented_epochs": (int, 80),
    "eval.threshold": (float, 0.5),
    "out.dir": (str, "out"),
    "gradcheck.seed": (int, 0),
    "gradcheck.corrupt": (str, ""),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key, kind, text):
    text = text.strip()
    try:
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_lines(lines, source="<config>"):
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


class RunConfig(dict):
    """Resolved configuration: defaults < config file < overrides."""

    @classmethod
    def load(cls, path=None, overrides=()):
        raw = {}
        if path:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            raw.update(parse_lines(text.splitlines(), str(path)))
        raw.update(parse_lines(overrides, "<command line>"))
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls({k: default for k, (_, default) in DEFAULTS.items()})
        for key, text in raw.items():
            cfg[key] = _convert(key, DEFAULTS[key][0], text)
        return cfg

    def dumps(self):
        lines = []
        for key in sorted(self):
            v = self[key]
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"
