"""Line-oriented `key = value` config files with dotted keys."""

from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "data.base_classes": "1,2",
    "data.novel_classes": "3",
    "episode.n_way": "1",
    "episode.k_shot": "1",
    "episode.n_query": "1",
    "model.in_channels": "1",
    "model.feat_channels": "16",
    "model.image_size": "64",
    "model.cosine_scale": "20.0",
    "model.dyn_hidden": "16",
    "ode.terminal_time": "1.0",
    "ode.steps": "4",
    "ode.scheme": "rk4",
    "train.optimizer": "sgd-momentum",
    "train.learning_rate": "0.01",
    "train.momentum": "0.9",
    "train.episodes": "2000",
    "train.eval_every": "200",
    "train.sat_epsilon": "0.025",
    "train.clip_norm": "10.0",
    "eval.episodes": "200",
    "eval.repeats": "2",
    "eval.target": "query",
    "attack.fgsm_eps": "0.02",
    "attack.pgd_eps": "0.01",
    "attack.pgd_iters": "10",
    "attack.pgd_random_start": "true",
    "attack.smia_eps": "0.04",
    "attack.smia_iters": "10",
    "attack.smia_lambda": "1.0",
    "seeds": "0,1",
}

REQUIRED = ("data.source_dir", "data.shifted_dir", "out.dir")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


class Config:
    """Typed access over a flat key-value table with defaults."""

    def __init__(self, values: dict):
        known = set(DEFAULTS) | set(REQUIRED)
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def from_file(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls(parse_config_text(path.read_text()))

    def require(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing required config key {key!r}")
        return self.values[key]

    def get_str(self, key: str) -> str:
        return self.require(key)

    def get_int(self, key: str) -> int:
        try:
            return int(self.require(key))
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} is not an integer: {self.values[key]!r}") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.require(key))
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} is not a number: {self.values[key]!r}") from exc

    def get_bool(self, key: str) -> bool:
        value = self.require(key).lower()
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} is not a boolean: {self.values[key]!r}")

    def get_int_list(self, key: str) -> tuple:
        raw = self.require(key)
        try:
            return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"config key {key!r} is not an integer list: {raw!r}") from exc

    def echo(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"
