"""Run configuration: flat ``key=value`` text with dotted key paths.

Example::

    seed=1
    train.schedule=0.01:2000,0.001:1000
    pose.torso_expansion=3.0
    action.freeze_trunk=true
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .corpus import CorpusConfig, FlowParams
from .metrics import VideoProtocol
from .trainer import ACTION_PRESETS, POSE_PRESETS, TRAIN_PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class ProbeConfig:
    num_queries: int = 200
    torso_expansion: float = 3.0
    stride: int = 1
    permutations: int = 5000


TOP_LEVEL = {"seed": int, "workers": int, "preset": str, "arch": str}
ARCH_OF_PRESET = {"mini": "vggm-mini", "paper": "vggm-paper"}


class RunConfig:
    """Sections of module configs plus a few top-level keys."""

    def __init__(self, preset="mini", seed=0, workers=1):
        if preset not in TRAIN_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
        self.top = {"seed": seed, "workers": workers, "preset": preset, "arch": ARCH_OF_PRESET[preset]}
        self.sections = {
            "corpus": CorpusConfig(),
            "flow": FlowParams(),
            "train": TRAIN_PRESETS[preset],
            "pose": POSE_PRESETS[preset],
            "action": ACTION_PRESETS[preset],
            "protocol": VideoProtocol(),
            "probe": ProbeConfig(),
        }
        self._sync()

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        top = self.__dict__.get("top", {})
        if name in top:
            return top[name]
        raise AttributeError(name)

    def _sync(self):
        """Push the top-level seed and architecture into every section that has them."""
        for name, sec in self.sections.items():
            kw = {}
            names = {f.name for f in dataclasses.fields(sec)}
            if "seed" in names:
                kw["seed"] = self.top["seed"]
            if "arch" in names:
                kw["arch"] = self.top["arch"]
            if kw:
                self.sections[name] = dataclasses.replace(sec, **kw)

    def set(self, key, raw):
        if "." not in key:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "preset" and raw != self.top["preset"]:
                raise ConfigError("the preset can only be chosen on the command line")
            self.top[key] = _parse(raw, TOP_LEVEL[key], key)
            self._sync()
            return
        section, field_name = key.split(".", 1)
        if section not in self.sections:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
        sec = self.sections[section]
        fields = {f.name: f for f in dataclasses.fields(sec)}
        if field_name not in fields:
            raise ConfigError(f"unknown config key {key!r}; {section} has {sorted(fields)}")
        if field_name in ("seed", "arch"):
            # dumped configs repeat these per section; accept them only when they agree
            if _parse(raw, TOP_LEVEL[field_name], key) != self.top[field_name]:
                raise ConfigError(f"{key!r} follows the top-level {field_name!r} key")
            return
        # optional fields (default None) stay optional whatever they currently hold
        like = None if fields[field_name].default is None else getattr(sec, field_name)
        value = _parse(raw, like, key)
        self.sections[section] = dataclasses.replace(sec, **{field_name: value})

    def update(self, pairs):
        for k, v in pairs:
            self.set(k, v)
        return self

    def items(self):
        for k in TOP_LEVEL:
            yield k, self.top[k]
        for name, sec in self.sections.items():
            for f in dataclasses.fields(sec):
                yield f"{name}.{f.name}", getattr(sec, f.name)

    def dump(self):
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())


def parse_text(text, source="<config>"):
    """``[(key, raw value), ...]`` from key=value lines; ``#`` starts a comment."""
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{lr:g}:{n}" for lr, n in v)
        return ",".join(map(str, v))
    return str(v)


def _parse(raw, like, key):
    """Parse ``raw`` into the type of the current value ``like`` (or the type ``like``)."""
    kind = like if isinstance(like, type) else type(like)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if like and isinstance(like[0], tuple):
                out = []
                for p in parts:
                    lr, n = p.split(":")
                    out.append((float(lr), int(n)))
                if not out:
                    raise ValueError(raw)
                return tuple(out)
            if like and isinstance(like[0], (int, float)):
                return tuple(type(like[0])(p) for p in parts)
            return tuple(parts)
        if like is None:
            if raw.lower() == "none":
                return None
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
