"""Flat ``section.key = value`` experiment configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError

__all__ = ["ExperimentConfig", "KEYS", "parse_float", "parse_floats", "load_config"]


def parse_float(text: str) -> float:
    """Float or simple fraction such as ``1/12``."""
    s = str(text).strip()
    try:
        if "/" in s:
            return float(Fraction(s.replace(" ", "")))
        return float(s)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def parse_floats(text: str) -> tuple[float, ...]:
    return tuple(parse_float(p) for p in str(text).split(",") if p.strip())


def parse_ints(text: str) -> tuple[int, ...]:
    out = []
    for p in str(text).split(","):
        p = p.strip().replace("_", "")
        if p:
            v = parse_float(p)
            if v != int(v):
                raise ConfigError(f"not an integer: {p!r}")
            out.append(int(v))
    return tuple(out)


def parse_int(text: str) -> int:
    (v,) = parse_ints(text) or (None,)
    if v is None:
        raise ConfigError(f"not an integer: {text!r}")
    return v


def parse_words(text: str) -> tuple[str, ...]:
    return tuple(p.strip().lower() for p in str(text).split(",") if p.strip())


def _str(text: str) -> str:
    return str(text).strip()


# key -> (parser, default); None default means "derive when needed"
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "model.name": (lambda s: _str(s).lower(), None),
    "model.theta": (parse_floats, (15.0, 3.0, 2.0)),
    "sim.x0": (parse_float, 5.0),
    "sim.substeps": (parse_int, 256),
    "schedule.kind": (lambda s: _str(s).lower(), None),
    "schedule.dt": (parse_float, 1 / 12),
    "schedule.dt_lo": (parse_float, 1 / 252),
    "schedule.dt_hi": (parse_float, 1 / 6),
    "schedule.k": (parse_int, 1000),
    "schedule.burnin": (parse_int, 100),
    "grid.xmin": (parse_float, None),
    "grid.xmax": (parse_float, None),
    "grid.n": (parse_int, 128),
    "grid.auto_margin": (parse_float, 0.5),
    "prop.base_step": (parse_float, None),
    "prop.exp_tol": (parse_float, 1e-9),
    "estimate.methods": (parse_words, ("backward", "euler")),
    "estimate.init": (parse_floats, (10.0, 5.0, 1.0)),
    "estimate.dense_dt": (parse_float, None),
    "optim.max_iter": (parse_int, 2000),
    "optim.xtol": (parse_float, 1e-6),
    "optim.ftol": (parse_float, 1e-8),
    "experiment.replications": (parse_int, 20),
    "experiment.seed": (parse_int, 0),
    "experiment.workers": (parse_int, 1),
    "moments.tau": (parse_float, 1 / 6),
    "moments.methods": (parse_words, ("euler", "ito1", "backward")),
    "convergence.tau": (parse_float, 1 / 6),
    "convergence.n_list": (parse_ints, (15, 31, 63, 127, 255, 511)),
    "convergence.ref_n": (parse_int, 2047),
    "convergence.models": (parse_words, ("cir", "icir")),
    "convergence.check_points": (parse_int, 101),
    "bench.k_list": (
        parse_ints,
        (10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000, 1_500_000, 2_000_000),
    ),
    "bench.repeats": (parse_int, 3),
    "bench.substeps": (parse_int, 64),
    "bench.methods": (parse_words, ("backward", "euler")),
    "output.dir": (_str, "."),
}


@dataclass
class ExperimentConfig:
    """Parsed configuration; ``explicit`` holds only keys the user set."""

    explicit: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            cls._check_key(key, f"{source}:{lineno}")
            values[key] = KEYS[key][0](val)
        return cls(values)

    @staticmethod
    def _check_key(key: str, where: str = "") -> None:
        if key not in KEYS:
            raise ConfigError(f"{where + ': ' if where else ''}unknown config key {key!r}")

    def get(self, key: str, default: Any = None) -> Any:
        self._check_key(key)
        if key in self.explicit:
            return self.explicit[key]
        d = KEYS[key][1]
        return default if d is None else d

    def set(self, key: str, value: Any) -> None:
        self._check_key(key)
        self.explicit[key] = KEYS[key][0](value) if isinstance(value, str) else value

    def with_defaults(self, **defaults: Any) -> "ExperimentConfig":
        """Copy in which ``defaults`` (dotted names with ``__``) fill unset keys."""
        merged = dict(self.explicit)
        for k, v in defaults.items():
            key = k.replace("__", ".")
            self._check_key(key)
            merged.setdefault(key, v)
        return ExperimentConfig(merged)

    def digest(self) -> str:
        canon = "\n".join(f"{k}={self.get(k)!r}" for k in sorted(KEYS) if k != "output.dir")
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return ExperimentConfig.from_text(text, str(p))
