"""Run configuration: flat key=value text with sections."""
from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, fields, replace

from .dynamics import DOUBLING, LSV, MapSpec

OUTPUT_ENV = "RECOUP_OUTPUT_DIR"
MEASURES = ("mu", "lebesgue", "acip")


class ConfigError(ValueError):
    pass


# field -> section; order here is the file order
_SECTIONS = {
    "family": "map", "gamma": "map",
    "n_grid": "grid", "tau_max": "grid", "r_max": "grid", "n_chain": "grid",
    "sample_count": "sampling", "horizon": "sampling", "seed": "sampling",
    "workers": "sampling", "batch_size": "sampling",
    "pair": "run", "observable": "run", "k_frac": "run", "checkpoints": "run",
    "clt_n": "run", "output_dir": "run",
    "xi": "constants",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    family: str = LSV
    gamma: float = 0.5
    n_grid: int = 4096
    tau_max: int = 10**6
    r_max: int = 10**5
    n_chain: int = 32
    sample_count: int = 10**5
    horizon: int = 10**4
    workers: int = 1
    batch_size: int = 1000
    pair: tuple = ("lebesgue", "mu")
    observable: str = "centered"
    k_frac: float = 0.01
    checkpoints: tuple = (10, 100, 1000, 10000)
    clt_n: int = 10**4
    output_dir: str = ""
    xi: float | None = None

    def __post_init__(self):
        if self.family not in (LSV, DOUBLING):
            raise ConfigError(f"unknown map family {self.family!r}")
        if self.family == LSV and not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        for name in ("n_grid", "tau_max", "r_max", "n_chain", "sample_count", "workers",
                     "batch_size", "clt_n"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed is mandatory and must be a non-negative integer")
        if not 0 < self.k_frac < 0.5:
            raise ConfigError("k_frac must lie in (0, 0.5)")
        if len(self.pair) != 2 or any(p not in MEASURES for p in self.pair):
            raise ConfigError(f"pair must name two of {MEASURES}")
        if any(c <= 0 for c in self.checkpoints):
            raise ConfigError("checkpoints must be positive")
        if self.xi is not None and not self.xi > 0:
            raise ConfigError("xi must be positive")

    @property
    def map(self) -> MapSpec:
        return MapSpec.doubling() if self.family == DOUBLING else MapSpec.lsv(self.gamma)

    def out_dir(self) -> str:
        return self.output_dir or os.environ.get(OUTPUT_ENV) or "recoup_out"

    # -- text form ---------------------------------------------------------

    def to_text(self, include_output: bool = True) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for f in fields(self):
            if f.name in ("output_dir", "workers") and not include_output:
                continue
            val = getattr(self, f.name)
            if val is None:
                continue
            sec = _SECTIONS[f.name]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, _fmt(val))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        kw = {}
        types = {f.name: f for f in fields(cls)}
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                if key not in types:
                    raise ConfigError(f"unknown key {sec}.{key}")
                if _SECTIONS[key] != sec:
                    raise ConfigError(f"{key} belongs in [{_SECTIONS[key]}]")
                kw[key] = _parse(key, raw)
        if "seed" not in kw:
            raise ConfigError("seed is mandatory")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    @property
    def hash(self) -> str:
        # neither where outputs go nor how many workers write them changes
        # what they contain
        return hashlib.sha256(self.to_text(include_output=False).encode()).hexdigest()[:16]


def _fmt(val) -> str:
    if isinstance(val, tuple):
        return ",".join(_fmt(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


_INT = {"seed", "n_grid", "tau_max", "r_max", "n_chain", "sample_count", "horizon", "workers",
        "batch_size", "clt_n"}
_FLOAT = {"gamma", "k_frac", "xi"}


def _parse(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if key in _FLOAT:
            return float(raw)
        if key == "checkpoints":
            return tuple(int(float(v)) for v in raw.split(",") if v.strip())
        if key == "pair":
            return tuple(v.strip() for v in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def parse_value(key: str, raw: str):
    """Command-line override parser shared with the config file."""
    if key not in _SECTIONS:
        raise ConfigError(f"unknown key {key}")
    return _parse(key, raw)
