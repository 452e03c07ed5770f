"""Experiment files: strict TOML sections, defaults, and sweep expansion.

A file has up to five sections; every key is optional and unknown keys are
rejected::

    [federation]  T, K, local_epochs, eta_l, eta_g, lambda, distance, alpha,
                  sample_frac, batch_size, global_steps, global_full_batch,
                  baseline, seed
    [data]        n_clients, beta_lo, beta_hi, heldout_beta, d_inv, d_spu,
                  label_noise, n_train, n_test
    [model]       hidden, layers, activation, rank, scale, head_scale
    [output]      dir
    [sweep]       lambdas, kinds, baselines, seeds

Sweep lists expand into the Cartesian product of their non-empty members.
"""

from __future__ import annotations

import itertools
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import Benchmark, FederationLayout, build_benchmark, make_layout
from .errors import ConfigError
from .nn import ModelParts, build_model
from .protocol import FedConfig
from .regularizers import RegSpec
from .rng import stream


@dataclass(frozen=True)
class FederationSection:
    T: int = 20
    K: int = 2
    local_epochs: bool = False
    eta_l: float = 0.1
    eta_g: float = 0.1
    # written as ``lambda`` in files
    lam: float = 0.5
    distance: str = "l2sq"
    alpha: Optional[Tuple[float, ...]] = None
    sample_frac: float = 1.0
    batch_size: int = 32
    global_steps: int = 1
    global_full_batch: bool = True
    baseline: str = "fedoa"
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    n_clients: int = 6
    beta_lo: float = 0.6
    beta_hi: float = 0.9
    heldout_beta: float = -0.9
    d_inv: int = 5
    d_spu: int = 5
    label_noise: float = 0.25
    n_train: int = 1000
    n_test: int = 200


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 16
    layers: int = 1
    activation: str = "tanh"
    rank: int = 8
    scale: float = 1.0
    head_scale: float = 1.0


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"


@dataclass(frozen=True)
class SweepSection:
    lambdas: Tuple[float, ...] = ()
    kinds: Tuple[str, ...] = ()
    baselines: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.lambdas or self.kinds or self.baselines or self.seeds)


_SECTIONS = {
    "federation": FederationSection,
    "data": DataSection,
    "model": ModelSection,
    "output": OutputSection,
    "sweep": SweepSection,
}
_FILE_KEY = {"lam": "lambda"}
_ATTR_KEY = {v: k for k, v in _FILE_KEY.items()}


def _coerce(section: str, name: str, ftype: str, value: Any):
    where = f"[{section}].{_FILE_KEY.get(name, name)}"
    base = ftype.replace("Optional[", "").rstrip("]")
    if base.startswith("Tuple["):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        item = "float" if "float" in base else ("int" if "int" in base else "str")
        return tuple(_coerce(section, name, item, v) for v in value)
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise AssertionError(f"unhandled field type {ftype}")


def _section_from_dict(name: str, raw: Any):
    cls = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        attr = _ATTR_KEY.get(key, key)
        if attr not in known or key in _FILE_KEY:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        kwargs[attr] = _coerce(name, attr, str(known[attr].type), value)
    return cls(**kwargs)


@dataclass(frozen=True)
class ExperimentFile:
    federation: FederationSection = field(default_factory=FederationSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    output: OutputSection = field(default_factory=OutputSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        try:
            self.fed_config()
            self.layout()
            if self.model.layers < 1 or self.model.hidden < 1:
                raise ValueError("model needs at least one layer of width >= 1")
            if self.model.rank > min(self.data.d_inv + self.data.d_spu, self.model.hidden):
                raise ValueError("rank exceeds the smallest adapted layer dimension")
            if self.model.activation not in ("tanh", "relu", "identity"):
                raise ValueError(f"unknown activation {self.model.activation!r}")
            for lam in self.sweep.lambdas:
                RegSpec("l2sq", lam)
            for kind in self.sweep.kinds:
                RegSpec(kind, 0.0)
            for b in self.sweep.baselines:
                replace(self.fed_config(), baseline=b)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    # -- conversion -----------------------------------------------------------

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out: Dict[str, Dict[str, Any]] = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            body = {}
            for f in fields(section):
                value = getattr(section, f.name)
                if value is None:
                    continue
                body[_FILE_KEY.get(f.name, f.name)] = list(value) if isinstance(value, tuple) else value
            out[name] = body
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentFile":
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        return cls(**{name: _section_from_dict(name, body) for name, body in raw.items()})

    @classmethod
    def parse(cls, text: str) -> "ExperimentFile":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentFile":
        return cls.parse(Path(path).read_text())

    # -- building blocks ------------------------------------------------------

    def fed_config(self) -> FedConfig:
        f = self.federation
        return FedConfig(
            T=f.T,
            K=f.K,
            eta_l=f.eta_l,
            eta_g=f.eta_g,
            reg=RegSpec(f.distance, f.lam),
            alpha=f.alpha,
            sample_frac=f.sample_frac,
            batch_size=f.batch_size,
            global_steps=f.global_steps,
            global_full_batch=f.global_full_batch,
            baseline=f.baseline,
            seed=f.seed,
            local_epochs=f.local_epochs,
        )

    def layout(self) -> FederationLayout:
        d = self.data
        return make_layout(
            d.n_clients, (d.beta_lo, d.beta_hi), d.heldout_beta, (d.d_inv, d.d_spu), (d.n_train, d.n_test), d.label_noise
        )

    def benchmark(self) -> Benchmark:
        return build_benchmark(self.layout(), self.federation.seed)

    def model_parts(self) -> ModelParts:
        m, d = self.model, self.data
        return build_model(
            d.d_inv + d.d_spu,
            m.hidden,
            m.layers,
            stream(self.federation.seed, "model"),
            m.activation,
            m.rank,
            m.scale,
            m.head_scale,
        )

    def points(self) -> List[Tuple[str, "ExperimentFile"]]:
        """Single-run configs for every sweep point, with their directory names.

        Without sweep lists the file itself is the only point and its name is ``""``.
        """
        if self.sweep.empty:
            return [("", self)]
        axes = [
            ("baseline", self.sweep.baselines),
            ("distance", self.sweep.kinds),
            ("lambda", self.sweep.lambdas),
            ("seed", self.sweep.seeds),
        ]
        active = [(k, vals) for k, vals in axes if vals]
        out = []
        for combo in itertools.product(*(vals for _, vals in active)):
            changes = {}
            parts = []
            for (key, _), value in zip(active, combo):
                changes[_ATTR_KEY.get(key, key)] = value
                parts.append(f"{key}-{value}")
            point = replace(
                self,
                federation=replace(self.federation, **changes),
                sweep=SweepSection(),
            )
            out.append(("_".join(parts), point))
        return out
