"""Flat `key = value` run configuration.

One file carries everything a run needs: the prior, the schedule, the
control family, growth-grid settings, and the execution knobs (seed,
threads, output directory).  Loading is strict: unknown keys, duplicate
keys, and malformed values are rejected with file:line messages.  The
configuration hash covers every statistical key, so archives written
under one prior can refuse to be refined under another; the execution
knobs (seed, threads, out, observations path) are excluded because they
do not change what the numbers mean.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

from .distance import ToleranceSchedule
from .errors import ConfigError
from .growth import GrowthFitConfig, default_family_grid
from .laws import (
    Binomial,
    BinomialControl,
    DensityControl,
    FinitePmf,
    Geometric,
    FAMILY_CODES,
)
from .smc import GammaPrior, PriorSpec, SmcConfig

_EXECUTION_KEYS = ("seed", "threads", "out", "observations")


def _int_parser(lo: Optional[int] = None) -> Callable[[str], int]:
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return parse


def _float_parser(lo: Optional[float] = None, lo_open: bool = False,
                  hi: Optional[float] = None,
                  hi_open: bool = False) -> Callable[[str], float]:
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}")
        return v
    return parse


def _choice_parser(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}; "
                             f"got {text!r}")
        return text
    return parse


def _int_list_parser(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}")


def _float_list_parser(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part.strip()) for part in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}")


def _str_parser(text: str) -> str:
    return text


# name -> (parser, default); None defaults mean "unset"
_KEYS: Dict[str, Tuple[Callable[[str], object], object]] = {
    "seed": (_int_parser(0), 1),
    "threads": (_int_parser(1), 1),
    "out": (_str_parser, "out"),
    "observations": (_str_parser, None),
    "kappa_max": (_int_parser(3), 15),
    "gamma_prior": (_choice_parser("beta", "uniform"), "beta"),
    "gamma_a": (_float_parser(), 1.0),
    "gamma_b": (_float_parser(), 1.0),
    "pool_sizes": (_int_list_parser, (8000, 40000, 200000)),
    "particles": (_int_parser(1), 200),
    "tuning_a": (_float_parser(0.0, lo_open=True), 30.0),
    "sigma_floor": (_float_parser(0.0), None),
    "gamma_redraw_budget": (_int_parser(1), 100),
    "attempt_factor": (_int_parser(1), 50),
    "size_cap": (_int_parser(1), 10**12),
    "control_family": (_choice_parser("binomial-xi", *FAMILY_CODES),
                       "binomial-xi"),
    "control_shape": (_float_parser(0.0, lo_open=True), None),
    "k_prior_lo": (_float_parser(0.0, lo_open=True), None),
    "k_prior_hi": (_float_parser(0.0, lo_open=True), None),
    "replicates": (_int_parser(1), 200),
    "keep_fraction": (_float_parser(0.0, lo_open=True, hi=1.0), 0.1),
    "min_group": (_int_parser(2), 50),
    "kappa_hat": (_int_parser(2), None),
    "hpd_level": (_float_parser(0.0, lo_open=True, hi=1.0, hi_open=True),
                  0.95),
    "grid_size": (_int_parser(16), 512),
    "joint_grid_size": (_int_parser(8), 64),
    "offspring": (_str_parser, None),
    "gamma": (_float_parser(0.0, lo_open=True), None),
    "z0": (_int_parser(1), 1),
    "generations": (_int_parser(1), 30),
    "family_grid": (_str_parser, "default"),
}

_ALPHA_KEY = re.compile(r"^alpha_(\d+)$")


def _canonical(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Validated key set; builders construct the typed run objects."""

    values: Mapping[str, object]
    alpha: Mapping[int, Tuple[float, ...]]
    origin: str = "<memory>"

    def __getitem__(self, key: str) -> object:
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def threads(self) -> int:
        return self.values["threads"]

    @property
    def out(self) -> str:
        return self.values["out"]

    @property
    def config_hash(self) -> str:
        lines = [f"{k} = {_canonical(v)}" for k, v in sorted(self.values.items())
                 if k not in _EXECUTION_KEYS]
        lines += [f"alpha_{k} = {_canonical(v)}"
                  for k, v in sorted(self.alpha.items())]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def with_overrides(self, seed: Optional[int] = None,
                       threads: Optional[int] = None,
                       out: Optional[str] = None) -> "RunConfig":
        values = dict(self.values)
        if seed is not None:
            values["seed"] = seed
        if threads is not None:
            values["threads"] = threads
        if out is not None:
            values["out"] = out
        return RunConfig(values=values, alpha=self.alpha, origin=self.origin)

    def prior_spec(self) -> PriorSpec:
        prior = GammaPrior(kind=self.values["gamma_prior"],
                           a=self.values["gamma_a"],
                           b=self.values["gamma_b"])
        return PriorSpec(kappa_max=self.values["kappa_max"],
                         gamma_prior=prior,
                         alpha=dict(self.alpha) if self.alpha else None)

    def smc_config(self) -> SmcConfig:
        schedule = ToleranceSchedule.from_pools(self.values["pool_sizes"],
                                                self.values["particles"])
        return SmcConfig(schedule=schedule,
                         tuning_a=self.values["tuning_a"],
                         sigma_floor=self.values["sigma_floor"],
                         gamma_redraw_budget=self.values["gamma_redraw_budget"],
                         attempt_factor=self.values["attempt_factor"],
                         size_cap=self.values["size_cap"])

    def k_prior(self) -> Tuple[float, float]:
        lo, hi = self.values["k_prior_lo"], self.values["k_prior_hi"]
        if lo is None or hi is None:
            raise ConfigError("k_prior_lo and k_prior_hi are required here")
        return (lo, hi)

    def growth_config(self) -> GrowthFitConfig:
        return GrowthFitConfig(smc=self.smc_config(), k_prior=self.k_prior(),
                               kappa_max=self.values["kappa_max"],
                               family_grid=self.parsed_family_grid(),
                               replicates=self.values["replicates"],
                               keep_fraction=self.values["keep_fraction"],
                               min_group=self.values["min_group"])

    def parsed_family_grid(self) -> Tuple[Tuple[str, Optional[float]], ...]:
        spec = self.values["family_grid"]
        if spec == "default":
            return default_family_grid()
        grid = []
        for part in spec.split(";"):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                fam, _, val = part.partition(":")
                try:
                    grid.append((fam.strip(), float(val)))
                except ValueError:
                    raise ConfigError(f"bad family grid entry {part!r}")
            else:
                grid.append((part, None))
        return tuple(grid)

    def offspring_law(self):
        spec = self.values["offspring"]
        if spec is None:
            raise ConfigError("the offspring key is required here")
        try:
            if spec.startswith("geometric:"):
                return Geometric(q=float(spec.split(":", 1)[1]))
            if spec.startswith("binomial:"):
                _, size, p = spec.split(":")
                return Binomial(size=int(size), success=float(p))
            return FinitePmf(probs=tuple(float(v) for v in spec.split(",")))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad offspring spec {spec!r}: {exc}")

    def control_law(self):
        g = self.values["gamma"]
        if g is None:
            raise ConfigError("the gamma key (control parameter) is "
                              "required here")
        family = self.values["control_family"]
        if family == "binomial-xi":
            return BinomialControl(gamma=g)
        return DensityControl(family=family, capacity=g,
                              shape=self.values["control_shape"])


def parse_config(text: str, origin: str = "<memory>") -> RunConfig:
    values: Dict[str, object] = {k: d for k, (_, d) in _KEYS.items()}
    alpha: Dict[int, Tuple[float, ...]] = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected `key = value`, "
                              f"got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in seen:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        alpha_match = _ALPHA_KEY.match(key)
        if alpha_match is not None:
            try:
                alpha[int(alpha_match.group(1))] = _float_list_parser(val)
            except ValueError as exc:
                raise ConfigError(f"{origin}:{lineno}: {key}: {exc}")
            continue
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        parser, _ = _KEYS[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: {key}: {exc}")
    return RunConfig(values=values, alpha=alpha, origin=origin)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text, origin=path)
