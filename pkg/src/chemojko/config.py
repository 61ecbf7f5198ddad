"""Run configuration: a frozen dataclass read from an INI file with a strict schema.

Layout::

    [grid]      dim, cells, lengths, alpha, beta
    [physics]   mu, tau, steps, interaction, sigma, eta
    [solver]    engine, eps, eps_factor, ... (see ``print_defaults``)
    [checks]    tolerances of the per-run diagnostics
    [scenario]  name plus the scenario's own parameters
    [output]    out, seed

Lists are comma separated. ``eps = auto`` means eps_factor * h^2.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace

from .grid import Grid
from .jko import EnergyParams, SolverOptions


class ConfigError(ValueError):
    pass


# field name -> INI section
_SECTIONS = {
    "grid": ("dim", "cells", "lengths", "alpha", "beta"),
    "physics": ("mu", "tau", "steps", "interaction", "sigma", "eta"),
    "solver": ("engine", "eps", "eps_factor", "eps_stages", "band", "subcells", "tol_lag", "max_outer",
               "tol_sinkhorn", "max_sinkhorn", "entropic_solver", "max_newton", "barrier", "omega", "tol_psor",
               "max_psor", "delta_sat", "rho_floor", "tie_break", "obstacle"),
    "checks": ("energy_rtol", "holder_safety", "holder_pairs", "patch_delta", "patch_bound", "pressure_rtol",
               "complementarity_rtol", "pairing_tol", "obstacle_order_rtol", "obstacle_gap", "fb_tol"),
    "output": ("out", "seed"),
}


@dataclass(frozen=True)
class RunConfig:
    # grid
    dim: int = 1
    cells: tuple = (512,)
    lengths: tuple = (2.0,)
    alpha: float = 0.0
    beta: float = 1.0
    # physics
    mu: float = 0.0
    tau: float = 1e-2
    steps: int = 10
    interaction: bool = True
    sigma: float = 1.0
    eta: float = 1.0
    # solver
    engine: str = "auto"
    eps: float | None = None
    eps_factor: float = 0.1
    eps_stages: int = 4
    band: int | None = None
    subcells: int = 1
    tol_lag: float = 1e-9
    max_outer: int = 40
    tol_sinkhorn: float = 1e-10
    max_sinkhorn: int = 50000
    entropic_solver: str = "auto"
    max_newton: int = 200
    barrier: float = 1e-4
    omega: float = 1.7
    tol_psor: float = 1e-9
    max_psor: int = 200000
    delta_sat: float = 1e-3
    rho_floor: float = 1e-12
    tie_break: str = "smallest"
    obstacle: bool = True
    # checks
    energy_rtol: float = 1e-6
    holder_safety: float = 1.5
    holder_pairs: int = 6000
    patch_delta: float = 0.05
    patch_bound: float = 0.03
    pressure_rtol: float = 1e-6
    complementarity_rtol: float = 1e-4
    pairing_tol: float = 1e-6
    obstacle_order_rtol: float = 1e-3
    obstacle_gap: float = 0.05
    fb_tol: float = 1e-6
    # scenario
    scenario: str = "stationary"
    scenario_params: dict = field(default_factory=dict)
    # output
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        from .scenarios import SCENARIOS

        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        object.__setattr__(self, "scenario_params", dict(self.scenario_params))
        problems = []
        if self.dim not in (1, 2):
            problems.append("dim must be 1 or 2")
        if len(self.cells) != self.dim or len(self.lengths) != self.dim:
            problems.append("cells and lengths need one entry per dimension")
        if any(c < 2 for c in self.cells):
            problems.append("cells must be >= 2")
        if any(not L > 0 for L in self.lengths):
            problems.append("lengths must be positive")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            problems.append("need alpha, beta >= 0 and alpha + beta > 0")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.mu < 0:
            problems.append("mu must be >= 0")
        for name in ("tau", "sigma", "eta", "eps_factor", "tol_lag", "tol_sinkhorn", "barrier", "tol_psor",
                     "delta_sat", "rho_floor", "energy_rtol", "holder_safety", "patch_delta", "patch_bound",
                     "pressure_rtol", "complementarity_rtol", "pairing_tol", "obstacle_order_rtol", "obstacle_gap",
                     "fb_tol"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                problems.append(f"{name} must be positive")
        if self.eps is not None and not self.eps > 0:
            problems.append("eps must be positive or auto")
        for name in ("max_outer", "max_sinkhorn", "max_newton", "max_psor", "holder_pairs", "subcells"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.band is not None and self.band < 1:
            problems.append("band must be >= 1 or auto")
        if not 0 < self.omega < 2:
            problems.append("omega must lie in (0, 2)")
        if self.engine not in ("auto", "quantile", "lp", "entropic"):
            problems.append(f"unknown engine {self.engine!r}")
        if self.engine == "lp" and self.mu > 0:
            problems.append("the lp engine needs mu = 0")
        if self.engine == "quantile" and self.dim != 1:
            problems.append("the quantile engine is 1D only")
        if self.entropic_solver not in ("auto", "newton", "sinkhorn"):
            problems.append(f"unknown entropic_solver {self.entropic_solver!r}")
        if self.tie_break not in ("smallest", "largest"):
            problems.append("tie_break must be smallest or largest")
        scen = SCENARIOS.get(self.scenario)
        if scen is None:
            problems.append(f"unknown scenario {self.scenario!r} (have {', '.join(sorted(SCENARIOS))})")
        else:
            problems.extend(scen.validate(self))
        if problems:
            raise ConfigError("; ".join(problems))

    # derived objects

    def build_grid(self) -> Grid:
        return Grid.box(self.cells, self.lengths, self.alpha, self.beta)

    def energy_params(self) -> EnergyParams:
        return EnergyParams(mu=self.mu, interaction_on=self.interaction, tau=self.tau, sigma=self.sigma,
                            eta=self.eta)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(engine=self.engine, subcells=self.subcells, eps=self.eps, eps_factor=self.eps_factor,
                             eps_stages=self.eps_stages, band=self.band, tol_lag=self.tol_lag,
                             max_outer=self.max_outer, tol_sinkhorn=self.tol_sinkhorn,
                             max_sinkhorn=self.max_sinkhorn, entropic_solver=self.entropic_solver,
                             max_newton=self.max_newton, barrier=self.barrier, delta_sat=self.delta_sat,
                             rho_floor=self.rho_floor, tie_break=self.tie_break)

    def with_scenario_params(self, **kw) -> "RunConfig":
        return replace(self, scenario_params={**self.scenario_params, **kw})


# --------------------------------------------------------------------------
# text form


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_value(name: str, text: str, default):
    text = text.strip()
    try:
        if name in ("eps", "band"):
            if text.lower() == "auto":
                return None
            return float(text) if name == "eps" else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if name == "cells":
            return tuple(int(v) for v in text.split(","))
        if name == "lengths":
            return tuple(float(v) for v in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def _scenario_value(text: str):
    text = text.strip()
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        return text
    return vals[0] if len(vals) == 1 else tuple(vals)


def config_to_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, names in _SECTIONS.items():
        parser[section] = {n: _format(getattr(cfg, n)) for n in names}
    scen = {"name": cfg.scenario}
    scen.update({k: _format(v) for k, v in sorted(cfg.scenario_params.items())})
    parser["scenario"] = scen
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    defaults = RunConfig()
    kw: dict = {}
    known = set(_SECTIONS) | {"scenario"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
    for section, names in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser[section].items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kw[key] = _parse_value(key, raw, getattr(defaults, key))
    if parser.has_section("scenario"):
        params = {}
        for key, raw in parser["scenario"].items():
            if key == "name":
                kw["scenario"] = raw.strip()
            else:
                params[key] = _scenario_value(raw)
        kw["scenario_params"] = params
    if "cells" in kw and "dim" not in kw:
        kw["dim"] = len(kw["cells"])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def print_defaults() -> str:
    return config_to_text(RunConfig())


def config_field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
