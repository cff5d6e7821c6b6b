"""Flat ``key = value`` experiment configuration."""
from dataclasses import dataclass, field, fields
import math

from .errors import InvalidArgument


class ConfigError(InvalidArgument):
    """Malformed or unknown configuration entry (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    manifold: str = "sphere"        # sphere | spd
    dim: int = 2                    # d for S^d, n for SPD(n)
    target: str = "two_bump"        # sphere: two_bump | uniform | vmf | atoms; spd: wishart
    strength: float = 1.0
    kappa: float = 1e4
    n_atoms: int = 4
    dof: float = 2000.0
    prior: str = "uniform"          # uniform | riemannian_gaussian
    beta: float = math.nan          # nan: n(n+1)/2
    schedule: str = "constant"      # constant | polynomial
    h: float = math.nan
    n_steps: int = 0
    eta: float = math.nan
    T: float = 0.9
    eps: float = 0.0
    perturbation: str = "uniform_additive"
    n_samples: int = 200_000
    seed: int = 0
    workers: int = 1
    chunk_size: int = 4096
    guard_policy: str = "warn"      # fail | warn
    out: str = "out"
    experiment: str = "h_rate"      # rates: h_rate | eps_rate | schedule
    sweep: tuple = field(default=())      # N values (h_rate, schedule) or eps values (eps_rate)
    eta_sweep: tuple = field(default=())  # polynomial ladder for the schedule comparison
    tv_star: float = 1e-4
    cap_radius: float = 0.3
    t_grid: tuple = field(default=())     # T values (schedule) or bound-sweep times
    n_points: int = 50
    n_bank: int = 4000
    suites: str = "all"                   # verify: comma-separated suite names

    def validate(self):
        if self.manifold not in ("sphere", "spd"):
            raise ConfigError(f"manifold must be sphere or spd, got {self.manifold!r}")
        if self.dim < 1 or (self.manifold == "sphere" and self.dim < 2):
            raise ConfigError("dim too small")
        if not 0.0 < self.T < 1.0:
            raise ConfigError("T must lie in (0, 1)")
        if self.schedule not in ("constant", "polynomial"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.guard_policy not in ("fail", "warn"):
            raise ConfigError("guard_policy must be fail or warn")
        if self.experiment not in ("h_rate", "eps_rate", "schedule"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.n_samples < 1 or self.workers < 1 or self.chunk_size < 1:
            raise ConfigError("n_samples, workers and chunk_size must be positive")
        if self.eps < 0:
            raise ConfigError("eps must be nonnegative")
        if any(not 0.0 <= t < 1.0 for t in self.t_grid):
            raise ConfigError("t_grid values must lie in [0, 1)")
        return self

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(name, raw):
    default = getattr(ExperimentConfig(), name)
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments, blank lines allowed)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return ExperimentConfig(**values).validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg):
    """Round-trippable text form (floats printed with ``repr``)."""
    lines = []
    for k, v in cfg.as_dict().items():
        if isinstance(v, tuple):
            v = " ".join(repr(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
