"""Experiment configuration: a sectioned ``key = value`` text file.

Grammar (``#`` and ``;`` start comments)::

    [grid]          nx, ny, trunc
    [kernel]        alpha, gamma, power
    [run]           nsteps, v0 (``zero`` or a path to an SFV1 file),
                    samples, seed, psi_scheme (``eulerian``/``semilagrangian``)
    [noise.<name>]  mu_x, mu_y, tau, lambda  -- one section per field;
                    ``tau = ?`` or ``lambda = ?`` marks an unknown to estimate
    [estimate]      bins, trials, tau_bounds, lambda_bounds, lambda_init,
                    skip_lambda, max_iter

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NoiseField
from .fourier import GridSpec, KernelParams

UNKNOWN = "?"


class ConfigError(ValueError):
    pass


@dataclass
class NoiseSpec:
    name: str
    mu: tuple[float, float]
    tau: float | None
    lam: float | None

    def field(self, tau: float | None = None, lam: float | None = None) -> NoiseField:
        tau = self.tau if tau is None else tau
        lam = self.lam if lam is None else lam
        if tau is None or lam is None:
            raise ConfigError(f"noise field {self.name} has unknown parameters")
        return NoiseField(self.mu, tau, lam)


@dataclass
class EstimateOptions:
    bins: int = 32
    trials: int = 40
    tau_bounds: tuple[float, float] = (0.02, 0.2)
    lambda_bounds: tuple[float, float] = (0.1, 5.0)
    lambda_init: float | None = None
    skip_lambda: bool = False
    max_iter: int = 200


@dataclass
class ExperimentConfig:
    grid: GridSpec
    kernel: KernelParams = field(default_factory=KernelParams)
    nsteps: int = 100
    v0: str = "zero"
    samples: int = 200
    seed: int = 0
    psi_scheme: str = "eulerian"
    noise: list[NoiseSpec] = field(default_factory=list)
    estimate: EstimateOptions = field(default_factory=EstimateOptions)
    base_dir: str = "."

    def noise_fields(self) -> list[NoiseField]:
        return [n.field() for n in self.noise]

    def load_v0(self) -> np.ndarray:
        if self.v0 == "zero":
            return self.grid.zeros()
        from .io import read_spectral

        c, g = read_spectral(self._path(self.v0))
        if g != self.grid:
            raise ConfigError(f"v0 file grid {g} does not match config grid {self.grid}")
        return c

    def _path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def sample_seed(self, index: int) -> int:
        ss = np.random.SeedSequence([self.seed, index])
        return int(ss.generate_state(1, np.uint64)[0])

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["grid"] = {"nx": str(self.grid.nx), "ny": str(self.grid.ny), "trunc": str(self.grid.trunc)}
        cp["kernel"] = {k: repr(getattr(self.kernel, k)) for k in ("alpha", "gamma", "power")}
        cp["run"] = {"nsteps": str(self.nsteps), "v0": self.v0, "samples": str(self.samples),
                     "seed": str(self.seed), "psi_scheme": self.psi_scheme}
        for n in self.noise:
            cp[f"noise.{n.name}"] = {
                "mu_x": repr(n.mu[0]), "mu_y": repr(n.mu[1]),
                "tau": UNKNOWN if n.tau is None else repr(n.tau),
                "lambda": UNKNOWN if n.lam is None else repr(n.lam),
            }
        e = self.estimate
        cp["estimate"] = {
            "bins": str(e.bins), "trials": str(e.trials),
            "tau_bounds": f"{e.tau_bounds[0]!r}, {e.tau_bounds[1]!r}",
            "lambda_bounds": f"{e.lambda_bounds[0]!r}, {e.lambda_bounds[1]!r}",
            "lambda_init": "" if e.lambda_init is None else repr(e.lambda_init),
            "skip_lambda": str(e.skip_lambda).lower(), "max_iter": str(e.max_iter),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _opt(value: str) -> float | None:
    value = value.strip()
    return None if value == UNKNOWN else float(value)


def _pair(value: str) -> tuple[float, float]:
    parts = [float(x) for x in value.split(",")]
    if len(parts) != 2 or not parts[1] > parts[0]:
        raise ConfigError(f"expected 'lo, hi' with hi > lo, got {value!r}")
    return parts[0], parts[1]


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
        if "grid" not in cp:
            raise ConfigError("missing [grid] section")
        gs = cp["grid"]
        grid = GridSpec(gs.getint("nx"), gs.getint("ny", gs.getint("nx")), gs.getint("trunc", 16))
        ks = cp["kernel"] if "kernel" in cp else {}
        kernel = KernelParams(float(ks.get("alpha", 3.0)), float(ks.get("gamma", 1.0)), int(ks.get("power", 3)))
        rs = cp["run"] if "run" in cp else cp["DEFAULT"]
        noise = []
        for sec in cp.sections():
            if sec.startswith("noise."):
                s = cp[sec]
                noise.append(NoiseSpec(sec[6:], (float(s["mu_x"]), float(s["mu_y"])), _opt(s["tau"]), _opt(s["lambda"])))
        es = cp["estimate"] if "estimate" in cp else cp["DEFAULT"]
        li = es.get("lambda_init", "").strip()
        est = EstimateOptions(
            bins=int(es.get("bins", 32)),
            trials=int(es.get("trials", 40)),
            tau_bounds=_pair(es.get("tau_bounds", "0.02, 0.2")),
            lambda_bounds=_pair(es.get("lambda_bounds", "0.1, 5.0")),
            lambda_init=float(li) if li else None,
            skip_lambda=es.get("skip_lambda", "false").strip().lower() in ("1", "true", "yes"),
            max_iter=int(es.get("max_iter", 200)),
        )
        cfg = ExperimentConfig(
            grid=grid, kernel=kernel,
            nsteps=int(rs.get("nsteps", 100)), v0=rs.get("v0", "zero").strip(),
            samples=int(rs.get("samples", 200)), seed=int(rs.get("seed", 0)),
            psi_scheme=rs.get("psi_scheme", "eulerian").strip(),
            noise=noise, estimate=est, base_dir=base_dir,
        )
    except (configparser.Error, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.nsteps < 1 or cfg.samples < 1:
        raise ConfigError("nsteps and samples must be positive")
    if cfg.psi_scheme not in ("eulerian", "semilagrangian"):
        raise ConfigError(f"unknown psi_scheme {cfg.psi_scheme!r}")
    if cfg.v0 != "zero" and not os.path.exists(cfg._path(cfg.v0)):
        raise ConfigError(f"v0 file {cfg.v0!r} not found")
    for n in noise:
        if n.tau is not None and not n.tau > 0:
            raise ConfigError(f"noise field {n.name}: tau must be positive")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
