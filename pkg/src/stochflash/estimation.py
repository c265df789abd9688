"""Method-of-moments estimation of noise-field widths and amplitudes.

Stage 1 fits the widths ``tau_k`` by maximising normalised mutual information
between model and sample moment images; stage 2 fits the amplitudes
``lambda_k`` with the widths frozen, using L2 distance minus mutual
information. Both stages start from the best of a batch of uniform random
draws and refine it by finite-difference gradient descent with a
backtracking line search. Objectives are minimised; similarity terms enter
with a minus sign.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import NoiseBank, NoiseField, NumericalFailure
from .fourier import GridSpec, KernelParams
from .moments import MomentImages, evolve_moments, image_gradient, moment_images
from .similarity import HistogramConfig, l2_distance, mutual_information, normalized_mutual_information

log = logging.getLogger(__name__)

THREADS_ENV = "STOCHFLASH_THREADS"


class EstimationError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class DataMoments:
    mu1: np.ndarray
    var1: np.ndarray
    n: int
    I0hat: np.ndarray

    @classmethod
    def from_samples(cls, images: Sequence[np.ndarray], I0hat: np.ndarray) -> "DataMoments":
        stack = np.asarray(images, dtype=float)
        if stack.ndim != 3 or stack.shape[1:] != np.shape(I0hat):
            raise ValueError("sample images and initial image must share dimensions")
        mu1 = stack.mean(axis=0)
        var1 = ((stack - mu1) ** 2).mean(axis=0)
        return cls(mu1, var1, stack.shape[0], np.asarray(I0hat, dtype=float))


@dataclass(frozen=True)
class ParamVector:
    taus: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "taus", np.asarray(self.taus, dtype=float))
        object.__setattr__(self, "lambdas", np.asarray(self.lambdas, dtype=float))
        if self.taus.shape != self.lambdas.shape:
            raise ValueError("taus and lambdas must have the same length")
        if np.any(self.taus <= 0) or np.any(self.lambdas < 0):
            raise ValueError("need taus > 0 and lambdas >= 0")


@dataclass
class TraceRecord:
    iteration: int
    params: ParamVector
    objective: float
    step: float
    gradnorm: float


@dataclass
class OptTrace:
    stage: str
    records: list[TraceRecord] = field(default_factory=list)
    stalled: bool = False
    reason: str = ""

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def write_csv(self, path):
        p = len(self.records[0].params.taus) if self.records else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"tau{k + 1}" for k in range(p)] + [f"lambda{k + 1}" for k in range(p)]
                       + ["objective", "step", "gradnorm"])
            for r in self.records:
                w.writerow([r.iteration] + [repr(float(x)) for x in r.params.taus]
                           + [repr(float(x)) for x in r.params.lambdas]
                           + [repr(r.objective), repr(r.step), repr(r.gradnorm)])


@dataclass
class EstimationProblem:
    """Everything held fixed while the noise parameters vary."""

    data: DataMoments
    grid: GridSpec
    centers: Sequence[tuple[float, float]]
    kernel: KernelParams = field(default_factory=KernelParams)
    v0: np.ndarray | None = None
    nsteps: int = 100
    bins: int = 32

    def __post_init__(self):
        if self.data.mu1.shape != self.grid.shape:
            raise ValueError(f"data images {self.data.mu1.shape} do not match grid {self.grid.shape}")
        if self.v0 is None:
            self.v0 = self.grid.zeros()
        lo, hi = float(self.data.I0hat.min()), float(self.data.I0hat.max())
        self.mean_hist = HistogramConfig(self.bins, (lo, hi) if hi > lo else (0.0, 1.0))
        # objective_f bins variance images over their own range so it does not
        # see the amplitudes; objective_g bins them over the data range so MI
        # responds to a scale mismatch
        self.var_hist = HistogramConfig(self.bins, None)
        vlo, vhi = float(self.data.var1.min()), float(self.data.var1.max())
        self.var_hist_data = HistogramConfig(self.bins, (vlo, vhi) if vhi > vlo else (vlo, vlo + 1.0))

    @property
    def p(self) -> int:
        return len(self.centers)

    def model_images(self, params: ParamVector) -> MomentImages:
        fields = [NoiseField(tuple(c), t, l) for c, t, l in zip(self.centers, params.taus, params.lambdas)]
        bank = NoiseBank(fields, self.grid)
        sol = evolve_moments(self.v0, bank, self.nsteps, self.grid, self.kernel)
        return moment_images(self.data.I0hat, sol.final, self.grid)

    def _safe(self, params: ParamVector) -> MomentImages | None:
        try:
            with np.errstate(over="raise", invalid="raise"):
                return self.model_images(params)
        except (NumericalFailure, FloatingPointError) as exc:
            log.debug("moment solve failed at %s: %s", params, exc)
            return None

    def objective_f(self, params: ParamVector) -> float:
        """``-[NMI(mean, mu1) + NMI(var, var1)]``; ``+inf`` if the moment solve fails."""
        im = self._safe(params)
        if im is None:
            return np.inf
        d = self.data
        return -(normalized_mutual_information(im.mean_image, d.mu1, self.mean_hist)
                 + normalized_mutual_information(im.var_image, d.var1, self.var_hist))

    def objective_g(self, params: ParamVector) -> float:
        """``|mean - mu1| - MI(mean, mu1) + |var - var1| - MI(var, var1)``; ``+inf`` on failure."""
        im = self._safe(params)
        if im is None:
            return np.inf
        d = self.data
        return (l2_distance(im.mean_image, d.mu1) - mutual_information(im.mean_image, d.mu1, self.mean_hist)
                + l2_distance(im.var_image, d.var1) - mutual_information(im.var_image, d.var1, self.var_hist_data))

    def information(self, taus: Sequence[float]) -> np.ndarray:
        """Per-field sensitivity ``sum_x s_k(x)^2 |grad I0(x)|^2`` at unit amplitude.

        This is the variance image a lone field would produce at identity; small
        values mean the data barely constrain ``lambda_k``.
        """
        grad2 = np.sum(image_gradient(self.data.I0hat, self.grid) ** 2, axis=-1)
        return np.array([np.sum(NoiseField(tuple(c), t, 1.0).profile(self.grid) ** 2 * grad2)
                         for c, t in zip(self.centers, taus)])


# ---------------------------------------------------------------------------
# optimisation in unconstrained coordinates


Objective = Callable[[np.ndarray], float]


def _map(fn: Objective, points: Sequence[np.ndarray], threads: int) -> list[float]:
    if threads <= 1 or len(points) <= 1:
        return [fn(x) for x in points]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, points))


def random_init(obj: Objective, bounds: tuple[np.ndarray, np.ndarray], trials: int = 40,
                seed: int = 0, threads: int = 1) -> tuple[np.ndarray, float, np.ndarray]:
    """Best of ``trials`` uniform draws in the box ``bounds``; returns (x, f(x), all values)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    rng = np.random.default_rng(seed)
    draws = lo + (hi - lo) * rng.random((trials, lo.size))
    values = np.array(_map(obj, list(draws), threads))
    if not np.any(np.isfinite(values)):
        raise EstimationError("init", f"all {trials} random draws failed to evaluate")
    best = int(np.argmin(values))
    return draws[best], float(values[best]), values


@dataclass
class DescentOptions:
    rel_step: float = 1e-2
    fd_step: float | None = None   # absolute probe size; overrides rel_step when set
    armijo: float = 1e-4
    max_halvings: int = 20
    max_iter: int = 200
    grad_tol: float = 1e-4
    rel_tol: float = 1e-6
    trust: float = 0.25      # largest coordinate change tried by the first line-search step
    threads: int = 1


def fd_gradient(obj: Objective, x: np.ndarray, opts: DescentOptions,
                lower: np.ndarray | None = None, upper: np.ndarray | None = None) -> np.ndarray:
    """Central differences, one-sided where a probe would leave the box."""
    if opts.fd_step is not None:
        h = np.full_like(x, opts.fd_step)
    else:
        h = opts.rel_step * np.maximum(np.abs(x), 1.0)
    lower = np.full_like(x, -np.inf) if lower is None else lower
    upper = np.full_like(x, np.inf) if upper is None else upper
    hp = np.where(x + h <= upper, h, 0.0)
    hm = np.where(x - h >= lower, h, 0.0)
    probes = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = hp[i]
        probes.append(x + e)
        e[i] = -hm[i]
        probes.append(x + e)
    vals = np.array(_map(obj, probes, opts.threads)).reshape(x.size, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = (vals[:, 0] - vals[:, 1]) / (hp + hm)
    return np.where(np.isfinite(grad), grad, 0.0)


def gradient_descent(obj: Objective, x0: np.ndarray, opts: DescentOptions = DescentOptions(),
                     lower: np.ndarray | None = None, upper: np.ndarray | None = None,
                     record: Callable[[np.ndarray], ParamVector] | None = None,
                     stage: str = "descent") -> tuple[np.ndarray, OptTrace]:
    """Projected steepest descent with Armijo backtracking; returns the best iterate."""
    x = np.asarray(x0, dtype=float).copy()
    lower = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full_like(x, np.inf) if upper is None else np.asarray(upper, dtype=float)
    fx = obj(x)
    if not np.isfinite(fx):
        raise EstimationError(stage, "objective is not finite at the starting point")
    trace = OptTrace(stage)
    to_params = record or (lambda z: z)
    trace.records.append(TraceRecord(0, to_params(x), fx, 0.0, np.nan))
    for it in range(1, opts.max_iter + 1):
        grad = fd_gradient(obj, x, opts, lower, upper)
        gnorm = float(np.linalg.norm(grad))
        trace.records[-1].gradnorm = gnorm
        if gnorm < opts.grad_tol:
            trace.reason = "gradient norm below tolerance"
            break
        t = opts.trust / np.max(np.abs(grad))
        accepted = False
        for _ in range(opts.max_halvings + 1):
            xn = np.clip(x - t * grad, lower, upper)
            fn = obj(xn)
            if np.isfinite(fn) and fn <= fx - opts.armijo * float(grad @ (x - xn)) and np.any(xn != x):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            trace.stalled = it == 1
            trace.reason = "no admissible step"
            break
        rel = abs(fx - fn) / max(abs(fx), 1e-12)
        x, fx = xn, fn
        trace.records.append(TraceRecord(it, to_params(x), fx, float(t), np.nan))
        if rel < opts.rel_tol:
            trace.reason = "relative change below tolerance"
            break
    else:
        trace.reason = "iteration limit"
    return x, trace


# ---------------------------------------------------------------------------
# two-stage procedure


@dataclass
class EstimateResult:
    params: ParamVector
    stage1: OptTrace
    stage2: OptTrace | None
    low_information: np.ndarray


def estimate(problem: EstimationProblem, taus: Sequence[float | None], lambdas: Sequence[float | None],
             tau_bounds=(0.02, 0.2), lambda_bounds=(0.1, 5.0), lambda_init: float | None = None,
             trials: int = 40, seed: int = 0, skip_lambda: bool = False, max_iter: int = 200,
             threads: int | None = None, low_info_ratio: float = 0.3) -> EstimateResult:
    """Two-stage estimation; ``None`` entries of ``taus``/``lambdas`` are the unknowns.

    Stage 1 fits the unknown widths with unknown amplitudes held at
    ``lambda_init`` (default: geometric mean of ``lambda_bounds``); stage 2 fits
    the unknown amplitudes with the widths frozen at their stage-1 values.
    """
    threads = default_threads() if threads is None else threads
    # hard-binned histograms make both objectives piecewise constant at fine
    # scales, so difference probes move each parameter by about 5%
    opts1 = DescentOptions(max_iter=max_iter, threads=threads, fd_step=0.05)
    opts2 = DescentOptions(max_iter=max_iter, threads=threads, rel_step=0.05)
    p = problem.p
    if len(taus) != p or len(lambdas) != p:
        raise ValueError(f"expected {p} tau and lambda entries")
    lam0 = float(np.sqrt(lambda_bounds[0] * lambda_bounds[1])) if lambda_init is None else float(lambda_init)
    tau = np.array([np.nan if t is None else t for t in taus], dtype=float)
    lam = np.array([lam0 if l is None else l for l in lambdas], dtype=float)
    free_tau = np.isnan(tau)
    free_lam = np.array([l is None for l in lambdas])
    ss = np.random.SeedSequence(seed)
    seed1, seed2 = (int(s.generate_state(1)[0]) for s in ss.spawn(2))

    def params_tau(z):
        t = tau.copy()
        t[free_tau] = np.exp(z)
        return ParamVector(t, lam)

    if free_tau.any():
        f1 = lambda z: problem.objective_f(params_tau(z))
        lo, hi = np.log(tau_bounds[0]), np.log(tau_bounds[1])
        nfree = int(free_tau.sum())
        try:
            # widths are drawn uniformly in tau, then refined in log-tau
            t0, _, _ = random_init(lambda t: f1(np.log(t)),
                                   (np.full(nfree, tau_bounds[0]), np.full(nfree, tau_bounds[1])),
                                   trials, seed1, threads)
            z0 = np.log(t0)
            z, trace1 = gradient_descent(f1, z0, opts1, np.full(nfree, lo), np.full(nfree, hi),
                                         params_tau, stage="tau")
        except EstimationError as exc:
            raise EstimationError("tau", str(exc)) from exc
        tau[free_tau] = np.exp(z)
    else:
        trace1 = OptTrace("tau", reason="no unknown widths")
        trace1.records.append(TraceRecord(0, ParamVector(tau, lam), problem.objective_f(ParamVector(tau, lam)),
                                          0.0, 0.0))

    def params_lam(y):
        l = lam.copy()
        l[free_lam] = y
        return ParamVector(tau, l)

    trace2 = None
    if free_lam.any() and not skip_lambda:
        g2 = lambda y: problem.objective_g(params_lam(y))
        nfree = int(free_lam.sum())
        lo, hi = np.full(nfree, lambda_bounds[0]), np.full(nfree, lambda_bounds[1])
        try:
            y0, _, _ = random_init(g2, (lo, hi), trials, seed2, threads)
            y, trace2 = gradient_descent(g2, y0, opts2, np.zeros(nfree), np.full(nfree, np.inf),
                                         params_lam, stage="lambda")
        except EstimationError as exc:
            raise EstimationError("lambda", str(exc)) from exc
        lam[free_lam] = y

    info = problem.information(tau)
    low = info < low_info_ratio * info.max() if info.max() > 0 else np.ones(p, dtype=bool)
    return EstimateResult(ParamVector(tau, lam), trace1, trace2, low)
