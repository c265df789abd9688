"""Deterministic and stochastic EPDiff shooting, forward/inverse flows, image warping.

The velocity is carried spectrally (see :mod:`stochflash.fourier`); the flows
``phi_t`` and ``psi_t = phi_t^{-1}`` are carried as lattice maps in domain
coordinates. All stepping functions accept leading batch axes so a whole
ensemble of paths can be advanced in one call.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .fourier import GridSpec, KernelParams, apply_K, apply_L, coadjoint, to_spatial, to_spectral


class NumericalFailure(FloatingPointError):
    pass


class FoldOverWarning(RuntimeWarning):
    pass


def pixel_size(g: GridSpec) -> float:
    return float(np.sqrt(g.hx * g.hy))


@dataclass(frozen=True)
class NoiseField:
    """Isotropic Gaussian noise kernel ``lam * exp(-|x - mu|^2 / (2 tau^2)) * Id``.

    The identity acts on a planar Wiener increment, so each field pushes the
    flow in both directions independently. ``mu`` and ``tau`` are in domain
    units (the unit square); ``lam`` is in pixels per unit time per unit
    Wiener increment, so the domain-unit amplitude is ``lam * h * profile``
    with ``h`` the lattice spacing. Distances are measured on the torus
    (nearest periodic image).
    """

    mu: tuple[float, float]
    tau: float
    lam: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "mu", (float(self.mu[0]), float(self.mu[1])))

    def profile(self, g: GridSpec) -> np.ndarray:
        d = g.identity - np.asarray(self.mu)
        d -= np.round(d)
        return np.exp(-np.sum(d**2, axis=-1) / (2 * self.tau**2))

    def spatial(self, g: GridSpec) -> np.ndarray:
        """The two columns of the field in domain units, shape (2, nx, ny, 2)."""
        return (self.lam * pixel_size(g) * self.profile(g))[..., None] * np.eye(2)[:, None, None, :]

    def spectral(self, g: GridSpec) -> np.ndarray:
        return to_spectral(self.spatial(g), g)


@dataclass
class NoiseBank:
    """Sampled spatial and spectral forms of a list of noise fields on one grid."""

    fields: list[NoiseField]
    grid: GridSpec

    @cached_property
    def scalar(self) -> np.ndarray:
        """Scalar amplitude per field in domain units, shape (p, nx, ny)."""
        if not self.fields:
            return np.zeros((0,) + self.grid.shape)
        h = pixel_size(self.grid)
        return np.stack([f.lam * h * f.profile(self.grid) for f in self.fields])

    @cached_property
    def scalar_spectral(self) -> np.ndarray:
        """Band-limited spectra of the scalar amplitudes, shape (p, trunc, trunc)."""
        g = self.grid
        if not self.fields:
            return np.zeros((0, g.trunc, g.trunc), dtype=complex)
        return to_spectral(np.repeat(self.scalar[..., None], 2, axis=-1), g)[..., 0]

    @cached_property
    def spatial(self) -> np.ndarray:
        """Column fields ``s_k e_c``, shape (p, 2, nx, ny, 2)."""
        return self.scalar[:, None, ..., None] * np.eye(2)[:, None, None, :]

    @cached_property
    def spectral(self) -> np.ndarray:
        """Spectra of the column fields ``s_k e_c``, shape (p, 2, trunc, trunc, 2)."""
        return self.scalar_spectral[:, None, ..., None] * np.eye(2)[:, None, None, :]

    @cached_property
    def power(self) -> np.ndarray:
        """``sum_k s_k(x)^2`` for the scalar profiles ``s_k``, shape (nx, ny)."""
        return np.sum(self.scalar**2, axis=0)

    @cached_property
    def shifted_power(self) -> np.ndarray:
        """``sum_k s_k(x) s_k(x + d e_b)``, shape (2, 2, nx, ny) indexed by axis ``b`` and ``d = +1, -1``."""
        s = self.scalar
        return np.array([[np.sum(s * np.roll(s, -d, axis=1 + b), axis=0) for d in (1, -1)] for b in range(2)])

    @property
    def active(self) -> bool:
        return any(f.lam != 0 for f in self.fields)

    def __len__(self):
        return len(self.fields)


@dataclass
class WienerPath:
    """Planar Gaussian increments with variance ``dt`` per field and axis, shape (nsteps, p, 2)."""

    seed: int
    nsteps: int
    p: int
    increments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dt = 1.0 / self.nsteps
        rng = np.random.default_rng(self.seed)
        self.increments = rng.standard_normal((self.nsteps, self.p, 2)) * np.sqrt(dt)
        n = self.increments.size
        if n >= 10_000:
            ratio = self.increments.var() / dt
            if abs(ratio - 1) > 0.1:
                raise RuntimeError(f"Wiener increment variance off by {ratio:.3f}x dt")


def epdiff_rhs(v: np.ndarray, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    """``-K ad*_v m`` with ``m = L v``."""
    if not v.any():
        return np.zeros_like(v, dtype=complex)
    return -apply_K(coadjoint(v, apply_L(v, g, kernel), g), g, kernel)


def noise_rhs(v: np.ndarray, sigma: np.ndarray, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    """``-K ad*_sigma m``; linear in ``sigma`` so a weighted sum of fields may be passed."""
    if not v.any():
        return np.zeros(np.broadcast_shapes(v.shape, sigma.shape), dtype=complex)
    return -apply_K(coadjoint(sigma, apply_L(v, g, kernel), g), g, kernel)


def epdiff_deterministic_step(v: np.ndarray, dt: float, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    """One RK4 step of the truncated EPDiff equation."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = epdiff_rhs(v, g, kernel)
    k2 = epdiff_rhs(v + 0.5 * dt * k1, g, kernel)
    k3 = epdiff_rhs(v + 0.5 * dt * k2, g, kernel)
    k4 = epdiff_rhs(v + dt * k3, g, kernel)
    out = v + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(out, "velocity")
    return out


def _velocity_increment(v, s, dt, g, kernel):
    """``-K ad*_{v dt + s} m`` in one product: the drift and noise terms share ``m = L v``."""
    if not v.any():
        return np.zeros(np.broadcast_shapes(v.shape, s.shape), dtype=complex)
    return -apply_K(coadjoint(v * dt + s, apply_L(v, g, kernel), g), g, kernel)


def _combined_noise(bank: NoiseBank, dW: np.ndarray, spectral: bool) -> np.ndarray:
    # sum_k s_k dW_k as a vector field; dW has shape (..., p, 2)
    base = bank.scalar_spectral if spectral else bank.scalar
    return np.ascontiguousarray(np.moveaxis(np.tensordot(dW, base, axes=([-2], [0])), -3, -1))


def epdiff_stochastic_step(v: np.ndarray, bank: NoiseBank, dW: np.ndarray, dt: float,
                           g: GridSpec, kernel: KernelParams) -> np.ndarray:
    """One Stratonovich Heun step of the stochastic EPDiff equation."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if bank.active:
        s = _combined_noise(bank, np.asarray(dW), spectral=True)
        d0 = _velocity_increment(v, s, dt, g, kernel)
        vp = v + d0
        out = v + 0.5 * (d0 + _velocity_increment(vp, s, dt, g, kernel))
    else:
        a0 = epdiff_rhs(v, g, kernel)
        vp = v + a0 * dt
        a1 = epdiff_rhs(vp, g, kernel)
        out = v + 0.5 * (a0 + a1) * dt
    _check_finite(out, "velocity")
    return out


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite {what} encountered")


def central_diff(f: np.ndarray, g: GridSpec) -> np.ndarray:
    """Periodic central-difference Jacobian of a lattice field (..., nx, ny, C) -> (..., nx, ny, C, 2)."""
    dx = (np.roll(f, -1, axis=-3) - np.roll(f, 1, axis=-3)) * (0.5 * g.nx)
    dy = (np.roll(f, -1, axis=-2) - np.roll(f, 1, axis=-2)) * (0.5 * g.ny)
    return np.stack([dx, dy], axis=-1)


def _map_differences(psi: np.ndarray, g: GridSpec):
    """Central differences ``(d_x psi, d_y psi)`` of a periodic-displacement map, each (..., nx, ny, 2)."""
    d = psi - g.identity
    dx = (np.roll(d, -1, axis=-3) - np.roll(d, 1, axis=-3)) * (0.5 * g.nx)
    dy = (np.roll(d, -1, axis=-2) - np.roll(d, 1, axis=-2)) * (0.5 * g.ny)
    dx[..., 0] += 1.0
    dy[..., 1] += 1.0
    return dx, dy


def map_jacobian(psi: np.ndarray, g: GridSpec) -> np.ndarray:
    """Jacobian of a map whose displacement from the identity is periodic."""
    return central_diff(psi - g.identity, g) + np.eye(2)


def interp_periodic(F: np.ndarray, P: np.ndarray, g: GridSpec) -> np.ndarray:
    """Bilinear sample of lattice field ``F`` (..., nx, ny[, C]) at domain points ``P`` (..., 2).

    Points wrap periodically. ``F`` batch axes must match (or be absent from)
    the leading axes of ``P``.
    """
    scalar = F.shape[-2:] == g.shape
    if scalar:
        F = F[..., None]
    nx, ny = g.shape
    C = F.shape[-1]
    u = P[..., 0] * nx
    w = P[..., 1] * ny
    # snap values within round-off of a lattice index so aligned shifts are exact
    ur, wr = np.rint(u), np.rint(w)
    u = np.where(np.abs(u - ur) < 1e-9, ur, u)
    w = np.where(np.abs(w - wr) < 1e-9, wr, w)
    i0f = np.floor(u)
    j0f = np.floor(w)
    fx = u - i0f
    fy = w - j0f
    i0 = i0f.astype(np.int64) % nx
    j0 = j0f.astype(np.int64) % ny
    i1 = i0 + 1
    i1[i1 == nx] = 0
    j1 = j0 + 1
    j1[j1 == ny] = 0
    fbatch = F.shape[:-3]
    flat = F.reshape(-1, C)
    if fbatch:
        pbatch = P.shape[:-1]
        nb = int(np.prod(fbatch))
        if pbatch[: len(fbatch)] != fbatch:
            flat = np.broadcast_to(F, pbatch[: len(fbatch)] + F.shape[-3:]).reshape(-1, C)
            nb = int(np.prod(pbatch[: len(fbatch)]))
        base = (np.arange(nb) * (nx * ny)).reshape(pbatch[: len(fbatch)] + (1,) * (len(pbatch) - len(fbatch)))
        i0 = i0 * ny + base
        i1 = i1 * ny + base
    else:
        i0 = i0 * ny
        i1 = i1 * ny
    gx = 1 - fx
    gy = 1 - fy
    out = ((gx * gy)[..., None] * np.take(flat, i0 + j0, axis=0)
           + (fx * gy)[..., None] * np.take(flat, i1 + j0, axis=0)
           + (gx * fy)[..., None] * np.take(flat, i0 + j1, axis=0)
           + (fx * fy)[..., None] * np.take(flat, i1 + j1, axis=0))
    return out[..., 0] if scalar else out


def _flow_terms(v, phi, psi, s_sp, g, track_forward):
    """Drift and combined-noise increments of (phi, psi) at one stage.

    ``s_sp`` is the lattice vector field ``sum_k sigma_k dW_k`` (or None).
    """
    v_sp = to_spatial(v, g, check=False) if v.any() else None
    dx, dy = _map_differences(psi, g)
    a_phi = b_phi = 0.0
    if track_forward:
        chans = []
        if v_sp is not None:
            chans.append(np.broadcast_to(v_sp, psi.shape))
        if s_sp is not None:
            chans.append(np.broadcast_to(s_sp, psi.shape))
        if chans:
            at_phi = interp_periodic(np.concatenate(chans, axis=-1), phi, g)
            if v_sp is not None:
                a_phi = at_phi[..., 0:2]
            if s_sp is not None:
                b_phi = at_phi[..., -2:]
        if v_sp is None:
            a_phi = np.zeros_like(phi)
    a_psi = -(dx * v_sp[..., 0:1] + dy * v_sp[..., 1:2]) if v_sp is not None else np.zeros_like(psi)
    b_psi = -(dx * s_sp[..., 0:1] + dy * s_sp[..., 1:2]) if s_sp is not None else 0.0
    return a_phi, b_phi, a_psi, b_psi


@dataclass
class FlowState:
    v: np.ndarray
    phi: np.ndarray | None
    psi: np.ndarray


def _displacement(v, s_sp, dt, g):
    """Per-step lattice displacement ``v dt + sum_k sigma_k dW_k`` or None when identically zero."""
    w = to_spatial(v, g, check=False) * dt if v.any() else None
    if s_sp is not None:
        w = s_sp if w is None else w + s_sp
    return w


def flow_heun_step(state: FlowState, bank: NoiseBank, dW: np.ndarray, dt: float,
                   g: GridSpec, kernel: KernelParams, psi_scheme: str = "eulerian") -> FlowState:
    """Joint Stratonovich Heun step for (v, phi, psi) sharing the increments ``dW``.

    The forward map follows its characteristics (off-lattice evaluation by
    bilinear interpolation). With ``psi_scheme="semilagrangian"`` the inverse
    map is advanced along the backward characteristic,
    ``psi_{n+1}(x) = psi_n(y(x))``, with ``y`` from a Heun step of the reversed
    flow; ``"eulerian"`` instead integrates
    ``d psi = -D psi v dt - sum_k D psi sigma_k o dW_k`` with central differences,
    which is only stable for small per-step displacements.
    ``state.phi`` may be None, in which case the forward map is not advanced.
    """
    v, phi, psi = state.v, state.phi, state.psi
    if psi_scheme == "eulerian":
        return _flow_heun_eulerian(state, bank, dW, dt, g, kernel)
    if psi_scheme != "semilagrangian":
        raise ValueError(f"unknown psi scheme {psi_scheme!r}")
    s_spec = s_sc = None
    if bank.active:
        dW = np.asarray(dW)
        s_spec = _combined_noise(bank, dW, spectral=True)
        s_sc = _combined_noise(bank, dW, spectral=False)
    if s_spec is not None:
        dv0 = _velocity_increment(v, s_spec, dt, g, kernel)
        v_new = v + 0.5 * (dv0 + _velocity_increment(v + dv0, s_spec, dt, g, kernel))
    else:
        a_v0 = epdiff_rhs(v, g, kernel)
        v_new = v + 0.5 * (a_v0 + epdiff_rhs(v + a_v0 * dt, g, kernel)) * dt
    _check_finite(v_new, "velocity")

    w0 = _displacement(v, s_sc, dt, g)
    w1 = _displacement(v_new, s_sc, dt, g)
    if w0 is None and w1 is None:
        return FlowState(v_new, phi, psi)
    zero = np.zeros(psi.shape)
    w0 = zero if w0 is None else np.broadcast_to(w0, psi.shape)
    w1 = zero if w1 is None else np.broadcast_to(w1, psi.shape)

    phi_new = None
    if phi is not None:
        d0 = interp_periodic(w0, phi, g)
        d1 = interp_periodic(w1, phi + d0, g)
        phi_new = phi + 0.5 * (d0 + d1)

    x = g.identity
    ystar = x - w1
    y = x - 0.5 * (w1 + interp_periodic(w0, ystar, g))
    psi_new = y + interp_periodic(psi - x, y, g)
    return FlowState(v_new, phi_new, psi_new)


def _flow_heun_eulerian(state, bank, dW, dt, g, kernel):
    v, phi, psi = state.v, state.phi, state.psi
    fwd = phi is not None
    noisy = bank.active
    s_spec = s_sc = None
    if noisy:
        dW = np.asarray(dW)
        s_spec = _combined_noise(bank, dW, spectral=True)
        s_sc = _combined_noise(bank, dW, spectral=False)
        dv0 = _velocity_increment(v, s_spec, dt, g, kernel)
    else:
        dv0 = epdiff_rhs(v, g, kernel) * dt
    a_phi0, b_phi0, a_psi0, b_psi0 = _flow_terms(v, phi, psi, s_sc, g, fwd)
    vp = v + dv0
    psip = psi + a_psi0 * dt + b_psi0
    phip = phi + a_phi0 * dt + b_phi0 if fwd else None
    if noisy:
        dv1 = _velocity_increment(vp, s_spec, dt, g, kernel)
    else:
        dv1 = epdiff_rhs(vp, g, kernel) * dt
    a_phi1, b_phi1, a_psi1, b_psi1 = _flow_terms(vp, phip, psip, s_sc, g, fwd)
    v_new = v + 0.5 * (dv0 + dv1)
    psi_new = psi + 0.5 * (a_psi0 + a_psi1) * dt + 0.5 * (b_psi0 + b_psi1)
    phi_new = phi + 0.5 * (a_phi0 + a_phi1) * dt + 0.5 * (b_phi0 + b_phi1) if fwd else None
    return FlowState(v_new, phi_new, psi_new)


def _flow_rhs(v, phi, psi, g, kernel):
    a_phi, _, a_psi, _ = _flow_terms(v, phi, psi, None, g, True)
    return epdiff_rhs(v, g, kernel), a_phi, a_psi


def flow_rk4_step(state: FlowState, dt: float, g: GridSpec, kernel: KernelParams) -> FlowState:
    """Deterministic RK4 step for (v, phi, psi)."""
    s = (state.v, state.phi, state.psi)
    k1 = _flow_rhs(*s, g, kernel)
    k2 = _flow_rhs(*(x + 0.5 * dt * k for x, k in zip(s, k1)), g, kernel)
    k3 = _flow_rhs(*(x + 0.5 * dt * k for x, k in zip(s, k2)), g, kernel)
    k4 = _flow_rhs(*(x + dt * k for x, k in zip(s, k3)), g, kernel)
    new = [x + dt / 6 * (a + 2 * b + 2 * c + d) for x, a, b, c, d in zip(s, k1, k2, k3, k4)]
    return FlowState(*new)


@dataclass
class Trajectory:
    times: np.ndarray
    v: list[np.ndarray]
    phi: list[np.ndarray]
    psi: list[np.ndarray]

    @property
    def final(self) -> FlowState:
        return FlowState(self.v[-1], self.phi[-1], self.psi[-1])


def fold_fraction(psi: np.ndarray, g: GridSpec) -> float:
    J = map_jacobian(psi, g)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return float(np.mean(det <= 0))


def integrate_flow(v0: np.ndarray, bank: NoiseBank | None, increments: np.ndarray | None,
                   nsteps: int, g: GridSpec, kernel: KernelParams, scheme: str = "heun",
                   keep: str | list[int] = "final", warn_fold: bool = True,
                   track_forward: bool = True, psi_scheme: str = "eulerian") -> Trajectory:
    """Integrate (v, phi, psi) over t in [0, 1] with ``nsteps`` equal steps.

    ``increments`` has shape (nsteps, ..., p, 2); extra middle axes are batch
    axes and ``v0`` is broadcast against them. ``scheme="rk4"`` is only
    allowed without noise. ``keep`` is ``"final"``, ``"all"`` or a list of step
    indices at which the state is recorded (0 is the initial state).
    With ``track_forward=False`` the forward map is skipped (recorded as None).
    """
    if nsteps < 1:
        raise ValueError("nsteps must be >= 1")
    bank = bank if bank is not None else NoiseBank([], g)
    dt = 1.0 / nsteps
    if scheme == "rk4" and bank.active:
        raise ValueError("rk4 is only available for the deterministic flow")
    if scheme not in ("heun", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if increments is None:
        increments = np.zeros((nsteps, len(bank), 2))
    increments = np.asarray(increments, dtype=float)
    if increments.ndim < 3 or increments.shape[0] != nsteps or increments.shape[-2:] != (len(bank), 2):
        raise ValueError(f"increments shape {increments.shape} does not match (nsteps={nsteps}, ..., p={len(bank)}, 2)")
    batch = increments.shape[1:-2]
    v = np.broadcast_to(v0, batch + v0.shape[-3:]).astype(complex)
    ident = np.broadcast_to(g.identity, batch + g.identity.shape)
    state = FlowState(v, ident.copy() if track_forward else None, ident.copy())
    if keep == "final":
        wanted = {nsteps}
    elif keep == "all":
        wanted = set(range(nsteps + 1))
    else:
        wanted = set(keep)
    traj = Trajectory(np.array(sorted(wanted)) * dt, [], [], [])

    def record(n):
        if n in wanted:
            traj.v.append(state.v)
            traj.phi.append(state.phi)
            traj.psi.append(state.psi)

    record(0)
    for n in range(nsteps):
        if scheme == "rk4":
            state = flow_rk4_step(state, dt, g, kernel)
        else:
            state = flow_heun_step(state, bank, increments[n], dt, g, kernel, psi_scheme)
        for x, name in ((state.v, "velocity"), (state.phi, "forward map"), (state.psi, "inverse map")):
            if x is not None:
                _check_finite(x, name)
        record(n + 1)
    if warn_fold:
        frac = fold_fraction(state.psi, g)
        if frac > 0:
            warnings.warn(f"inverse map folds on {frac:.2%} of pixels", FoldOverWarning, stacklevel=2)
    return traj


def compose(phi: np.ndarray, psi: np.ndarray, g: GridSpec) -> np.ndarray:
    """``phi(psi(x))`` on the lattice; ``phi`` is interpolated through its periodic displacement."""
    disp = phi - g.identity
    return psi + interp_periodic(disp, psi, g)


def warp_image(img: np.ndarray, psi: np.ndarray, g: GridSpec) -> np.ndarray:
    """``img o psi``: bilinear periodic sample of ``img`` at ``psi(x_ij)``."""
    if img.shape[-2:] != g.shape or psi.shape[-3:] != g.shape + (2,):
        raise ValueError("image and map dimensions disagree")
    return interp_periodic(img, psi, g)


def sample_images(I0: np.ndarray, v0: np.ndarray, bank: NoiseBank, seeds: list[int], nsteps: int,
                  g: GridSpec, kernel: KernelParams, psi_scheme: str = "eulerian") -> list[tuple]:
    """Warp ``I0`` by independent stochastic flows, one per Wiener seed.

    Returns ``(image, status)`` per seed with status ``"ok"``, ``"folded"``
    (inverse map not a diffeomorphism) or ``"diverged"``; the image is None
    unless the status is ``"ok"``. Paths run as one batch, falling back to
    one at a time if the batch hits a numerical failure.
    """
    p = len(bank)
    incs = np.stack([WienerPath(s, nsteps, p).increments for s in seeds], axis=1)
    run = lambda inc: integrate_flow(v0, bank, inc, nsteps, g, kernel, warn_fold=False,
                                     track_forward=False, psi_scheme=psi_scheme).final.psi
    try:
        psis = list(run(incs))
    except NumericalFailure:
        psis = []
        for j in range(len(seeds)):
            try:
                psis.append(run(incs[:, j]))
            except NumericalFailure:
                psis.append(None)
    out = []
    for psi in psis:
        if psi is None:
            out.append((None, "diverged"))
        elif fold_fraction(psi, g) > 0:
            out.append((None, "folded"))
        else:
            out.append((warp_image(I0, psi, g), "ok"))
    return out


def gbm_heun(x0: float, mu: float, sigma: float, dW: np.ndarray, dt: float) -> np.ndarray:
    """Stratonovich Heun for ``dX = mu X dt + sigma X o dW`` (convergence check helper)."""
    x = np.full(dW.shape[1:], x0, dtype=float)
    for inc in dW:
        xp = x + mu * x * dt + sigma * x * inc
        x = x + 0.5 * mu * (x + xp) * dt + 0.5 * sigma * (x + xp) * inc
    return x
