"""Closed moment equations for the inverse flow and the velocity, and the moment images.

The state is the triple (mean velocity spectrum, mean inverse map, per-component
variance of the inverse map). Every right-hand side is a deterministic function
of that triple: means of products are replaced by products of means.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import NoiseBank, NumericalFailure, central_diff, map_jacobian, warp_image
from .fourier import GridSpec, KernelParams, apply_K, apply_L, coadjoint, convective, to_spatial


@dataclass
class MomentState:
    mean_v: np.ndarray
    mean_psi: np.ndarray
    var_psi: np.ndarray

    @classmethod
    def initial(cls, v0: np.ndarray, g: GridSpec) -> "MomentState":
        return cls(np.array(v0, dtype=complex), g.identity.copy(), np.zeros(g.shape + (2,)))


@dataclass
class MomentImages:
    mean_image: np.ndarray
    var_image: np.ndarray


@dataclass
class MomentSolution:
    final: MomentState
    times: list[float] = field(default_factory=list)
    states: list[MomentState] = field(default_factory=list)


def mean_v_rhs(mean_v: np.ndarray, bank: NoiseBank, g: GridSpec, kernel: KernelParams,
               correction: str = "ito") -> np.ndarray:
    """Drift of the mean velocity spectrum including the noise-induced correction.

    With ``X_kc = K ad*_{s_k e_c} <m>`` for each field ``k`` and axis ``c`` the
    Stratonovich-to-Ito term is ``1/2 sum_kc K ad*_{s_k e_c} L X_kc``
    (``correction="ito"``, the exact drift of the linear diffusion) or
    ``1/2 sum_kc (D X_kc) X_kc`` (``"spatial"``).
    """
    if not mean_v.any():
        return np.zeros_like(mean_v, dtype=complex)
    m = apply_L(mean_v, g, kernel)
    out = -apply_K(coadjoint(mean_v, m, g), g, kernel)
    if bank.active:
        cols = bank.spectral.reshape((-1,) + mean_v.shape)
        X = apply_K(coadjoint(cols, m[None], g), g, kernel)
        if correction == "ito":
            corr = apply_K(coadjoint(cols, apply_L(X, g, kernel), g), g, kernel)
        elif correction == "spatial":
            corr = convective(X, X, g)
        else:
            raise ValueError(f"unknown correction {correction!r}")
        out = out + 0.5 * corr.sum(axis=0)
    return out


def _psi_rhs(J, mean_v_spatial, bank, g, correction):
    out = np.zeros(J.shape[:-1])
    if mean_v_spatial is not None:
        out -= (J * mean_v_spatial[..., None, :]).sum(axis=-1)
    if bank.active:
        # D<psi> (s_k e_c) = s_k u_c with u_c = d_c <psi> the c-th column of
        # D<psi>; sum_k w_kc,b * d_b(s_k u_c) expanded through the central
        # stencil, so the per-field sums reduce to the bank's shifted products.
        # The exact drift has w_kc = e_c, the spatial form w_kc = u_c.
        if correction not in ("ito", "spatial"):
            raise ValueError(f"unknown correction {correction!r}")
        P = bank.shifted_power
        corr = np.zeros_like(out)
        for c in range(2):
            u = J[..., c]
            for b in ((c,) if correction == "ito" else (0, 1)):
                fwd = P[b, 0][..., None] * np.roll(u, -1, axis=b)
                bwd = P[b, 1][..., None] * np.roll(u, 1, axis=b)
                term = (fwd - bwd) * (0.5 * g.shape[b])
                corr += term if correction == "ito" else u[..., b:b + 1] * term
        out += 0.5 * corr
    return out


def mean_psi_rhs(mean_psi: np.ndarray, mean_v_spatial: np.ndarray | None, bank: NoiseBank,
                 g: GridSpec, correction: str = "ito") -> np.ndarray:
    """``-D<psi> <v> + 1/2 sum_kc D[D<psi> s_k e_c] w_kc`` per pixel.

    ``w_kc = s_k e_c`` for ``correction="ito"`` (exact for the lattice SDE,
    whose diffusion is linear in psi) and ``w_kc = D<psi> s_k e_c`` for
    ``"spatial"``; the two agree wherever ``D<psi> = Id``.
    """
    if mean_psi.shape != g.shape + (2,):
        raise ValueError(f"mean map has shape {mean_psi.shape}, expected {g.shape + (2,)}")
    return _psi_rhs(map_jacobian(mean_psi, g), mean_v_spatial, bank, g, correction)


def var_psi_rhs(mean_psi: np.ndarray, bank: NoiseBank, g: GridSpec) -> np.ndarray:
    """Diagonal of ``C = sum_kc b_kc b_kc^T`` with ``b_kc = D<psi> s_k e_c``, per pixel and component."""
    if not bank.active:
        return np.zeros_like(mean_psi)
    return bank.power[..., None] * np.sum(map_jacobian(mean_psi, g) ** 2, axis=-1)


def _rhs(state: MomentState, bank: NoiseBank, g: GridSpec, kernel: KernelParams, correction: str):
    if state.mean_psi.shape != g.shape + (2,):
        raise ValueError(f"mean map has shape {state.mean_psi.shape}, expected {g.shape + (2,)}")
    v_sp = to_spatial(state.mean_v, g, check=False) if state.mean_v.any() else None
    J = map_jacobian(state.mean_psi, g)
    var_rate = bank.power[..., None] * np.sum(J**2, axis=-1) if bank.active else np.zeros_like(state.mean_psi)
    return (
        mean_v_rhs(state.mean_v, bank, g, kernel, correction),
        _psi_rhs(J, v_sp, bank, g, correction),
        var_rate,
    )


def _axpy(state: MomentState, h: float, k) -> MomentState:
    return MomentState(state.mean_v + h * k[0], state.mean_psi + h * k[1], state.var_psi + h * k[2])


def moment_rk4_step(state: MomentState, dt: float, bank: NoiseBank, g: GridSpec,
                    kernel: KernelParams, correction: str = "ito") -> MomentState:
    k1 = _rhs(state, bank, g, kernel, correction)
    k2 = _rhs(_axpy(state, 0.5 * dt, k1), bank, g, kernel, correction)
    k3 = _rhs(_axpy(state, 0.5 * dt, k2), bank, g, kernel, correction)
    k4 = _rhs(_axpy(state, dt, k3), bank, g, kernel, correction)
    incr = [(a + 2 * b + 2 * c + d) / 6 for a, b, c, d in zip(k1, k2, k3, k4)]
    new = _axpy(state, dt, incr)
    np.maximum(new.var_psi, 0.0, out=new.var_psi)
    return new


def evolve_moments(v0: np.ndarray, bank: NoiseBank, nsteps: int, g: GridSpec, kernel: KernelParams,
                   keep: str | list[int] = "final", correction: str = "ito") -> MomentSolution:
    """RK4 co-integration of the moment system over t in [0, 1]."""
    if nsteps < 1:
        raise ValueError("nsteps must be >= 1")
    if bank.grid != g:
        raise ValueError("noise bank was sampled on a different grid")
    dt = 1.0 / nsteps
    state = MomentState.initial(v0, g)
    wanted = {nsteps} if keep == "final" else set(range(nsteps + 1)) if keep == "all" else set(keep)
    sol = MomentSolution(state)
    if 0 in wanted:
        sol.times.append(0.0)
        sol.states.append(state)
    for n in range(nsteps):
        state = moment_rk4_step(state, dt, bank, g, kernel, correction)
        if not (np.all(np.isfinite(state.mean_psi)) and np.all(np.isfinite(state.var_psi))
                and np.all(np.isfinite(state.mean_v))):
            raise NumericalFailure(f"moment equations diverged at step {n + 1}")
        if n + 1 in wanted:
            sol.times.append((n + 1) * dt)
            sol.states.append(state)
    sol.final = state
    return sol


def image_gradient(img: np.ndarray, g: GridSpec) -> np.ndarray:
    """Periodic central-difference gradient of a scalar image, shape (nx, ny, 2)."""
    return central_diff(img[..., None], g)[..., 0, :]


def moment_images(I0: np.ndarray, state: MomentState, g: GridSpec) -> MomentImages:
    """Mean image ``I0 o <psi>`` and the first-order Taylor variance image."""
    mean_image = warp_image(I0, state.mean_psi, g)
    grad = image_gradient(mean_image, g)
    var_image = np.sum(grad**2 * state.var_psi, axis=-1)
    return MomentImages(mean_image, var_image)
