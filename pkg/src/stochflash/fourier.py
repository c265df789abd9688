"""Band-limited Fourier representation of periodic 2D vector fields.

Fields live on the unit torus [0, 1)^2 sampled on an ``nx x ny`` lattice,
``x_i = i / nx`` and ``y_j = j / ny``. Spatial arrays have shape
``(..., nx, ny, 2)`` and spectral arrays ``(..., trunc, trunc, 2)``; any
leading axes are batch axes and are carried through every operator.

Spectral index ``i`` holds the signed frequency ``k = i - trunc // 2``. Only
``|k| <= (trunc - 1) // 2`` is retained on each axis, so for even ``trunc``
the first row and column are always zero and the retained block is
symmetric about the origin. Coefficients are normalised so a constant field
``c`` has DC coefficient ``c``.

Products of band-limited fields (the coadjoint action and the moment
correction term) are evaluated on an alias-free padded lattice of
``3K + 1`` points per axis, where ``K`` is the largest retained frequency,
and then re-truncated. The result is exactly the truncated convolution of
the two spectra.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

HERMITIAN_TOL = 1e-10


class GridMismatchError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Symbol of the momentum operator ``L``: ``(gamma + alpha (2 pi)^2 |k h|^2)^power``.

    Frequencies are measured in cycles per pixel (``k h`` with ``h`` the
    lattice spacing), so ``alpha`` is in squared pixels as in FLASH.
    """

    alpha: float = 3.0
    gamma: float = 1.0
    power: int = 3

    def __post_init__(self):
        if not self.alpha > 0 or not self.gamma > 0:
            raise ValueError("alpha and gamma must be positive")
        if int(self.power) != self.power or self.power < 1:
            raise ValueError("power must be a positive integer")


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    trunc: int = 16

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.trunc < 2 or self.trunc > min(self.nx, self.ny):
            raise ValueError(f"trunc={self.trunc} must lie in [2, min(nx, ny)]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def kmax(self) -> int:
        return (self.trunc - 1) // 2

    @property
    def offset(self) -> int:
        return self.trunc // 2

    @cached_property
    def freqs(self) -> np.ndarray:
        """Signed frequency carried by each spectral index."""
        return np.arange(self.trunc) - self.offset

    @cached_property
    def band(self) -> np.ndarray:
        """Boolean (trunc, trunc) mask of retained frequencies."""
        keep = np.abs(self.freqs) <= self.kmax
        return keep[:, None] & keep[None, :]

    @cached_property
    def npad(self) -> int:
        return 3 * self.kmax + 1

    @cached_property
    def identity(self) -> np.ndarray:
        """Identity map sampled on the lattice, shape (nx, ny, 2)."""
        x = np.arange(self.nx) / self.nx
        y = np.arange(self.ny) / self.ny
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @cached_property
    def cd_symbols(self) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference derivative symbols ``i sin(2 pi k h) / h``, broadcastable to (trunc, trunc)."""
        k = self.freqs
        sx = 1j * np.sin(2 * np.pi * k * self.hx) / self.hx
        sy = 1j * np.sin(2 * np.pi * k * self.hy) / self.hy
        return sx[:, None] * self.band, sy[None, :] * self.band

    def momentum_symbol(self, kernel: KernelParams) -> np.ndarray:
        kx = self.freqs[:, None] * self.hx
        ky = self.freqs[None, :] * self.hy
        base = kernel.gamma + kernel.alpha * (2 * np.pi) ** 2 * (kx**2 + ky**2)
        return base ** int(kernel.power)

    def zeros(self, batch: tuple[int, ...] = ()) -> np.ndarray:
        return np.zeros(batch + (self.trunc, self.trunc, 2), dtype=complex)


def _check_spatial(f: np.ndarray, g: GridSpec):
    if f.shape[-3:] != (g.nx, g.ny, 2):
        raise GridMismatchError(f"field shape {f.shape} does not match grid {g.nx}x{g.ny}x2")


def _check_spectral(c: np.ndarray, g: GridSpec):
    if c.shape[-3:] != (g.trunc, g.trunc, 2):
        raise GridMismatchError(f"spectrum shape {c.shape} does not match trunc={g.trunc}")


def _band_index(g: GridSpec, n: int) -> np.ndarray:
    return np.mod(g.freqs, n)


def _half_layout(g: GridSpec, n1: int, n2: int):
    """Gather indices mapping a real-FFT half spectrum of an ``n1 x n2`` lattice onto the band."""
    kx = g.freqs[:, None] * np.ones(g.trunc, dtype=int)[None, :]
    ky = np.ones(g.trunc, dtype=int)[:, None] * g.freqs[None, :]
    neg = ky < 0
    rows = np.where(neg, np.mod(-kx, n1), np.mod(kx, n1))
    cols = np.where(neg, -ky, ky)
    return rows, cols, neg


def _from_half(F: np.ndarray, g: GridSpec, n1: int, n2: int) -> np.ndarray:
    rows, cols, neg = _half_layout(g, n1, n2)
    G = F[..., rows, cols, :]
    G = np.where(neg[:, :, None], np.conj(G), G)
    return G * g.band[:, :, None]


def _to_half(c: np.ndarray, g: GridSpec, n1: int, n2: int) -> np.ndarray:
    K, o = g.kmax, g.offset
    H = np.zeros(c.shape[:-3] + (n1, n2 // 2 + 1, c.shape[-1]), dtype=complex)
    rows = np.mod(np.arange(-K, K + 1), n1)
    H[..., rows, : K + 1, :] = c[..., o - K:o + K + 1, o:o + K + 1, :]
    return H


def to_spectral(f: np.ndarray, g: GridSpec) -> np.ndarray:
    """Band-limited Fourier coefficients of a real spatial field."""
    f = np.asarray(f, dtype=float)
    _check_spatial(f, g)
    F = sfft.rfft2(f, axes=(-3, -2)) / (g.nx * g.ny)
    return _from_half(F, g, g.nx, g.ny)


def symmetrize(c: np.ndarray, g: GridSpec) -> np.ndarray:
    """Project onto Hermitian-symmetric spectra (removes round-off asymmetry)."""
    K, o = g.kmax, g.offset
    sl = slice(o - K, o + K + 1)
    out = np.zeros_like(c)
    blk = c[..., sl, sl, :]
    out[..., sl, sl, :] = 0.5 * (blk + np.conj(blk[..., ::-1, ::-1, :]))
    return out


def hermitian_defect(c: np.ndarray, g: GridSpec) -> float:
    K, o = g.kmax, g.offset
    sl = slice(o - K, o + K + 1)
    blk = c[..., sl, sl, :]
    outside = np.abs(c).sum() - np.abs(blk).sum()
    scale = max(np.abs(blk).max(initial=0.0), 1.0)
    return float(max(np.abs(blk - np.conj(blk[..., ::-1, ::-1, :])).max(initial=0.0), outside) / scale)


def to_spatial(c: np.ndarray, g: GridSpec, check: bool = True) -> np.ndarray:
    """Real spatial field on the full lattice from band-limited coefficients."""
    c = np.asarray(c)
    _check_spectral(c, g)
    if check:
        defect = hermitian_defect(c, g)
        if defect > HERMITIAN_TOL:
            raise SymmetryError(f"spectrum violates Hermitian symmetry (defect {defect:.3e})")
    H = _to_half(c, g, g.nx, g.ny)
    return sfft.irfft2(H, s=(g.nx, g.ny), axes=(-3, -2)) * (g.nx * g.ny)


def _to_padded(c: np.ndarray, g: GridSpec) -> np.ndarray:
    """Channel-first samples ``(..., C, n, n)`` on the alias-free padded lattice."""
    n, K, o = g.npad, g.kmax, g.offset
    C = c.shape[-1]
    H = np.zeros(c.shape[:-3] + (C, n, n // 2 + 1), dtype=complex)
    rows = np.mod(np.arange(-K, K + 1), n)
    H[..., rows, : K + 1] = np.moveaxis(c[..., o - K:o + K + 1, o:o + K + 1, :], -1, -3)
    return sfft.irfft2(H, s=(n, n), axes=(-2, -1), overwrite_x=True) * (n * n)


def _from_padded(f: np.ndarray, g: GridSpec) -> np.ndarray:
    """Inverse of :func:`_to_padded`: channel-first samples back to band coefficients."""
    n = g.npad
    F = sfft.rfft2(f, axes=(-2, -1)) / (n * n)
    rows, cols, neg = _half_layout(g, n, n)
    G = F[..., rows, cols]
    G = np.where(neg, np.conj(G), G) * g.band
    return np.moveaxis(G, -3, -1)


def apply_L(v: np.ndarray, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    return v * g.momentum_symbol(kernel)[:, :, None]


def apply_K(m: np.ndarray, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    return m / g.momentum_symbol(kernel)[:, :, None]


def spectral_jacobian(v: np.ndarray, g: GridSpec) -> np.ndarray:
    """Central-difference Jacobian; ``J[..., a, b]`` is the coefficient of ``d v_a / d x_b``."""
    _check_spectral(v, g)
    sx, sy = g.cd_symbols
    return np.stack([v * sx[:, :, None], v * sy[:, :, None]], axis=-1)


def coadjoint(v: np.ndarray, m: np.ndarray, g: GridSpec) -> np.ndarray:
    """Truncated ``ad*_v m = (Dv)^T m + div(m v^T)`` with central-difference derivatives.

    The divergence is applied after truncating the product ``m_a v_b``, which
    makes this the exact adjoint of the discrete bracket ``(Dv) w - (Dw) v``.
    In the continuum it equals ``(Dv)^T m + (Dm) v + m div v``.
    """
    _check_spectral(v, g)
    _check_spectral(m, g)
    v, m = np.broadcast_arrays(v, m)
    Jv = spectral_jacobian(v, g)
    batch = v.shape[:-3]
    stacked = np.concatenate([v, m, Jv.reshape(batch + (g.trunc, g.trunc, 4))], axis=-1)
    s = _to_padded(stacked, g)
    vs, ms = s[..., 0:2, :, :], s[..., 2:4, :, :]
    Dv = s[..., 4:8, :, :].reshape(batch + (2, 2) + s.shape[-2:])
    prods = np.concatenate(
        [(Dv * ms[..., :, None, :, :]).sum(axis=-4),
         (ms[..., :, None, :, :] * vs[..., None, :, :, :]).reshape(batch + (4,) + s.shape[-2:])],
        axis=-3,
    )
    c = _from_padded(prods, g)
    sx, sy = g.cd_symbols
    mv = c[..., 2:6].reshape(c.shape[:-1] + (2, 2))
    return c[..., 0:2] + mv[..., 0] * sx[:, :, None] + mv[..., 1] * sy[:, :, None]


def convective(u: np.ndarray, w: np.ndarray, g: GridSpec) -> np.ndarray:
    """Truncated ``(Du) w``: the central-difference Jacobian of ``u`` contracted against ``w``."""
    _check_spectral(u, g)
    _check_spectral(w, g)
    u, w = np.broadcast_arrays(u, w)
    Ju = spectral_jacobian(u, g)
    batch = u.shape[:-3]
    stacked = np.concatenate([w, Ju.reshape(batch + (g.trunc, g.trunc, 4))], axis=-1)
    s = _to_padded(stacked, g)
    ws = s[..., 0:2, :, :]
    Du = s[..., 2:6, :, :].reshape(batch + (2, 2) + s.shape[-2:])
    return _from_padded((Du * ws[..., None, :, :, :]).sum(axis=-3), g)


def energy(v: np.ndarray, g: GridSpec, kernel: KernelParams) -> np.ndarray:
    """Hamiltonian ``1/2 <m, v>`` summed over the band (per batch element)."""
    m = apply_L(v, g, kernel)
    return 0.5 * np.real(np.sum(np.conj(m) * v, axis=(-3, -2, -1)))


def random_bandlimited(g: GridSpec, rng: np.random.Generator, kmax: int | None = None,
                       batch: tuple[int, ...] = (), scale: float = 1.0) -> np.ndarray:
    """Random Hermitian spectrum supported on ``|k| <= kmax`` (defaults to the full band)."""
    kmax = g.kmax if kmax is None else min(kmax, g.kmax)
    c = rng.standard_normal(batch + (g.trunc, g.trunc, 2)) + 1j * rng.standard_normal(batch + (g.trunc, g.trunc, 2))
    keep = np.abs(g.freqs) <= kmax
    c = c * (keep[:, None] & keep[None, :])[:, :, None] * scale
    return symmetrize(c, g)
