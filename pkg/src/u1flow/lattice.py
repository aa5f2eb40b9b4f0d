"""Geometry, Wilson action and observables for 2D U(1) on a periodic lattice.

Link angles are stored direction-major as ``angles[mu, nx, ny]`` with
``mu = 0`` the x-direction and ``mu = 1`` the y-direction. Every function
below also accepts arrays with extra leading (batch) axes, ``[..., 2, Lx, Ly]``.

The plaquette anchored at site ``n`` is

    x_P(n) = x_0(n) + x_1(n + x) - x_0(n + y) - x_1(n)

and the action is ``S = beta * sum_P (1 - cos x_P)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

TWO_PI = 2.0 * math.pi


class LatticeDomainError(ValueError):
    """Raised for inputs outside an operation's domain."""


class TopologicalChargeError(ArithmeticError):
    """Raised when the winding sum is not close to an integer."""


@dataclass(frozen=True)
class LatticeGeometry:
    lx: int
    ly: int

    def __post_init__(self):
        if int(self.lx) != self.lx or int(self.ly) != self.ly:
            raise LatticeDomainError(f"lattice extents must be integers, got {self.lx}x{self.ly}")
        if self.lx < 2 or self.ly < 2:
            raise LatticeDomainError(f"lattice extents must be >= 2, got {self.lx}x{self.ly}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, self.lx, self.ly)

    @property
    def n_links(self) -> int:
        return 2 * self.lx * self.ly

    @property
    def n_plaquettes(self) -> int:
        return self.lx * self.ly

    @classmethod
    def of(cls, angles: np.ndarray) -> "LatticeGeometry":
        return cls(int(angles.shape[-2]), int(angles.shape[-1]))


@dataclass(frozen=True)
class Coupling:
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise LatticeDomainError(f"beta must be a positive finite number, got {self.beta}")


def _beta(coupling) -> float:
    return coupling.beta if isinstance(coupling, Coupling) else float(coupling)


def wrap_angle(theta):
    """Map angles onto (-pi, pi].

    Works elementwise on scalars and arrays; non-finite input raises
    :class:`LatticeDomainError`.
    """
    arr = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise LatticeDomainError("wrap_angle: non-finite angle")
    out = np.pi - np.mod(np.pi - arr, TWO_PI)
    # mod can return exactly 2*pi after rounding for tiny negative arguments
    out = np.where(out <= -np.pi, out + TWO_PI, out)
    if np.ndim(theta) == 0:
        return float(out)
    return out


def canonicalize(angles: np.ndarray) -> np.ndarray:
    """Return a copy of the configuration with every angle in (-pi, pi]."""
    return wrap_angle(np.asarray(angles, dtype=np.float64))


def check_config(angles, geom: LatticeGeometry | None = None) -> np.ndarray:
    """Validate a link-angle array and return it as float64."""
    arr = np.asarray(angles, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-3] != 2:
        raise LatticeDomainError(f"expected link angles of shape [..., 2, Lx, Ly], got {arr.shape}")
    if arr.shape[-1] < 2 or arr.shape[-2] < 2:
        raise LatticeDomainError(f"lattice extents must be >= 2, got {arr.shape[-2:]}")
    if geom is not None and arr.shape[-2:] != (geom.lx, geom.ly):
        raise LatticeDomainError(
            f"config is {arr.shape[-2]}x{arr.shape[-1]}, geometry is {geom.lx}x{geom.ly}"
        )
    if not np.all(np.isfinite(arr)):
        raise LatticeDomainError("config contains non-finite angles")
    return arr


def cold_config(geom: LatticeGeometry) -> np.ndarray:
    return np.zeros(geom.shape)


def random_config(geom: LatticeGeometry, seed) -> np.ndarray:
    """Uniform i.i.d. angles in (-pi, pi] (Haar measure), deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # uniform() draws from [-pi, pi); flip to the half-open convention
    return -rng.uniform(-np.pi, np.pi, size=geom.shape)


def _fwd(a: np.ndarray, axis: int) -> np.ndarray:
    # a[n + 1] along axis (same values as np.roll(a, -1, axis), cheaper)
    if axis == -2:
        return np.concatenate((a[..., 1:, :], a[..., :1, :]), axis=-2)
    return np.concatenate((a[..., 1:], a[..., :1]), axis=-1)


def _bwd(a: np.ndarray, axis: int) -> np.ndarray:
    # a[n - 1] along axis
    if axis == -2:
        return np.concatenate((a[..., -1:, :], a[..., :-1, :]), axis=-2)
    return np.concatenate((a[..., -1:], a[..., :-1]), axis=-1)


def plaquette_field(angles: np.ndarray) -> np.ndarray:
    """Unwrapped plaquette angles, shape ``[..., Lx, Ly]``."""
    x0 = angles[..., 0, :, :]
    x1 = angles[..., 1, :, :]
    return x0 + _fwd(x1, -2) - _fwd(x0, -1) - x1


def plaquette_vjp(g: np.ndarray) -> np.ndarray:
    """Pull a plaquette-shaped cotangent back onto the links.

    This is the transpose of :func:`plaquette_field`; each link receives
    ``+g`` from the plaquette it enters positively and ``-g`` from the other.
    """
    out = np.empty(g.shape[:-2] + (2,) + g.shape[-2:])
    out[..., 0, :, :] = g - _bwd(g, -1)
    out[..., 1, :, :] = _bwd(g, -2) - g
    return out


def wilson_action(angles: np.ndarray, coupling) -> np.ndarray | float:
    beta = _beta(coupling)
    xp = plaquette_field(angles)
    s = beta * np.sum(1.0 - np.cos(xp), axis=(-2, -1))
    return float(s) if np.ndim(s) == 0 else s


def action_gradient(angles: np.ndarray, coupling) -> np.ndarray:
    """Analytic dS/dx for every link."""
    beta = _beta(coupling)
    return plaquette_vjp(np.sin(plaquette_field(angles)) * beta)


def average_plaquette(angles: np.ndarray):
    xp = plaquette_field(angles)
    out = np.mean(np.cos(xp), axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def topological_charge(angles: np.ndarray, tol: float = 1e-6):
    """Integer winding number ``(1/2pi) sum_P arg(x_P)``.

    Raises :class:`TopologicalChargeError` if the raw sum is farther than
    ``tol`` from an integer, which can only happen through a bug or
    non-finite input.
    """
    xp = plaquette_field(np.asarray(angles, dtype=np.float64))
    raw = np.sum(wrap_angle(xp), axis=(-2, -1)) / TWO_PI
    q = np.rint(raw)
    if np.any(np.abs(raw - q) > tol):
        worst = float(np.max(np.abs(raw - q)))
        raise TopologicalChargeError(f"winding sum deviates from an integer by {worst:.3e}")
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.int64)


def gauge_transform(angles: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Apply the site rotation ``x_mu(n) -> x_mu(n) + phi(n) - phi(n + mu)``."""
    out = np.array(angles, dtype=np.float64, copy=True)
    out[..., 0, :, :] += phases - np.roll(phases, -1, axis=-2)
    out[..., 1, :, :] += phases - np.roll(phases, -1, axis=-1)
    return out


def instanton_config(geom: LatticeGeometry, q: int) -> np.ndarray:
    """Uniform-flux configuration carrying topological charge ``q``.

    Every plaquette holds flux ``2 pi q / V``; the compensating twist sits on
    the x-links of the last column.
    """
    q = int(q)
    vol = geom.lx * geom.ly
    if 2 * abs(q) >= vol:
        raise LatticeDomainError(f"|q|={abs(q)} too large for a {geom.lx}x{geom.ly} lattice")
    cfg = np.zeros(geom.shape)
    nx = np.arange(geom.lx)[:, None]
    ny = np.arange(geom.ly)[None, :]
    cfg[1] = TWO_PI * q * nx / vol + 0.0 * ny
    cfg[0, geom.lx - 1, :] = -TWO_PI * q * np.arange(geom.ly) / geom.ly
    return cfg


def exact_average_plaquette(coupling, geom: LatticeGeometry, rtol: float = 1e-16,
                            max_terms: int = 10_000) -> float:
    """Exact <cos x_P> on the periodic torus from the character expansion.

    ``Z = sum_n I_n(beta)^V`` and ``<cos x_P> = sum_n I_n^(V-1) (I_(n-1) + I_(n+1)) / 2 / Z``
    with ``V`` the number of plaquettes. Terms are summed in log space
    relative to ``n = 0`` until they drop below ``rtol``.
    """
    beta = _beta(coupling)
    if not beta > 0:
        raise LatticeDomainError("beta must be positive")
    vol = geom.n_plaquettes
    log_i0 = math.log(special.ive(0, beta))

    def log_ratio(n):
        val = special.ive(abs(n), beta)
        return -math.inf if val == 0.0 else math.log(val) - log_i0

    num = 0.0
    den = 0.0
    for n in range(max_terms):
        term_max = 0.0
        for k in ((0,) if n == 0 else (n, -n)):
            lr = log_ratio(k)
            if lr == -math.inf:
                continue
            z_term = math.exp(vol * lr)
            base = (vol - 1) * lr
            den += z_term
            num += 0.5 * (math.exp(base + log_ratio(k - 1)) + math.exp(base + log_ratio(k + 1)))
            term_max = max(term_max, z_term)
        if n > 0 and term_max <= rtol * den:
            return num / den
    raise ArithmeticError(f"character expansion did not converge in {max_terms} terms")
