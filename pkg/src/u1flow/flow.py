"""Normalizing flows on U(1) link configurations.

Two kinds of coupling layer live here:

* :class:`AffineCouplingLayer`, the real-valued template
  ``x1 -> exp(s(x2)) * x1 + t(x2)`` used for R^n checks;
* :class:`PlaquetteCouplingLayer`, a gauge-equivariant layer that transforms
  a subset of plaquette angles with a circle diffeomorphism and realizes the
  change on one link per active plaquette.

Plaquette layers use a 4-colour tiling of period 2. For colour ``c`` with
``(cx, cy) = (c % 2, c // 2)`` the active sites are ``n_x = cx, n_y = cy
(mod 2)``. For an x-link layer the active link ``x_0(n)`` enters ``P(n)``
with sign +1, ``P(n - y)`` is passive, and every plaquette in a column with
``n_x != cx (mod 2)`` is frozen. y-link layers are the transpose, with the
active link entering ``P(n)`` with sign -1. Lattice extents must be even.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import lattice
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)
MASK_PATTERN = "checker4"
MASK_PERIOD = 2


class FlowGeometryError(ValueError):
    pass


class MaskError(ValueError):
    pass


# ------------------------------------------------------------ affine template

def affine_forward(x1, x2, s_net: Callable, t_net: Callable):
    """``(x1, x2) -> (exp(s(x2)) x1 + t(x2), x2)``; returns ``(x1', log J)``."""
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    s, t = ad.as_tensor(s_net(x2)), ad.as_tensor(t_net(x2))
    if s.shape[-x1.ndim:] != x1.shape[-x1.ndim:] or t.shape != s.shape:
        raise ad.ShapeError(f"s/t shapes {s.shape}, {t.shape} do not match active part {x1.shape}")
    return ad.exp(s) * x1 + t, ad.tsum(s, axis=-1)


def affine_inverse(y1, x2, s_net: Callable, t_net: Callable):
    """Inverse of :func:`affine_forward`; the log-Jacobian is ``-sum s``."""
    y1, x2 = ad.as_tensor(y1), ad.as_tensor(x2)
    s, t = ad.as_tensor(s_net(x2)), ad.as_tensor(t_net(x2))
    return (y1 - t) * ad.exp(-s), -ad.tsum(s, axis=-1)


class AffineCouplingLayer:
    """Affine coupling on R^n with a fixed boolean mask (True = active)."""

    def __init__(self, mask, s_net: Callable, t_net: Callable):
        self.mask = np.asarray(mask, dtype=bool)
        self.active = np.flatnonzero(self.mask)
        self.frozen = np.flatnonzero(~self.mask)
        self.s_net = s_net
        self.t_net = t_net

    def _assemble(self, x, new_active):
        # scatter the active part back through a fixed selection matrix to stay on the tape
        select = np.zeros((len(self.active), self.mask.size))
        select[np.arange(len(self.active)), self.active] = 1.0
        scattered = ad.tsum(ad.reshape(new_active, new_active.shape + (1,)) * select, axis=-2)
        return x * (~self.mask).astype(float) + scattered

    def forward(self, x):
        x = ad.as_tensor(x)
        x1 = ad.getitem(x, (..., self.active))
        x2 = ad.getitem(x, (..., self.frozen))
        y1, logj = affine_forward(x1, x2, self.s_net, self.t_net)
        return self._assemble(x, y1), logj

    def inverse(self, y):
        y = ad.as_tensor(y)
        y1 = ad.getitem(y, (..., self.active))
        x2 = ad.getitem(y, (..., self.frozen))
        x1, logj = affine_inverse(y1, x2, self.s_net, self.t_net)
        return self._assemble(y, x1), logj


# ----------------------------------------------------------------- circle map

def _circle_shift(theta, s):
    """``2 arctan(e^s tan(theta/2)) - theta`` as one op.

    Written as ``2 arctan(expm1(s) u / (1 + e^s u^2))`` with ``u = tan(theta/2)``
    (tan(A) - tan(B) identity), so s = 0 gives exactly zero shift and exactly
    zero theta-derivative.
    """
    theta, s = ad.as_tensor(theta), ad.as_tensor(s)
    th = np.asarray(lattice.wrap_angle(theta.data))
    sv = np.broadcast_to(s.data, th.shape) if s.shape != th.shape else s.data
    u = np.tan(0.5 * th)
    es = np.exp(sv)
    out = 2.0 * np.arctan(np.expm1(sv) * u / (1.0 + es * u * u))

    def vjp(g):
        e2 = np.expm1(2.0 * sv)
        sin_half = np.sin(0.5 * th)
        sq = sin_half * sin_half
        den = 1.0 + e2 * sq
        d_theta = (np.expm1(sv) - e2 * sq) / den
        d_s = es * np.sin(th) / den
        return (ad._unbroadcast(g * d_theta, theta.shape), ad._unbroadcast(g * d_s, s.shape))

    return ad.primitive(out, (theta, s), vjp, "circle_shift")


def _circle_logj(theta, s):
    """``log d/dtheta [2 arctan(e^s tan(theta/2))] = s - log1p(expm1(2s) sin^2(theta/2))``."""
    theta, s = ad.as_tensor(theta), ad.as_tensor(s)
    th = np.asarray(lattice.wrap_angle(theta.data))
    sv = np.broadcast_to(s.data, th.shape) if s.shape != th.shape else s.data
    e2 = np.expm1(2.0 * sv)
    sin_half = np.sin(0.5 * th)
    sq = sin_half * sin_half
    den = 1.0 + e2 * sq
    out = sv - np.log1p(e2 * sq)

    def vjp(g):
        d_theta = -0.5 * e2 * np.sin(th) / den
        d_s = 1.0 - 2.0 * (e2 + 1.0) * sq / den
        return (ad._unbroadcast(g * d_theta, theta.shape), ad._unbroadcast(g * d_s, s.shape))

    return ad.primitive(out, (theta, s), vjp, "circle_logj")


def circle_map_forward(theta, s, t):
    """Circle diffeomorphism ``theta -> 2 arctan(e^s tan(theta/2)) + t``.

    Returns ``(delta, logj)`` with ``delta = theta' - theta`` left unwrapped,
    so ``theta + delta`` is the image. Works on floats or Tensors; theta = pi
    maps to pi + t through the same formula (tan stays finite in float64).
    """
    to_float = not any(isinstance(a, Tensor) for a in (theta, s, t))
    theta, s, t = ad.as_tensor(theta), ad.as_tensor(s), ad.as_tensor(t)
    delta = _circle_shift(theta, s) + t
    logj = _circle_logj(theta, s)
    if to_float and delta.ndim == 0:
        return delta.item(), logj.item()
    return delta, logj


def circle_map_inverse(theta_new, s, t):
    """Inverse of :func:`circle_map_forward`; returns ``(delta, logj)`` of the inverse."""
    to_float = not any(isinstance(a, Tensor) for a in (theta_new, s, t))
    theta_new, s, t = ad.as_tensor(theta_new), ad.as_tensor(s), ad.as_tensor(t)
    phi = theta_new - t
    neg_s = -s
    delta = _circle_shift(phi, neg_s) - t
    logj = _circle_logj(phi, neg_s)
    if to_float and delta.ndim == 0:
        return delta.item(), logj.item()
    return delta, logj


def circle_map(theta: float, s: float, t: float) -> tuple[float, float]:
    """Wrapped image angle and log-derivative of the circle map."""
    delta, logj = circle_map_forward(float(theta), float(s), float(t))
    return lattice.wrap_angle(theta + delta), logj


# ------------------------------------------------------------- gauge layers

@dataclass(frozen=True)
class LayerMasks:
    active: np.ndarray   # [Lx, Ly] plaquettes updated by the layer
    passive: np.ndarray  # [Lx, Ly] plaquettes changed as a side effect
    frozen: np.ndarray   # [Lx, Ly] plaquettes fed to the network
    sign: float          # orientation of the active link inside its active plaquette
    link_update: np.ndarray  # [2, 1, 1] scatter of the plaquette delta onto links


def make_masks(mu: int, color: int, lx: int, ly: int) -> LayerMasks:
    if lx % MASK_PERIOD or ly % MASK_PERIOD:
        raise FlowGeometryError(f"lattice {lx}x{ly} is not a multiple of the mask period {MASK_PERIOD}")
    cx, cy = color % 2, color // 2
    nx = np.arange(lx)[:, None] % 2
    ny = np.arange(ly)[None, :] % 2
    active = (nx == cx) & (ny == cy)
    if mu == 0:
        passive = np.roll(active, -1, axis=1)
        frozen = np.broadcast_to(nx != cx, (lx, ly)).copy()
        sign = 1.0
    else:
        passive = np.roll(active, -1, axis=0)
        frozen = np.broadcast_to(ny != cy, (lx, ly)).copy()
        sign = -1.0
    update = np.zeros((2, 1, 1))
    update[mu] = sign
    masks = LayerMasks(active.astype(float), passive.astype(float), frozen.astype(float), sign, update)
    _check_masks(masks, mu)
    return masks


def _check_masks(m: LayerMasks, mu: int) -> None:
    a, p, f = m.active > 0, m.passive > 0, m.frozen > 0
    if (a & p).any() or (a & f).any() or (p & f).any():
        raise MaskError("active/passive/frozen plaquette sets overlap")
    # the frozen plaquettes must not contain any updated link
    links = np.zeros((2,) + a.shape)
    links[mu] = np.where(a, 1.0, 0.0)
    touched = np.abs(lattice.plaquette_field(links)) + np.abs(lattice.plaquette_field(-links))
    if (touched[f] != 0).any():
        raise MaskError("a frozen plaquette contains an active link")
    if ((touched > 0) != (a | p)).any():
        raise MaskError("active links do not touch exactly the active and passive plaquettes")


def _init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, scale: float | None):
    if scale == 0.0:
        return np.zeros((c_out, c_in, k, k)), np.zeros(c_out)
    bound = 1.0 / math.sqrt(c_in * k * k) if scale is None else scale
    return rng.uniform(-bound, bound, (c_out, c_in, k, k)), rng.uniform(-bound, bound, c_out)


class PlaquetteCouplingLayer:
    """Gauge-equivariant coupling on the plaquettes of one colour and direction.

    ``s`` and ``t`` come from a periodic conv net applied to ``(cos, sin)`` of
    the frozen plaquettes; tanh between convolutions, linear output layer
    with two channels (``s``, ``t``).
    """

    def __init__(self, mu: int, color: int, params: ad.ParamStore, prefix: str,
                 hidden: tuple[int, ...], kernel_size: int):
        if mu not in (0, 1) or not 0 <= color < 4:
            raise MaskError(f"invalid layer labels mu={mu}, color={color}")
        self.mu = mu
        self.color = color
        self.params = params
        self.prefix = prefix
        self.hidden = tuple(hidden)
        self.kernel_size = kernel_size
        self._masks: dict[tuple[int, int], LayerMasks] = {}

    @property
    def conv_names(self) -> list[tuple[str, str]]:
        n = len(self.hidden) + 1
        return [(f"{self.prefix}.conv{i}.weight", f"{self.prefix}.conv{i}.bias") for i in range(n)]

    def init_params(self, rng: np.random.Generator, final_scale: float = 0.0) -> None:
        chans = (2,) + self.hidden + (2,)
        names = self.conv_names
        for i, (wname, bname) in enumerate(names):
            last = i == len(names) - 1
            w, b = _init_conv(rng, chans[i + 1], chans[i], self.kernel_size, final_scale if last else None)
            self.params.add(wname, w)
            self.params.add(bname, b)

    def masks(self, lx: int, ly: int) -> LayerMasks:
        key = (lx, ly)
        if key not in self._masks:
            self._masks[key] = make_masks(self.mu, self.color, lx, ly)
        return self._masks[key]

    def st(self, xp: Tensor, m: LayerMasks) -> tuple[Tensor, Tensor]:
        # channels-last through the net: [..., Lx, Ly, C]
        h = ad.stack([ad.cos(xp) * m.frozen, ad.sin(xp) * m.frozen], axis=-1)
        names = self.conv_names
        for i, (wname, bname) in enumerate(names):
            h = ad.conv2d_periodic_last(h, self.params[wname], self.params[bname])
            if i < len(names) - 1:
                h = ad.tanh(h)
        s = ad.getitem(h, (..., 0)) * m.active
        t = ad.getitem(h, (..., 1)) * m.active
        return s, t

    def _apply(self, links, inverse: bool):
        links = ad.as_tensor(links)
        m = self.masks(links.shape[-2], links.shape[-1])
        xp = ad.plaquettes(links)
        s, t = self.st(xp, m)
        step = circle_map_inverse if inverse else circle_map_forward
        delta, logj = step(xp, s, t)
        delta = delta * m.active
        shift = ad.reshape(delta, delta.shape[:-2] + (1,) + delta.shape[-2:]) * m.link_update
        new_links = links + shift
        return new_links, ad.tsum(logj * m.active, axis=(-2, -1))

    def forward(self, links):
        return self._apply(links, inverse=False)

    def inverse(self, links):
        return self._apply(links, inverse=True)


def gauge_layer_forward(cfg, layer: PlaquetteCouplingLayer):
    return layer.forward(cfg)


def gauge_layer_inverse(cfg, layer: PlaquetteCouplingLayer):
    return layer.inverse(cfg)


# ----------------------------------------------------------------- the model

@dataclass(frozen=True)
class Architecture:
    n_layers: int = 8
    hidden: tuple[int, ...] = (16, 16)
    kernel_size: int = 3
    mask_pattern: str = MASK_PATTERN

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.mask_pattern != MASK_PATTERN:
            raise ValueError(f"unknown mask pattern {self.mask_pattern!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(n_layers=int(d["n_layers"]), hidden=tuple(d["hidden"]),
                   kernel_size=int(d["kernel_size"]), mask_pattern=d["mask_pattern"])


def layer_labels(i: int) -> tuple[int, int]:
    """(mu, colour) of layer ``i``: directions alternate, colours advance every two layers."""
    return i % 2, (i // 2) % 4


@dataclass
class FlowModel:
    """Ordered stack of plaquette coupling layers sharing one parameter store."""

    arch: Architecture
    params: ad.ParamStore = field(default_factory=ad.ParamStore)
    layers: list = field(default_factory=list)

    @classmethod
    def build(cls, arch: Architecture | None = None, seed=0, final_scale: float = 0.0) -> "FlowModel":
        """Fresh model; ``final_scale=0`` zero-initializes the output convs (identity flow)."""
        arch = arch or Architecture()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        model = cls(arch)
        for i in range(arch.n_layers):
            mu, color = layer_labels(i)
            layer = PlaquetteCouplingLayer(mu, color, model.params, f"layer{i}", arch.hidden, arch.kernel_size)
            layer.init_params(rng, final_scale)
            model.layers.append(layer)
        model._check_coverage()
        return model

    @classmethod
    def from_params(cls, arch: Architecture, values: dict[str, np.ndarray]) -> "FlowModel":
        model = cls(arch)
        for i in range(arch.n_layers):
            mu, color = layer_labels(i)
            layer = PlaquetteCouplingLayer(mu, color, model.params, f"layer{i}", arch.hidden, arch.kernel_size)
            for wname, bname in layer.conv_names:
                model.params.add(wname, values[wname])
                model.params.add(bname, values[bname])
            model.layers.append(layer)
        extra = set(values) - set(model.params.names())
        if extra:
            raise KeyError(f"unexpected parameters for this architecture: {sorted(extra)}")
        model._check_coverage()
        return model

    def _check_coverage(self) -> None:
        if not self.layers:
            return
        seen = {(layer.mu, layer.color) for layer in self.layers}
        if len(seen) < 8:
            warnings.warn(f"flow layers update only {len(seen)} of 8 link classes; "
                          "some links are never transformed", RuntimeWarning, stacklevel=3)

    def check_geometry(self, shape) -> None:
        if len(shape) < 3 or shape[-3] != 2:
            raise FlowGeometryError(f"expected links of shape [..., 2, Lx, Ly], got {tuple(shape)}")
        lx, ly = shape[-2], shape[-1]
        if lx % MASK_PERIOD or ly % MASK_PERIOD:
            raise FlowGeometryError(f"lattice {lx}x{ly} is not a multiple of the mask period {MASK_PERIOD}")

    def forward(self, z):
        """``x = f_k(...f_1(z))`` with the summed log-Jacobian (Tensor in, Tensor out)."""
        x = ad.as_tensor(z)
        self.check_geometry(x.shape)
        logj = ad.Tensor(np.zeros(x.shape[:-3]))
        for layer in self.layers:
            x, lj = layer.forward(x)
            logj = logj + lj
        return x, logj

    def inverse(self, x):
        z = ad.as_tensor(x)
        self.check_geometry(z.shape)
        logj = ad.Tensor(np.zeros(z.shape[:-3]))
        for layer in reversed(self.layers):
            z, lj = layer.inverse(z)
            logj = logj + lj
        return z, logj


def flow_forward(z, model: FlowModel):
    """Push latent links through the flow. numpy in, numpy out."""
    x, logj = model.forward(np.asarray(z, dtype=np.float64))
    return x.data, (logj.item() if logj.ndim == 0 else logj.data)


def flow_inverse(x, model: FlowModel):
    z, logj = model.inverse(np.asarray(x, dtype=np.float64))
    return z.data, (logj.item() if logj.ndim == 0 else logj.data)


def log_prior(shape) -> float:
    """Log density of the uniform per-link prior on (-pi, pi]."""
    n_links = int(np.prod(shape[-3:]))
    return -n_links * LOG_2PI


def model_log_q(x, model: FlowModel):
    """``log q(x) = log r(f^-1(x)) + log|det d f^-1 / dx|``."""
    x = np.asarray(x, dtype=np.float64)
    _, logj = flow_inverse(x, model)
    return log_prior(x.shape) + logj


def sample_prior(geom: lattice.LatticeGeometry, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform links on (-pi, pi]; shape ``[2, Lx, Ly]`` or ``[n, 2, Lx, Ly]``."""
    shape = geom.shape if n is None else (n,) + geom.shape
    return -rng.uniform(-np.pi, np.pi, size=shape)
