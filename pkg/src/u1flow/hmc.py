"""Hamiltonian Monte Carlo on link angles.

Draw order per trajectory is fixed: one standard-normal momentum array of
the configuration's shape, then exactly one uniform for the accept test.
Angles are never wrapped during integration; observables wrap internally.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import lattice

logger = logging.getLogger(__name__)


class IntegrationError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite force"):
        super().__init__(f"{msg} at leapfrog step {step}")
        self.step = step


class ChainAbortedError(RuntimeError):
    def __init__(self, traj: int, chain_id: int, cause: BaseException):
        super().__init__(f"chain {chain_id} aborted at trajectory {traj}: {cause!r}")
        self.traj = traj
        self.chain_id = chain_id


@dataclass(frozen=True)
class HmcParams:
    step_size: float = 0.1
    n_leapfrog: int = 10
    seed: int = 0
    n_traj: int = 1

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.n_leapfrog < 1 or self.n_traj < 1:
            raise ValueError("n_leapfrog and n_traj must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass
class TrajectoryResult:
    proposed: np.ndarray
    delta_h: float
    accepted: bool
    end_config: np.ndarray
    end_action: float


@dataclass
class ChainRecord:
    traj: int
    action: float
    avg_plaq: float
    charge: int
    dH: float
    accept: bool
    chain_id: int = 0


def sample_momentum(shape, rng: np.random.Generator) -> np.ndarray:
    if isinstance(shape, lattice.LatticeGeometry):
        shape = shape.shape
    return rng.standard_normal(shape)


def kinetic_energy(v: np.ndarray) -> float:
    return 0.5 * float(np.sum(v * v))


def leapfrog(x: np.ndarray, v: np.ndarray, step_size: float, n_steps: int,
             force: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Kick-drift-kick integration with the inner half kicks fused.

    ``force(x)`` must return dS/dx. Inputs are not modified.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    v = np.array(v, dtype=np.float64, copy=True)
    if n_steps == 0:
        return x, v
    half = 0.5 * step_size
    f = _checked(force(x), 0)
    v -= half * f
    for step in range(1, n_steps + 1):
        x += step_size * v
        f = _checked(force(x), step)
        v -= (step_size if step < n_steps else half) * f
    return x, v


def _checked(f: np.ndarray, step: int) -> np.ndarray:
    if not np.all(np.isfinite(f)):
        raise IntegrationError(step)
    return f


def metropolis_test(delta_h: float, rng: np.random.Generator) -> bool:
    """Accept with probability min(1, exp(-dH)); always consumes one uniform."""
    u = rng.random()
    if math.isnan(delta_h):
        warnings.warn("NaN energy violation; proposal rejected", RuntimeWarning, stacklevel=2)
        return False
    if delta_h <= 0.0:
        return True
    return u < math.exp(-delta_h)


def trajectory(x: np.ndarray, action_x: float, action: Callable, force: Callable,
               step_size: float, n_leapfrog: int, rng: np.random.Generator) -> TrajectoryResult:
    """One HMC update from ``x`` whose action ``action_x`` is already known."""
    v = sample_momentum(x.shape, rng)
    h0 = kinetic_energy(v) + action_x
    try:
        x_new, v_new = leapfrog(x, v, step_size, n_leapfrog, force)
        s_new = float(action(x_new))
        delta_h = kinetic_energy(v_new) + s_new - h0
    except IntegrationError as err:
        logger.warning("%s; treating as rejection", err)
        x_new, s_new, delta_h = x, action_x, math.inf
    if not math.isfinite(s_new):
        delta_h = math.inf
    accepted = metropolis_test(delta_h, rng)
    end = x_new if accepted else x
    return TrajectoryResult(x_new, delta_h, accepted, end, s_new if accepted else action_x)


def run_markov_chain(start: np.ndarray, action: Callable, force: Callable, params: HmcParams,
                     sink: Callable[[ChainRecord], None] | None,
                     measure: Callable[[np.ndarray], np.ndarray], coupling,
                     chain_id: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Generic HMC driver; ``measure`` maps the chain state to physical links."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    x = np.array(start, dtype=np.float64, copy=True)
    s_x = float(action(x))
    for i in range(params.n_traj):
        res = trajectory(x, s_x, action, force, params.step_size, params.n_leapfrog, rng)
        x, s_x = res.end_config, res.end_action
        if sink is None:
            continue
        phys = measure(x)
        rec = ChainRecord(
            traj=i,
            action=lattice.wilson_action(phys, coupling),
            avg_plaq=lattice.average_plaquette(phys),
            charge=lattice.topological_charge(phys),
            dH=res.delta_h,
            accept=res.accepted,
            chain_id=chain_id,
        )
        try:
            sink(rec)
        except Exception as err:
            raise ChainAbortedError(i, chain_id, err) from err
    return x


def run_chain(start: np.ndarray, coupling, params: HmcParams,
              sink: Callable[[ChainRecord], None] | None = None, chain_id: int = 0,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Plain HMC on the Wilson action; returns the final configuration."""
    start = lattice.check_config(start)
    beta = coupling.beta if isinstance(coupling, lattice.Coupling) else float(coupling)
    return run_markov_chain(
        start,
        action=lambda x: lattice.wilson_action(x, beta),
        force=lambda x: lattice.action_gradient(x, beta),
        params=params,
        sink=sink,
        measure=lambda x: x,
        coupling=beta,
        chain_id=chain_id,
        rng=rng,
    )


def chain_rngs(seed: int, n_chains: int) -> list[np.random.Generator]:
    """Independent generators for fanned-out chains; one chain reuses ``seed`` directly."""
    if n_chains == 1:
        return [np.random.default_rng(seed)]
    return [np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(n_chains)]
