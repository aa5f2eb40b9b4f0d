"""Reverse-KL training of the flow, Adam, checkpointing and volume transfer."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import flow, lattice
from .statistics import effective_sample_size

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, last_good: "Checkpoint"):
        super().__init__(f"non-finite loss at epoch {epoch}; last good checkpoint is epoch {last_good.epoch}")
        self.epoch = epoch
        self.last_good = last_good


class ArchitectureMismatchError(ValueError):
    def __init__(self, diff: dict):
        lines = ", ".join(f"{k}: {a!r} != {b!r}" for k, (a, b) in diff.items())
        super().__init__(f"architecture mismatch ({lines})")
        self.diff = diff


@dataclass
class TrainConfig:
    beta: float = 6.0
    lx: int = 8
    ly: int = 8
    batch_size: int = 64
    n_epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str | None = None
    eval_batch_size: int = 0   # > 0: measure ESS on an independent batch of this size
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        lattice.Coupling(self.beta)

    @property
    def geometry(self) -> lattice.LatticeGeometry:
        return lattice.LatticeGeometry(self.lx, self.ly)


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    ess: float
    mean_logq: float
    mean_action: float
    seconds: float
    clipped: bool = False


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Checkpoint:
    arch: flow.Architecture
    params: dict
    adam: AdamState
    epoch: int
    meta: dict = field(default_factory=dict)

    def model(self) -> flow.FlowModel:
        return flow.FlowModel.from_params(self.arch, self.params)


def reverse_kl_loss(z_batch: np.ndarray, model: flow.FlowModel, coupling):
    """Shifted reverse KL ``mean_i [log q(y_i) + S(y_i)]`` with ``y_i = f(z_i)``.

    Differs from D_KL(q||p) by the unknown ``log Z``. Returns the loss node and
    the per-sample ``log q`` and action arrays.
    """
    beta = coupling.beta if isinstance(coupling, lattice.Coupling) else float(coupling)
    z_batch = np.asarray(z_batch, dtype=np.float64)
    y, logj = model.forward(z_batch)
    action = ad.wilson_action(y, beta)
    if not np.all(np.isfinite(action.data)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(action.data)))[0])
        raise FloatingPointError(f"non-finite action for sample {bad}")
    log_q = flow.log_prior(z_batch.shape) - logj
    loss = ad.mean(log_q + action)
    return loss, np.atleast_1d(log_q.data).copy(), np.atleast_1d(action.data).copy()


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float, bool]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm, True
    return grads, norm, False


def optimizer_step(params: ad.ParamStore, grads: dict, state: AdamState, learning_rate: float) -> AdamState:
    """Adam with bias correction; updates ``params`` in place and returns the state."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ad.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {t.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _snapshot(model: flow.FlowModel, state: AdamState, epoch: int, rng: np.random.Generator,
              config: TrainConfig, eval_rng: np.random.Generator | None = None) -> Checkpoint:
    ckpt = Checkpoint(
        arch=model.arch,
        params={k: v.copy() for k, v in model.params.values().items()},
        adam=copy.deepcopy(state),
        epoch=epoch,
        meta={"rng_state": rng.bit_generator.state, "train_config": asdict(config),
              "beta": config.beta, "lx": config.lx, "ly": config.ly},
    )
    if eval_rng is not None:
        ckpt.meta["eval_rng_state"] = eval_rng.bit_generator.state
    return ckpt


def train(config: TrainConfig, model: flow.FlowModel, resume: Checkpoint | None = None,
          log_sink: Callable[[TrainLogRow], None] | None = None) -> tuple[Checkpoint, list[TrainLogRow]]:
    """Train ``model`` in place; returns the final checkpoint and the per-epoch log.

    Resuming from a checkpoint restores parameters, Adam moments and the
    generator state, so the continuation is bit-identical to an uninterrupted run.
    """
    from . import formats  # formats imports this module

    geom = config.geometry
    model.check_geometry(geom.shape)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    start = 0
    if resume is not None:
        if resume.arch != model.arch:
            raise ArchitectureMismatchError(architecture_diff(resume.arch, model.arch))
        model.params.set_values(resume.params)
        state = copy.deepcopy(resume.adam)
        rng.bit_generator.state = resume.meta["rng_state"]
        start = resume.epoch
    eval_rng = np.random.default_rng([config.seed, 1]) if config.eval_batch_size else None
    if eval_rng is not None and resume is not None and "eval_rng_state" in resume.meta:
        eval_rng.bit_generator.state = resume.meta["eval_rng_state"]
    last_good = _snapshot(model, state, start, rng, config, eval_rng)
    out_dir = Path(config.out_dir) if config.out_dir else None
    log: list[TrainLogRow] = []
    t0 = time.perf_counter()
    for epoch in range(start + 1, config.n_epochs + 1):
        z = flow.sample_prior(geom, rng, config.batch_size)
        model.params.set_requires_grad(True)
        loss, log_q, action = reverse_kl_loss(z, model, config.beta)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(epoch, last_good)
        ad.backward(loss, model.params)
        grads, _, clipped = clip_gradients(dict(model.params.grads), config.clip_norm)
        if clipped:
            logger.info("epoch %d: gradient norm clipped to %g", epoch, config.clip_norm)
        optimizer_step(model.params, grads, state, config.learning_rate)
        if eval_rng is not None:
            with_eval = flow.sample_prior(geom, eval_rng, config.eval_batch_size)
            x, logj = flow.flow_forward(with_eval, model)
            ess = effective_sample_size(-lattice.wilson_action(x, config.beta) - (flow.log_prior(x.shape) - logj))
        else:
            ess = effective_sample_size(-action - log_q)
        row = TrainLogRow(epoch, loss.item(), ess, float(np.mean(log_q)), float(np.mean(action)),
                          time.perf_counter() - t0, clipped)
        log.append(row)
        if log_sink is not None:
            log_sink(row)
        last_good = _snapshot(model, state, epoch, rng, config, eval_rng)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            formats.write_checkpoint(out_dir / f"checkpoint_{epoch:06d}.lfck", last_good)
    model.params.set_requires_grad(False)
    final = _snapshot(model, state, max(start, config.n_epochs), rng, config, eval_rng)
    if out_dir is not None:
        formats.write_checkpoint(out_dir / "checkpoint_final.lfck", final)
    return final, log


def architecture_diff(a: flow.Architecture, b: flow.Architecture) -> dict:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def transfer_weights(checkpoint: Checkpoint, target: lattice.LatticeGeometry,
                     arch: flow.Architecture | None = None) -> flow.FlowModel:
    """Rebuild the checkpointed flow on another lattice volume.

    Convolution weights are volume independent and copied unchanged; only
    the masks are regenerated for the new extents.
    """
    if arch is not None and arch != checkpoint.arch:
        raise ArchitectureMismatchError(architecture_diff(checkpoint.arch, arch))
    if target.lx % flow.MASK_PERIOD or target.ly % flow.MASK_PERIOD:
        raise flow.FlowGeometryError(
            f"target {target.lx}x{target.ly} is not a multiple of the mask period {flow.MASK_PERIOD}")
    model = flow.FlowModel.from_params(checkpoint.arch, {k: v.copy() for k, v in checkpoint.params.items()})
    model.check_geometry(target.shape)
    return model
