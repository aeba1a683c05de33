"""Adversarial feature-shift training.

One iteration consumes three source tasks. The first drives a few steps of
gradient ascent on the shift layer against a transport-penalised loss, the
shifted layer turns the second task into a pseudo task, and theta and the
shift layer's initialization are then updated on the clean third task plus
the pseudo task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Tuple

import numpy as np

from advshift import autodiff as ad
from advshift.autodiff import ParamSet, Tensor
from advshift.meta import (
    Adam,
    BaseLearner,
    canonical_support,
    InnerConfig,
    NonFiniteLossError,
    inner_adapt,
    task_loss,
    fit_loss,
)
from advshift.models import FiSLParams, encode, fisl_apply, fisl_transform_task, linear_head, proto_logits
from advshift.tasks import Task


@dataclass(frozen=True)
class AdvConfig:
    penalty: float = 0.5
    ascent_lr: float = 0.01
    ascent_steps: int = 1
    phi_second_order: bool = True
    # freeze the shift layer's initialization (only used for ablations/equivalence checks)
    train_phi: bool = True

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")
        if self.ascent_lr < 0:
            raise ValueError("ascent_lr must be >= 0")
        if self.ascent_steps < 1:
            raise ValueError("ascent_steps must be >= 1")


@dataclass(frozen=True)
class EpisodeTriple:
    adapt_task: Task
    pseudo_source_task: Task
    clean_task: Task


@dataclass
class TrainState:
    theta: ParamSet
    phi: FiSLParams
    optimizer: Adam
    iteration: int
    rng: np.random.Generator


def transport_cost(z0, z, y0=None, y=None):
    """Half squared euclidean distance between features, infinite across labels.

    For batches (2-D inputs) the per-row costs are averaged. Returns
    ``math.inf`` when any paired labels differ, otherwise a scalar Tensor.
    """
    z0, z = ad.as_tensor(z0), ad.as_tensor(z)
    if z0.shape != z.shape:
        raise ad.ShapeError(f"transport_cost: shapes {z0.shape} and {z.shape} differ")
    if y0 is not None and y is not None and np.any(np.asarray(y0) != np.asarray(y)):
        return math.inf
    sq = ad.square(z0 - z)
    if z0.ndim <= 1:
        return ad.tsum(sq) * 0.5
    return ad.mean(ad.tsum(sq, axis=-1)) * 0.5


def surrogate_objective(
    theta: Mapping[str, Tensor],
    learner: Optional[BaseLearner],
    phi: FiSLParams,
    task: Task,
    penalty: float,
) -> Tensor:
    """Query loss under the shift layer minus ``penalty`` times the mean transport cost.

    ``learner`` is the base learner fitted on the task's unshifted support set;
    pass None for the prototype learner, whose whole episode is routed
    through the shift layer.
    """
    if learner is None:
        xs, ys = canonical_support(task)
        zs = fisl_apply(phi, encode(theta, xs))
        z0 = encode(theta, task.x_query)
        z = fisl_apply(phi, z0)
        loss = ad.softmax_cross_entropy(proto_logits(zs, ys, z, task.n_classes), task.y_query)
    else:
        z0 = encode(learner.w, task.x_query)
        z = fisl_apply(phi, z0)
        loss = fit_loss(linear_head(learner.w, z), task.y_query, task.is_classification)
    # labels are carried over unchanged, so the infinite branch cannot fire
    cost = transport_cost(z0, z)
    out = loss - cost * penalty
    if not np.isfinite(out.item()):
        raise NonFiniteLossError(f"non-finite surrogate objective {out.item()}")
    return out


def max_phase(
    theta: Mapping[str, Tensor],
    phi: FiSLParams,
    adapt_task: Task,
    cfg: AdvConfig,
    inner: InnerConfig,
    learner: Optional[BaseLearner] = None,
) -> FiSLParams:
    """Gradient ascent on the surrogate w.r.t. the shift layer.

    The base learner is fitted once on the unshifted support set and kept
    fixed across ascent steps. With ``cfg.phi_second_order`` the ascent is
    recorded so later gradients reach ``phi`` (and theta) through it.
    """
    if not phi.scale.requires_grad:
        phi = FiSLParams(Tensor(phi.scale.data, True), Tensor(phi.shift.data, True))
    if learner is None and inner.learner_kind != "proto":
        learner = inner_adapt(theta, adapt_task, inner, differentiable=cfg.phi_second_order)
    create_graph = cfg.phi_second_order
    current = phi
    for _ in range(cfg.ascent_steps):
        objective = surrogate_objective(theta, learner, current, adapt_task, cfg.penalty)
        g = ad.grad(objective, current.as_params(), create_graph=create_graph)
        if not ad.all_finite(g.values()):
            raise NonFiniteLossError("non-finite ascent gradient on the shift layer")
        current = FiSLParams(
            current.scale + g["fisl.scale"] * cfg.ascent_lr,
            current.shift + g["fisl.shift"] * cfg.ascent_lr,
        )
    return current


def adversarial_loss(state: TrainState, triple: EpisodeTriple, cfg: AdvConfig, inner: InnerConfig) -> Tensor:
    """Clean-task loss plus pseudo-task loss for one triple (summed, clean first)."""
    shifted = max_phase(state.theta, state.phi, triple.adapt_task, cfg, inner)
    pseudo = fisl_transform_task(shifted, triple.pseudo_source_task)
    return task_loss(state.theta, triple.clean_task, inner) + task_loss(state.theta, pseudo, inner)


def adversarial_update(
    state: TrainState, triple: EpisodeTriple, cfg: AdvConfig, inner: InnerConfig
) -> Tuple[TrainState, float]:
    """One outer step on theta (and phi unless frozen). Returns the new state and the loss.

    On a non-finite loss or gradient the input state is left untouched and
    NonFiniteLossError carries the iteration index.
    """
    loss = adversarial_loss(state, triple, cfg, inner)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite combined loss {value}", state.iteration)
    params = dict(state.theta)
    if cfg.train_phi:
        params.update(state.phi.as_params())
    grads = ad.grad(loss, params)
    if not ad.all_finite(grads.values()):
        raise NonFiniteLossError("non-finite gradient", state.iteration)
    updated = state.optimizer.step(params, grads)
    theta = {k: updated[k] for k in state.theta}
    phi = FiSLParams.from_params(updated) if cfg.train_phi else state.phi
    return replace(state, theta=theta, phi=phi, iteration=state.iteration + 1), value
