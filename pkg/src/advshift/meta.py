"""Base-learner adaptation and meta-objectives for MAML, ANIL, ridge and prototype learners."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from advshift import autodiff as ad
from advshift.autodiff import ParamSet, Tensor
from advshift.models import features, linear_head, proto_logits, ridge_solve, unpack

LEARNER_KINDS = ("maml", "anil", "ridge", "proto")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class InnerConfig:
    learner_kind: str = "maml"
    inner_lr: float = 0.01
    inner_steps: int = 1
    ridge_lambda: float = 1.0
    first_order: bool = False

    def __post_init__(self):
        if self.learner_kind not in LEARNER_KINDS:
            raise ValueError(f"learner_kind must be one of {LEARNER_KINDS}, got {self.learner_kind!r}")
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")


@dataclass
class BaseLearner:
    """Task-specific weights; ``adapted`` names the entries that moved away from theta."""

    w: ParamSet
    adapted: Tuple[str, ...]


def head_names(params: Mapping[str, Tensor]) -> list:
    return [k for k in params if k.startswith("head.")]


def fit_loss(pred: Tensor, y: np.ndarray, classification: bool) -> Tensor:
    if classification:
        return ad.softmax_cross_entropy(pred, y)
    return ad.squared_error(pred, y)


def support_loss(w: Mapping[str, Tensor], task_or_pseudo) -> Tensor:
    task, phi = unpack(task_or_pseudo)
    z = features(w, task.x_support, phi)
    return fit_loss(linear_head(w, z), task.y_support, task.is_classification)


def inner_adapt(theta: Mapping[str, Tensor], task_or_pseudo, cfg: InnerConfig, differentiable: bool = True) -> BaseLearner:
    """Adapt a base learner on the support set starting from ``theta``.

    With ``differentiable`` the adaptation stays on the graph so gradients
    reach theta through it (second order unless ``cfg.first_order``).
    Otherwise the returned weights are detached.
    """
    if cfg.learner_kind == "proto":
        raise ValueError("prototype learners have no inner adaptation step")
    task, phi = unpack(task_or_pseudo)
    w = dict(theta)

    if cfg.learner_kind == "ridge":
        z = features(theta, task.x_support, phi)
        if task.is_classification:
            y = np.eye(task.n_classes)[task.y_support]
        else:
            y = task.y_support
        head = ridge_solve(z, Tensor(y), cfg.ridge_lambda)
        if not differentiable:
            head = ad.detach_params(head)
        w.update(head)
        return BaseLearner(w, tuple(head))

    names = list(theta) if cfg.learner_kind == "maml" else head_names(theta)
    create_graph = differentiable and not cfg.first_order
    if not differentiable:
        w.update({n: Tensor(theta[n].data, requires_grad=True) for n in names})
    with ad.grad_mode(True):
        for _ in range(cfg.inner_steps):
            loss = support_loss(w, task_or_pseudo)
            grads = ad.grad(loss, {n: w[n] for n in names}, create_graph=create_graph)
            for n in names:
                w[n] = w[n] - grads[n] * cfg.inner_lr
    if not differentiable:
        for n in names:
            w[n] = w[n].detach()
    return BaseLearner(w, tuple(names))


def predict(learner: BaseLearner, task_or_pseudo, x=None) -> Tensor:
    task, phi = unpack(task_or_pseudo)
    x = task.x_query if x is None else x
    return linear_head(learner.w, features(learner.w, x, phi))


def query_loss(learner: BaseLearner, task_or_pseudo) -> Tensor:
    """Mean query loss: squared error for regression, cross-entropy for classification."""
    task, _ = unpack(task_or_pseudo)
    if len(task.x_query) == 0:
        raise ValueError("task query set is empty")
    return fit_loss(predict(learner, task_or_pseudo), task.y_query, task.is_classification)


def canonical_support(task) -> Tuple[np.ndarray, np.ndarray]:
    """Support set sorted by (label, input) so prototype sums are order independent."""
    x, y = task.x_support, task.y_support
    order = np.lexsort((*x.T[::-1], y))
    return x[order], y[order]


def proto_logits_for(theta: Mapping[str, Tensor], task_or_pseudo) -> Tensor:
    task, phi = unpack(task_or_pseudo)
    if not task.is_classification:
        raise ValueError("prototype learner needs a classification task")
    xs, ys = canonical_support(task)
    zs = features(theta, xs, phi)
    zq = features(theta, task.x_query, phi)
    return proto_logits(zs, ys, zq, task.n_classes)


def proto_loss(theta: Mapping[str, Tensor], task_or_pseudo) -> Tensor:
    task, _ = unpack(task_or_pseudo)
    if len(task.x_query) == 0:
        raise ValueError("task query set is empty")
    return ad.softmax_cross_entropy(proto_logits_for(theta, task_or_pseudo), task.y_query)


def task_loss(theta: Mapping[str, Tensor], task_or_pseudo, cfg: InnerConfig) -> Tensor:
    """Post-adaptation query loss, differentiable w.r.t. theta (and phi for pseudo tasks)."""
    if cfg.learner_kind == "proto":
        return proto_loss(theta, task_or_pseudo)
    return query_loss(inner_adapt(theta, task_or_pseudo, cfg, differentiable=True), task_or_pseudo)


class Adam:
    """Adam over a ParamSet; state keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> ParamSet:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name].data
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = Tensor(p.data - update, requires_grad=True)
        return out

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "t": self.t,
            "m": {k: {"shape": list(a.shape), "values": a.reshape(-1).tolist()} for k, a in self.m.items()},
            "v": {k: {"shape": list(a.shape), "values": a.reshape(-1).tolist()} for k, a in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, doc: Mapping) -> "Adam":
        opt = cls(doc["lr"], tuple(doc["betas"]), doc["eps"])
        opt.t = int(doc["t"])
        for key in ("m", "v"):
            getattr(opt, key).update(
                {k: np.array(e["values"], dtype=np.float64).reshape(e["shape"]) for k, e in doc[key].items()}
            )
        return opt


def baseline_meta_step(
    theta: Mapping[str, Tensor],
    tasks: Sequence,
    cfg: InnerConfig,
    optimizer: Adam,
    reduction: str = "mean",
) -> Tuple[ParamSet, float]:
    """One outer step on the batch's post-adaptation query losses (no shift layer).

    Returns the updated parameters and the batch loss. Losses are summed in
    the order given; ``reduction="mean"`` divides by the batch size.
    """
    if not tasks:
        raise ValueError("baseline_meta_step needs at least one task")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = None
    for task in tasks:
        loss = task_loss(theta, task, cfg)
        total = loss if total is None else total + loss
    if reduction == "mean":
        total = total * (1.0 / len(tasks))
    value = total.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite meta loss {value}")
    grads = ad.grad(total, theta)
    if not ad.all_finite(grads.values()):
        raise NonFiniteLossError("non-finite meta gradient")
    return optimizer.step(theta, grads), value
