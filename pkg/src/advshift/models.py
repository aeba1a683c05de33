"""Feature encoder, prediction heads and the feature-wise shift layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Optional

import numpy as np

from advshift import autodiff as ad
from advshift.autodiff import ParamSet, ShapeError, Tensor
from advshift.tasks import Task

HEAD_KINDS = ("linear-regression", "linear-classifier", "ridge-closed-form", "prototype-metric")


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int = 1
    hidden_dims: List[int] = field(default_factory=lambda: [40, 40])
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"encoder dims must be >= 1: {self.input_dim}, {self.hidden_dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def layer_dims(self) -> List[tuple]:
        dims = [self.input_dim, *self.hidden_dims]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_dims)


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "linear-regression"
    output_dim: int = 1

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.output_dim < 1:
            raise ValueError("head output_dim must be >= 1")

    @property
    def parametric(self) -> bool:
        return self.kind in ("linear-regression", "linear-classifier")


@dataclass
class FiSLParams:
    """Per-channel scale and shift applied to encoder features."""

    scale: Tensor
    shift: Tensor

    def __post_init__(self):
        if self.scale.shape != self.shift.shape or self.scale.ndim != 1:
            raise ShapeError(f"FiSL scale {self.scale.shape} and shift {self.shift.shape} must be equal 1-D")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, channels: int, requires_grad: bool = False) -> "FiSLParams":
        return cls(Tensor(np.ones(channels), requires_grad), Tensor(np.zeros(channels), requires_grad))

    def as_params(self) -> ParamSet:
        return {"fisl.scale": self.scale, "fisl.shift": self.shift}

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor]) -> "FiSLParams":
        return cls(params["fisl.scale"], params["fisl.shift"])

    def detach(self) -> "FiSLParams":
        return FiSLParams(self.scale.detach(), self.shift.detach())

    def is_identity(self) -> bool:
        return bool(np.all(self.scale.data == 1.0) and np.all(self.shift.data == 0.0))


def encoder_names(spec: EncoderSpec) -> List[str]:
    names = []
    for i in range(len(spec.layer_dims)):
        names += [f"enc.{i}.weight", f"enc.{i}.bias"]
    return names


def init_params(spec: EncoderSpec, head: HeadSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every affine layer."""
    params: ParamSet = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"enc.{i}.weight"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True)
        params[f"enc.{i}.bias"] = Tensor(rng.uniform(-bound, bound, fan_out), True)
    if head.parametric:
        c = spec.output_dim
        bound = 1.0 / np.sqrt(c)
        params["head.weight"] = Tensor(rng.uniform(-bound, bound, (c, head.output_dim)), True)
        params["head.bias"] = Tensor(rng.uniform(-bound, bound, head.output_dim), True)
    return params


def encode(params: Mapping[str, Tensor], x) -> Tensor:
    """Run the ReLU MLP encoder; with no hidden layers this is the identity."""
    z = ad.as_tensor(x)
    i = 0
    while f"enc.{i}.weight" in params:
        w = params[f"enc.{i}.weight"]
        if z.ndim != 2 or z.shape[1] != w.shape[0]:
            raise ShapeError(f"encoder layer {i}: input {z.shape} does not match weight {w.shape}")
        z = ad.relu(z @ w + params[f"enc.{i}.bias"])
        i += 1
    if z.ndim != 2:
        raise ShapeError(f"encoder input must be (batch, dim), got {z.shape}")
    return z


def fisl_apply(phi: FiSLParams, z0: Tensor) -> Tensor:
    """z = scale * z0 + shift, broadcast over the batch."""
    z0 = ad.as_tensor(z0)
    if z0.shape[-1] != phi.channels:
        raise ShapeError(f"FiSL has {phi.channels} channels but features have shape {z0.shape}")
    return z0 * phi.scale + phi.shift


def features(params: Mapping[str, Tensor], x, phi: Optional[FiSLParams] = None) -> Tensor:
    z = encode(params, x)
    return z if phi is None else fisl_apply(phi, z)


def linear_head(w: Mapping[str, Tensor], z: Tensor) -> Tensor:
    if "head.weight" not in w:
        raise ValueError("parametric head called without head.weight")
    weight = w["head.weight"]
    if z.shape[1] != weight.shape[0]:
        raise ShapeError(f"head: features {z.shape} vs weight {weight.shape}")
    return z @ weight + w["head.bias"]


def head_forward(head: HeadSpec, w: Mapping[str, Tensor], z: Tensor, support_z=None, support_y=None) -> Tensor:
    """Predictions (regression) or logits (classification) for features ``z``.

    The prototype head takes its "weights" from the support features: pass
    ``support_z`` and integer ``support_y``.
    """
    if head.kind == "prototype-metric":
        if support_z is None:
            raise ValueError("prototype head needs support features")
        return proto_logits(support_z, support_y, z, head.output_dim)
    if not w:
        raise ValueError(f"{head.kind} head needs weights, got an empty ParamSet")
    return linear_head(w, z)


def proto_logits(support_z: Tensor, support_y, query_z: Tensor, n_classes: int) -> Tensor:
    """Negative squared euclidean distance from each query to each class mean."""
    support_y = np.asarray(support_y, dtype=np.int64)
    onehot = np.zeros((n_classes, support_y.size))
    onehot[support_y, np.arange(support_y.size)] = 1.0
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts[:, 0] == 0).tolist()
        raise ValueError(f"support set has no examples for classes {missing}")
    protos = Tensor(onehot / counts) @ support_z
    q_sq = ad.tsum(ad.square(query_z), axis=1, keepdims=True)
    p_sq = ad.reshape(ad.tsum(ad.square(protos), axis=1), (1, n_classes))
    cross = query_z @ protos.T
    return cross * 2.0 - q_sq - p_sq


def ridge_solve(z: Tensor, y: Tensor, lam: float) -> ParamSet:
    """Closed-form ridge weights with an (also regularised) bias column.

    Returns ``head.weight`` / ``head.bias`` so the result plugs into the
    linear head. Written with matmuls against constant selectors so the
    solution stays differentiable in ``z``.
    """
    n, c = z.shape
    embed = np.zeros((c, c + 1))
    embed[:, :c] = np.eye(c)
    ones_col = np.zeros((n, c + 1))
    ones_col[:, c] = 1.0
    z_aug = z @ Tensor(embed) + Tensor(ones_col)
    gram = z_aug.T @ z_aug + Tensor(lam * np.eye(c + 1))
    if lam == 0 and np.linalg.matrix_rank(gram.data) < c + 1:
        raise np.linalg.LinAlgError("ridge system is singular with lambda=0; use lambda > 0")
    w_aug = ad.solve(gram, z_aug.T @ y)
    weight = Tensor(embed) @ w_aug
    bias = ad.reshape(Tensor(ones_col[:1]) @ w_aug, (w_aug.shape[1],))
    return {"head.weight": weight, "head.bias": bias}


@dataclass(frozen=True)
class PseudoTask:
    """A source task whose features are routed through a shift layer.

    Inputs and labels are the source task's own arrays (labels are never
    transported); only the forward pass changes.
    """

    task: Task
    phi: FiSLParams

    @property
    def is_classification(self) -> bool:
        return self.task.is_classification

    @property
    def domain_tag(self) -> str:
        return f"pseudo:{self.task.domain_tag}"


def fisl_transform_task(phi: FiSLParams, task: Task) -> PseudoTask:
    if task.x_support.ndim != 2:
        raise ShapeError(f"task inputs must be (n, dim), got {task.x_support.shape}")
    return PseudoTask(task, phi)


def unpack(task_or_pseudo) -> tuple:
    """(task, phi) for either a plain Task (phi None) or a PseudoTask."""
    if isinstance(task_or_pseudo, PseudoTask):
        return task_or_pseudo.task, task_or_pseudo.phi
    return task_or_pseudo, None
