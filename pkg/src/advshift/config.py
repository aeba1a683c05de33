"""Experiment configuration: JSON schema, defaults and validation.

Unknown keys are rejected. Defaults follow the published sine-regression
settings; classification runs switch the ascent step and inner loop to the
classification defaults unless overridden.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Tuple

import numpy as np

from advshift.adversarial import AdvConfig
from advshift.meta import LEARNER_KINDS, InnerConfig
from advshift.models import EncoderSpec, HeadSpec
from advshift.tasks import (
    AffineTransform,
    BlobDomain,
    BlobSampler,
    SineDomain,
    SineSampler,
)

BENCHMARKS = ("sine", "blobs")
MODES = ("fisl", "baseline")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class SineDomainConfig:
    amplitude_range: Tuple[float, float]
    phase_range: Tuple[float, float]
    x_range: Tuple[float, float] = (-5.0, 5.0)


@dataclass
class TransformConfig:
    matrix: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    offset: Tuple[float, float] = (0.0, 0.0)


@dataclass
class BlobDomainConfig:
    n_classes_pool: int = 64
    center_norm_range: Tuple[float, float] = (2.0, 6.0)
    noise_std: float = 1.0
    pool_seed: int = 1
    transform: TransformConfig = field(default_factory=TransformConfig)


@dataclass
class ShotsConfig:
    support: int = 5
    query: Optional[int] = None
    eval_query: Optional[int] = None
    n_way: int = 5


@dataclass
class AdversarialConfig:
    penalty: float = 0.5
    ascent_lr: Optional[float] = None
    ascent_steps: int = 1
    phi_second_order: bool = True


@dataclass
class InnerLoopConfig:
    inner_lr: Optional[float] = None
    inner_steps: Optional[int] = None
    ridge_lambda: float = 1.0
    first_order: bool = False


@dataclass
class EncoderConfig:
    hidden_dims: List[int] = field(default_factory=lambda: [40, 40])


@dataclass
class ExperimentConfig:
    learner_kind: str
    mode: str = "fisl"
    benchmark: str = "sine"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    source: Optional[dict] = None
    unseen: Optional[dict] = None
    shots: ShotsConfig = field(default_factory=ShotsConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    outer_lr: float = 0.001
    meta_batch: int = 2
    iterations: int = 20000
    eval_every: int = 1000
    n_val_tasks: int = 100
    n_eval_tasks: int = 2000
    seed: int = 0
    out_dir: str = "runs/default"
    debug_checks: bool = False

    # -- derived objects -------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(input_dim=1 if self.benchmark == "sine" else 2, hidden_dims=list(self.encoder.hidden_dims))

    def head_spec(self) -> HeadSpec:
        if self.benchmark == "sine":
            kind = "ridge-closed-form" if self.learner_kind == "ridge" else "linear-regression"
            return HeadSpec(kind, 1)
        kind = {"proto": "prototype-metric", "ridge": "ridge-closed-form"}.get(self.learner_kind, "linear-classifier")
        return HeadSpec(kind, self.shots.n_way)

    def inner_config(self) -> InnerConfig:
        return InnerConfig(
            learner_kind=self.learner_kind,
            inner_lr=self.inner.inner_lr,
            inner_steps=self.inner.inner_steps,
            ridge_lambda=self.inner.ridge_lambda,
            first_order=self.inner.first_order,
        )

    def adv_config(self) -> AdvConfig:
        a = self.adversarial
        return AdvConfig(a.penalty, a.ascent_lr, a.ascent_steps, a.phi_second_order)

    def domain(self, which: str):
        doc = self.source if which == "source" else self.unseen
        if self.benchmark == "sine":
            d = _build(SineDomainConfig, doc, which)
            return SineDomain(tuple(d.amplitude_range), tuple(d.phase_range), tuple(d.x_range), name=which)
        d = _build(BlobDomainConfig, doc, which)
        transform = AffineTransform(tuple(map(tuple, d.transform.matrix)), tuple(d.transform.offset))
        return BlobDomain(d.n_classes_pool, tuple(d.center_norm_range), d.noise_std, transform, d.pool_seed, which)

    def sampler(self, which: str, query: Optional[int] = None):
        query = self.shots.query if query is None else query
        if self.benchmark == "sine":
            return SineSampler(self.domain(which), self.shots.support, query)
        return BlobSampler(self.domain(which), self.shots.n_way, self.shots.support, query)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        for key, value in changes.items():
            target = doc
            parts = key.split(".")
            for p in parts[:-1]:
                target = target[p]
            target[parts[-1]] = value
        return config_from_dict(doc)


def default_domains(benchmark: str) -> Tuple[dict, dict]:
    if benchmark == "sine":
        return (
            {"amplitude_range": [0.1, 3.0], "phase_range": [0.0, 0.75 * math.pi], "x_range": [-5.0, 5.0]},
            {"amplitude_range": [3.0, 5.0], "phase_range": [0.75 * math.pi, math.pi], "x_range": [-5.0, 5.0]},
        )
    unseen = AffineTransform.from_parts(rotation_deg=45.0, scale=1.5, offset=(1.0, -1.0))
    return (
        {"pool_seed": 1},
        {"pool_seed": 2, "transform": {"matrix": [list(r) for r in unseen.matrix], "offset": list(unseen.offset)}},
    )


def _is_optional(tp) -> bool:
    return isinstance(tp, str) and tp.startswith("Optional[")


def _check_scalar(value, tp: str, path: str):
    base = tp[len("Optional["):-1] if _is_optional(tp) else tp
    if value is None:
        if _is_optional(tp):
            return None
        raise ConfigError(path, "must not be null")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(path, f"expected a finite number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base == "dict":
        if not isinstance(value, Mapping):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return dict(value)
    if base.startswith(("Tuple[", "List[")):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        inner = base[base.index("[") + 1:-1]
        if base.startswith("Tuple[Tuple["):
            return [_check_scalar(v, "Tuple[float, float]", f"{path}[{i}]") for i, v in enumerate(value)]
        elem = inner.split(",")[0].strip()
        if base.startswith("Tuple[") and len(value) != inner.count(",") + 1:
            raise ConfigError(path, f"expected {inner.count(',') + 1} entries, got {len(value)}")
        return [_check_scalar(v, elem, f"{path}[{i}]") for i, v in enumerate(value)]
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, doc, path: str = ""):
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise ConfigError(path, f"expected an object, got {doc!r}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name not in doc:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(sub, "required key missing")
            continue
        nested = globals().get(str(f.type))
        if dataclasses.is_dataclass(nested):
            kwargs[name] = _build(nested, doc[name], sub)
        else:
            kwargs[name] = _check_scalar(doc[name], str(f.type), sub)
    return cls(**kwargs)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _validate_range(r, path: str) -> None:
    _require(r[0] <= r[1], path, f"interval [{r[0]}, {r[1]}] is empty")


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc)
    _require(cfg.learner_kind in LEARNER_KINDS, "learner_kind", f"must be one of {LEARNER_KINDS}")
    _require(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    _require(cfg.benchmark in BENCHMARKS, "benchmark", f"must be one of {BENCHMARKS}")
    _require(not (cfg.benchmark == "sine" and cfg.learner_kind == "proto"), "learner_kind", "proto needs the blobs benchmark")
    sine = cfg.benchmark == "sine"

    src, uns = default_domains(cfg.benchmark)
    cfg.source = cfg.source if cfg.source is not None else src
    cfg.unseen = cfg.unseen if cfg.unseen is not None else uns
    for which in ("source", "unseen"):
        dom_cls = SineDomainConfig if sine else BlobDomainConfig
        resolved = json.loads(json.dumps(dataclasses.asdict(_build(dom_cls, getattr(cfg, which), which))))
        setattr(cfg, which, resolved)
        if sine:
            for key in ("amplitude_range", "phase_range", "x_range"):
                _validate_range(resolved[key], f"{which}.{key}")
        else:
            _validate_range(resolved["center_norm_range"], f"{which}.center_norm_range")
            _require(resolved["n_classes_pool"] >= cfg.shots.n_way, f"{which}.n_classes_pool", "smaller than shots.n_way")
            _require(resolved["noise_std"] >= 0, f"{which}.noise_std", "must be >= 0")
            m = np.asarray(resolved["transform"]["matrix"], dtype=float)
            _require(m.shape == (2, 2) and abs(np.linalg.det(m)) > 1e-12, f"{which}.transform.matrix", "must be an invertible 2x2 matrix")

    if cfg.inner.inner_lr is None:
        cfg.inner.inner_lr = 0.01 if cfg.learner_kind == "maml" else 0.1
    if cfg.inner.inner_steps is None:
        cfg.inner.inner_steps = 1 if sine else 5
    if cfg.adversarial.ascent_lr is None:
        cfg.adversarial.ascent_lr = 0.01 if sine else 0.1
    if cfg.shots.query is None:
        cfg.shots.query = 20 if sine else 15
    if cfg.shots.eval_query is None:
        cfg.shots.eval_query = 100 if sine else 15

    _require(all(h >= 1 for h in cfg.encoder.hidden_dims), "encoder.hidden_dims", "all widths must be >= 1")
    _require(cfg.shots.support >= 1, "shots.support", "must be >= 1")
    _require(cfg.shots.query >= 1, "shots.query", "must be >= 1")
    _require(cfg.shots.eval_query >= 1, "shots.eval_query", "must be >= 1")
    _require(cfg.shots.n_way >= 2, "shots.n_way", "must be >= 2")
    _require(cfg.adversarial.penalty >= 0, "adversarial.penalty", "must be >= 0")
    _require(cfg.adversarial.ascent_lr >= 0, "adversarial.ascent_lr", "must be >= 0")
    _require(cfg.adversarial.ascent_steps >= 1, "adversarial.ascent_steps", "must be >= 1")
    _require(cfg.inner.inner_lr >= 0, "inner.inner_lr", "must be >= 0")
    _require(cfg.inner.inner_steps >= 1, "inner.inner_steps", "must be >= 1")
    _require(cfg.inner.ridge_lambda >= 0, "inner.ridge_lambda", "must be >= 0")
    _require(cfg.outer_lr >= 0, "outer_lr", "must be >= 0")
    _require(cfg.meta_batch >= 1, "meta_batch", "must be >= 1")
    _require(cfg.iterations >= 0, "iterations", "must be >= 0")
    _require(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    _require(cfg.n_val_tasks >= 2, "n_val_tasks", "must be >= 2")
    _require(cfg.n_eval_tasks >= 2, "n_eval_tasks", "must be >= 2")
    _require(cfg.seed >= 0, "seed", "must be >= 0")
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("", "top level of the config must be an object")
    return config_from_dict(doc)
