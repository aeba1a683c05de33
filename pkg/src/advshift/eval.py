"""Meta-test protocol and aggregate metrics with 95% confidence intervals."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from advshift import autodiff as ad
from advshift.autodiff import Tensor
from advshift.meta import InnerConfig, inner_adapt, predict, proto_logits_for
from advshift.models import FiSLParams, fisl_transform_task
from advshift.tasks import Task, sine_targets

RESULT_FIELDS = ("model_tag", "domain_tag", "shot", "metric_name", "mean", "ci95", "n_tasks", "seed")


@dataclass(frozen=True)
class MetricsRecord:
    metric_name: str
    mean: float
    ci95_halfwidth: float
    n_tasks: int
    domain_tag: str = ""
    model_tag: str = ""


def summarize(values: Sequence[float], metric_name: str, domain_tag: str = "", model_tag: str = "") -> MetricsRecord:
    """Mean and 1.96 * sample-std / sqrt(n) over per-task metrics."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two tasks for a confidence interval")
    half = 1.96 * values.std(ddof=1) / np.sqrt(values.size)
    return MetricsRecord(metric_name, float(values.mean()), float(half), int(values.size), domain_tag, model_tag)


def meta_test_task(
    theta: Mapping[str, Tensor],
    phi: FiSLParams,
    task: Task,
    inner: InnerConfig,
    use_fisl: bool = True,
) -> float:
    """Adapt on the (optionally shifted) support set and score the query set.

    Returns MSE for regression and accuracy for classification. The shift
    layer is used as learned; it is not re-fitted per task.
    """
    routed = fisl_transform_task(phi.detach(), task) if use_fisl else task
    if inner.learner_kind == "proto":
        with ad.no_grad():
            logits = proto_logits_for(theta, routed)
        return float(np.mean(np.argmax(logits.data, axis=1) == task.y_query))
    learner = inner_adapt(theta, routed, inner, differentiable=False)
    with ad.no_grad():
        out = predict(learner, routed).data
    if task.is_classification:
        return float(np.mean(np.argmax(out, axis=1) == task.y_query))
    return float(np.mean((out - task.y_query) ** 2))


def evaluate_tasks(theta, phi, tasks: Iterable[Task], inner: InnerConfig, use_fisl: bool = True) -> List[float]:
    theta = ad.detach_params(theta)
    return [meta_test_task(theta, phi, t, inner, use_fisl) for t in tasks]


def evaluate_suite(
    theta: Mapping[str, Tensor],
    phi: FiSLParams,
    sampler: Callable[[np.random.Generator], Task],
    n_tasks: int,
    inner: InnerConfig,
    use_fisl: bool,
    rng: np.random.Generator,
    model_tag: str = "",
) -> MetricsRecord:
    if n_tasks < 2:
        raise ValueError("n_tasks must be >= 2")
    tasks = [sampler(rng) for _ in range(n_tasks)]
    values = evaluate_tasks(theta, phi, tasks, inner, use_fisl)
    metric = "accuracy" if tasks[0].is_classification else "mse"
    return summarize(values, metric, tasks[0].domain_tag, model_tag)


def write_results_csv(path: str | Path, rows: Sequence[Mapping]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULT_FIELDS})


def result_row(record: MetricsRecord, shot: int, seed: int) -> dict:
    return {
        "model_tag": record.model_tag,
        "domain_tag": record.domain_tag,
        "shot": shot,
        "metric_name": record.metric_name,
        "mean": repr(record.mean),
        "ci95": repr(record.ci95_halfwidth),
        "n_tasks": record.n_tasks,
        "seed": seed,
    }


def write_summary_json(path: str | Path, records: Sequence[MetricsRecord], extra: Optional[Mapping] = None) -> None:
    doc = {"records": [asdict(r) for r in records]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def prediction_curves(
    theta: Mapping[str, Tensor],
    phi: FiSLParams,
    waves: Sequence[tuple],
    inner: InnerConfig,
    rng: np.random.Generator,
    k_support: int = 5,
    use_fisl: bool = True,
    x_range=(-5.0, 5.0),
    n_grid: int = 200,
) -> List[dict]:
    """Per-wave curves for plotting: grid, ground truth and adapted predictions."""
    grid = np.linspace(*x_range, n_grid).reshape(-1, 1)
    theta = ad.detach_params(theta)
    curves = []
    for amplitude, phase in waves:
        xs = rng.uniform(*x_range, size=(k_support, 1))
        task = Task(xs, sine_targets(xs, amplitude, phase), grid, sine_targets(grid, amplitude, phase), "curve")
        routed = fisl_transform_task(phi.detach(), task) if use_fisl else task
        learner = inner_adapt(theta, routed, inner, differentiable=False)
        with ad.no_grad():
            pred = predict(learner, routed).data
        curves.append(
            {
                "amplitude": amplitude,
                "phase": phase,
                "support_x": xs[:, 0].tolist(),
                "support_y": task.y_support[:, 0].tolist(),
                "x": grid[:, 0].tolist(),
                "truth": task.y_query[:, 0].tolist(),
                "prediction": pred[:, 0].tolist(),
            }
        )
    return curves
