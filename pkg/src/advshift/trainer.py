"""Training loop, checkpoints and the metrics stream for one experiment run."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from advshift import autodiff as ad
from advshift.adversarial import EpisodeTriple, TrainState, adversarial_update
from advshift.config import ExperimentConfig
from advshift.eval import evaluate_tasks
from advshift.meta import Adam, NonFiniteLossError, baseline_meta_step
from advshift.models import FiSLParams, init_params

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.json"
METRICS = "metrics.csv"
TIMING = "timing.csv"
CONFIG = "config.json"

# independent streams derived from the run seed
VAL_STREAM = 2
EVAL_STREAM = 1


def init_state(config: ExperimentConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    theta = init_params(config.encoder_spec(), config.head_spec(), rng)
    phi = FiSLParams.identity(config.encoder_spec().output_dim, requires_grad=True)
    return TrainState(theta, phi, Adam(config.outer_lr), 0, rng)


def state_to_json(state: TrainState) -> dict:
    return {
        "iteration": state.iteration,
        "theta": ad.params_to_json(state.theta),
        "phi": ad.params_to_json(state.phi.as_params()),
        "optimizer_state": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
    }


def state_from_json(doc: dict) -> TrainState:
    theta = ad.param_leaves(ad.params_from_json(doc["theta"]))
    phi = FiSLParams.from_params(ad.param_leaves(ad.params_from_json(doc["phi"])))
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return TrainState(theta, phi, Adam.from_state_dict(doc["optimizer_state"]), int(doc["iteration"]), rng)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(state_to_json(state)))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> TrainState:
    return state_from_json(json.loads(Path(path).read_text()))


def metric_columns(config: ExperimentConfig) -> list:
    kind = "mse" if config.benchmark == "sine" else "acc"
    return ["iteration", "train_loss", f"val_{kind}_source", f"val_{kind}_unseen"]


def validation_tasks(config: ExperimentConfig, which: str) -> list:
    rng = np.random.default_rng([config.seed, VAL_STREAM, 0 if which == "source" else 1])
    sampler = config.sampler(which, config.shots.eval_query)
    return [sampler(rng) for _ in range(config.n_val_tasks)]


def _truncate_rows(path: Path, iteration: int) -> None:
    """Drop metric rows logged after ``iteration`` (left over from an aborted run)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= iteration]
    path.write_text("".join(kept))


def train(
    config: ExperimentConfig,
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    stop_at: Optional[int] = None,
) -> TrainState:
    """Run (or resume) training and return the final state.

    Writes the resolved config, a checkpoint at every evaluation point,
    ``metrics.csv`` (deterministic) and ``timing.csv`` (wall-clock) into
    ``out_dir``. ``stop_at`` ends the run early at that iteration, leaving a
    checkpoint to resume from.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    ad.set_debug_checks(config.debug_checks)

    metrics_path, timing_path = out / METRICS, out / TIMING
    if resume is not None:
        state = load_checkpoint(resume)
        _truncate_rows(metrics_path, state.iteration)
        _truncate_rows(timing_path, state.iteration)
    else:
        state = init_state(config)
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(metric_columns(config))
        timing_path.write_text("iteration,wall_ms\n")
        save_checkpoint(state, out / CHECKPOINT)

    inner = config.inner_config()
    adv = config.adv_config()
    use_fisl = config.mode == "fisl"
    source = config.sampler("source")
    val = {which: validation_tasks(config, which) for which in ("source", "unseen")}
    if stop_at is not None and stop_at % config.eval_every:
        raise ValueError("stop_at must fall on an evaluation point (a multiple of eval_every)")
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)

    window = []
    started = time.perf_counter()
    while state.iteration < end:
        rng = state.rng
        try:
            if use_fisl:
                triple = EpisodeTriple(source(rng), source(rng), source(rng))
                state, loss = adversarial_update(state, triple, adv, inner)
            else:
                batch = [source(rng) for _ in range(config.meta_batch)]
                try:
                    theta, loss = baseline_meta_step(state.theta, batch, inner, state.optimizer)
                except NonFiniteLossError as exc:
                    raise NonFiniteLossError(str(exc), state.iteration) from None
                state.theta, state.iteration = theta, state.iteration + 1
        except NonFiniteLossError:
            save_checkpoint(state, out / CHECKPOINT)
            logger.error("aborting at iteration %d; checkpoint written", state.iteration)
            raise
        window.append(loss)
        if state.iteration % config.eval_every == 0 or state.iteration == config.iterations:
            row = [state.iteration, repr(float(np.mean(window)))]
            for which in ("source", "unseen"):
                values = evaluate_tasks(state.theta, state.phi, val[which], inner, use_fisl)
                row.append(repr(float(np.mean(values))))
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
            with timing_path.open("a") as fh:
                fh.write(f"{state.iteration},{(time.perf_counter() - started) * 1000:.1f}\n")
            save_checkpoint(state, out / CHECKPOINT)
            logger.info("iter %d  train %s  val source %s  unseen %s", *row)
            window = []
    return state
