"""Experiment execution: build problems from configs, run replicates, persist traces."""
from __future__ import annotations

import hashlib
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baseline import AdamParams, GradientSettings, run_gradient, train_network_gradient
from ..data import load_mnist, make_blobs
from ..errors import ConfigError, EnKFError, NumericError, RunFailed
from ..linesearch import ArmijoParams
from ..network import mlp, small_cnn
from ..optimizer import EnKFSettings, TheoreticalSchedule, run
from ..parallel import ParticleScheduler
from ..problems import make_oscillatory, make_quadratic
from ..sampler import INIT_STREAM, PerturbationSpec, make_stream
from ..varpro import InnerSolveParams, OuterSettings, train_outer
from .config import (CLASSIFICATION_KINDS, GRADIENT_VARIANTS, ExperimentConfig, config_hash,
                     config_to_dict, expand_sweep, point_label)
from .traces import BASE_COLUMNS, CLASSIFICATION_COLUMNS, TraceWriter, write_sidecar

DIRECTION_OF_VARIANT = {"vanilla": "identity", "memory": "identity", "kalman": "kalman",
                        "gauss-newton": "gauss-newton"}


def replicate_seed(master_seed: int, index: int) -> int:
    """64-bit seed for replicate ``index``, a hash of ``(master_seed, index)``."""
    digest = hashlib.blake2b(f"{master_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def build_problem(config: ExperimentConfig):
    p = config.problem
    if p.kind == "quadratic":
        return make_quadratic(p.m, p.n, p.condition, p.seed)
    if p.kind == "oscillatory":
        return make_oscillatory(p.m, p.n, p.frequency, p.amplitude, p.seed, p.matrix_scale)
    raise ConfigError(f"problem.kind: {p.kind!r} is not a regression problem")


def build_classification(config: ExperimentConfig):
    """Return ``(network, dataset)`` for a classification config."""
    p = config.problem
    if p.kind == "blobs":
        dataset = make_blobs(p.n_samples, p.n_features, p.n_classes, p.separation, seed=p.seed)
    elif p.kind == "mnist":
        try:
            dataset = load_mnist(p.data_dir, p.n_train, p.n_test)
        except FileNotFoundError as exc:
            raise ConfigError(f"problem.data_dir: {exc}") from None
    else:
        raise ConfigError(f"problem.kind: {p.kind!r} is not a classification problem")
    if p.network == "cnn":
        side = int(round(np.sqrt(dataset.n_features)))
        if side * side != dataset.n_features:
            raise ConfigError("problem.network: cnn needs square single-channel images")
        network = small_cnn((1, side, side), tuple(p.channels))
    else:
        network = mlp(dataset.n_features, tuple(p.hidden))
    return network, dataset


def _armijo(config: ExperimentConfig) -> ArmijoParams:
    s = config.step_rule
    return ArmijoParams(c=s.c, shrink=s.shrink, max_trials=s.max_trials, mu0=s.mu0, growth=s.growth)


def enkf_settings(config: ExperimentConfig) -> EnKFSettings:
    opt = config.optimizer
    rule = _armijo(config) if config.step_rule.kind == "armijo" else TheoreticalSchedule(config.step_rule.L)
    return EnKFSettings(
        direction=DIRECTION_OF_VARIANT[opt.variant],
        memory=config.memory_capacity(),
        step_rule=rule,
        gamma_kalman=opt.gamma_kalman,
        gamma_gn=opt.gamma_gn,
        batch_size=opt.batch_size,
        batch_scheme=opt.batch_scheme,
        line_search_data=opt.line_search_data,
        cg_rtol=opt.cg_rtol,
    )


def gradient_settings(config: ExperimentConfig) -> GradientSettings:
    opt = config.optimizer
    adam = AdamParams(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, schedule=opt.schedule)
    return GradientSettings(method=opt.variant, adam=adam, lr=opt.lr, batch_size=opt.batch_size)


def run_single(config: ExperimentConfig, seed: int, workers: int = 1, on_record=None):
    """Execute one replicate with sampler/batch/init randomness derived from ``seed``."""
    variant = config.optimizer.variant
    s = config.sampler
    if config.problem.kind in CLASSIFICATION_KINDS:
        network, dataset = build_classification(config)
        theta0 = network.init_params(make_stream(seed, INIT_STREAM))
        if variant in GRADIENT_VARIANTS:
            return train_network_gradient(network, dataset, gradient_settings(config), config.iterations,
                                          theta0, weight_decay=0.0, seed=seed,
                                          record_every=config.optimizer.record_every, on_record=on_record)
        outer = OuterSettings(particles=s.particle_count, sigma=s.sigma,
                              batch_size=config.optimizer.batch_size,
                              direction=DIRECTION_OF_VARIANT[variant], step_rule=_armijo(config),
                              line_search_data=config.optimizer.line_search_data,
                              distribution=s.distribution)
        inner = InnerSolveParams(config.inner.newton_iters, config.inner.cg_iters_max,
                                 config.inner.weight_decay, config.inner.cg_tolerance)
        with ParticleScheduler(workers) as sched:
            return train_outer(network, dataset, outer, inner, config.iterations, theta0, seed=seed,
                               scheduler=sched, on_record=on_record)
    problem = build_problem(config)
    if variant in GRADIENT_VARIANTS:
        return run_gradient(problem, gradient_settings(config), config.iterations, seed=seed,
                            on_record=on_record)
    spec = PerturbationSpec(problem.dimension, s.particle_count, s.sigma, s.distribution, seed, s.decay)
    with ParticleScheduler(workers) as sched:
        return run(problem, enkf_settings(config), spec, config.iterations, sched, on_record=on_record)


@dataclass
class ReplicateResult:
    path: Path
    seed: int
    status: str
    error: str | None = None
    numeric: bool = False


@dataclass
class ExperimentResult:
    directory: Path
    replicates: list = field(default_factory=list)

    @property
    def failures(self):
        return [r for r in self.replicates if r.status != "ok"]

    @property
    def paths(self):
        return [r.path for r in self.replicates]


def columns_for(config: ExperimentConfig):
    if config.problem.kind in CLASSIFICATION_KINDS:
        return BASE_COLUMNS + CLASSIFICATION_COLUMNS
    return BASE_COLUMNS


def run_experiment(config: ExperimentConfig, out_dir, workers: int = 1, label: str | None = None,
                   log=None) -> ExperimentResult:
    """Run ``config.replicates`` replicates into ``out_dir/<label>/rep_XXX.csv``.

    A failing replicate keeps its flushed trace prefix, is marked failed in
    its sidecar, and does not stop the remaining replicates.
    """
    directory = Path(out_dir) / (label or config.name)
    directory.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    result = ExperimentResult(directory)
    for r in range(config.replicates):
        seed = replicate_seed(config.master_seed, r)
        path = directory / f"rep_{r:03d}.csv"
        meta = {
            "config_hash": digest,
            "config": config_to_dict(config),
            "replicate": r,
            "seed": seed,
            "variant": config.optimizer.variant,
            "optimizer": "enkf" if config.optimizer.variant not in GRADIENT_VARIANTS else config.optimizer.variant,
            "problem": config.problem.kind,
        }
        with TraceWriter(path, columns_for(config), config.record_wall_time) as writer:
            try:
                trace = run_single(config, seed, workers, on_record=writer.write)
                meta.update(status="ok", stop_reason=trace.meta.get("stop_reason", "budget"))
                rep = ReplicateResult(path, seed, "ok")
            except (RunFailed, EnKFError) as exc:
                cause = exc.cause if isinstance(exc, RunFailed) else exc
                if isinstance(cause, ConfigError):
                    raise
                meta.update(status="failed", error=f"{type(cause).__name__}: {cause}",
                            traceback=traceback.format_exception_only(type(cause), cause))
                rep = ReplicateResult(path, seed, "failed", str(cause), isinstance(cause, NumericError))
        meta["records"] = writer.rows
        write_sidecar(path.with_suffix(".json"), meta)
        result.replicates.append(rep)
        if log:
            log(f"{directory.name} rep {r}: {rep.status} ({writer.rows} records)")
    return result


def run_sweep(config: ExperimentConfig, out_dir, workers: int = 1, log=None) -> dict[str, ExperimentResult]:
    """Run every point of the config's sweep block under ``out_dir/<name>/<point>``."""
    results = {}
    for assignment, point in expand_sweep(config):
        label = point_label(assignment)
        results[label] = run_experiment(point, Path(out_dir) / config.name, workers, label, log)
    return results
