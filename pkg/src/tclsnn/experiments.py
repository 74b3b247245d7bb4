"""Latency sweeps and alpha comparisons, emitted as CSV."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np

from .architectures import build_architecture
from .converter import (ActivationStats, NormFactorStrategy, collect_activation_stats,
                        collect_norm_factors, normalize, output_norm_factor)
from .fusion import fuse_model
from .snn import SimConfig, evaluate_snn
from .tcl import lambdas as clip_lambdas
from .trainer import OptimizerConfig, evaluate, train

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["strategy", "T", "ann_acc", "snn_acc", "conv_loss_pp", "mean_rate", "wall_ms"]
RAW_COLUMNS = ["ann_acc_raw", "snn_acc_raw", "conv_loss_pp_raw", "mean_rate_raw"]
ALPHA_COLUMNS = ["alpha", "T", "ann_acc", "snn_acc", "conv_loss_pp", "mean_lambda", "lambdas"]


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


@dataclass
class SweepRecord:
    strategy: str
    T: int
    ann_acc: float  # percent
    snn_acc: float  # percent
    mean_rate: float
    wall_ms: float

    @property
    def conv_loss_pp(self):
        return self.ann_acc - self.snn_acc

    def printed(self):
        """The 2-decimal CSV fields; the printed loss is the difference of the printed accuracies."""
        ann, snn = f"{self.ann_acc:.2f}", f"{self.snn_acc:.2f}"
        return ann, snn, f"{float(ann) - float(snn):.2f}"


def sweep_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS + RAW_COLUMNS)
    for r in records:  # already grouped by strategy and in T order
        ann, snn, loss = r.printed()
        w.writerow([r.strategy, r.T, ann, snn, loss, f"{r.mean_rate:.4f}", f"{r.wall_ms:.0f}",
                    repr(r.ann_acc), repr(r.snn_acc), repr(r.conv_loss_pp), repr(r.mean_rate)])
    return buf.getvalue()


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_latency_sweep(model, calib, test, T_list, strategy="tcl", ann_acc=None,
                      stats: ActivationStats | None = None, deterministic=False,
                      batch_size=500, dtype=np.float32):
    """Convert ``model`` once and simulate ``test`` for every latency in ``T_list``.

    All latencies come from a single run of ``max(T_list)`` steps read out at
    each ``T``; the dynamics up to step ``T`` do not depend on later steps.
    ``deterministic`` writes 0 for wall time so reruns compare byte-for-byte.
    """
    if isinstance(strategy, str):
        strategy = NormFactorStrategy.parse(strategy)
    T_list = sorted({int(t) for t in T_list})
    if not T_list:
        raise ValueError("T_list is empty")
    if ann_acc is None:
        ann_acc = _stage("ann-eval", evaluate, model, test)
    fused = _stage("fuse", fuse_model, model)
    if strategy.needs_calibration and stats is None:
        stats = _stage("calibrate", collect_activation_stats, fused, calib)
    lams = _stage("norm-factors", collect_norm_factors, fused, strategy, calib, stats)
    out_lam = _stage("norm-factors", output_norm_factor, fused, lams, calib, strategy)
    net = _stage("normalize", normalize, fused, lams, out_lam, strategy.name)
    cfg = SimConfig(T=T_list[-1], checkpoints=tuple(T_list), dtype=dtype, batch_size=batch_size)
    ev = _stage("simulate", evaluate_snn, net, test, cfg)
    records = []
    for t in T_list:
        wall = 0.0 if deterministic else ev.elapsed[t] * 1000.0
        records.append(SweepRecord(strategy.name, t, 100.0 * ann_acc, 100.0 * ev.accuracies[t],
                                   ev.mean_rate(t), wall))
        log.info("%s T=%d ann=%.2f snn=%.2f", strategy.name, t, 100 * ann_acc,
                 100 * ev.accuracies[t])
    return records, net


@dataclass
class AlphaRun:
    alpha: float
    graph: object
    report: object
    ann_acc: float
    lambdas: list
    snn_acc: dict  # T -> accuracy

    @property
    def mean_lambda(self):
        return float(np.mean(self.lambdas)) if self.lambdas else float("nan")


def alpha_csv(runs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ALPHA_COLUMNS)
    for run in runs:
        for t in sorted(run.snn_acc):
            ann, snn = f"{100 * run.ann_acc:.2f}", f"{100 * run.snn_acc[t]:.2f}"
            w.writerow([repr(run.alpha), t, ann, snn, f"{float(ann) - float(snn):.2f}",
                        f"{run.mean_lambda:.4f}", ";".join(repr(v) for v in run.lambdas)])
    return buf.getvalue()


def run_alpha_comparison(arch, train_set, test_set, alphas, T_list, cfg: OptimizerConfig,
                         input_shape=None, num_classes=10, seed=None, deterministic=True):
    """Train one TCL model per alpha from the same seed and simulate each at ``T_list``."""
    if len(alphas) < 2:
        raise ValueError("alpha comparison needs at least two alpha values")
    seed = cfg.seed if seed is None else seed
    input_shape = input_shape or train_set.sample_shape
    runs = []
    for alpha in alphas:
        graph = build_architecture(arch, input_shape, num_classes, seed=seed)
        report = train(graph, train_set, test_set, replace(cfg, alpha=float(alpha), seed=seed))
        ann = evaluate(graph, test_set)
        records, _ = run_latency_sweep(graph, train_set, test_set, T_list, "tcl", ann_acc=ann,
                                       deterministic=deterministic)
        runs.append(AlphaRun(float(alpha), graph, report, ann, clip_lambdas(graph),
                             {r.T: r.snn_acc / 100.0 for r in records}))
    return runs
