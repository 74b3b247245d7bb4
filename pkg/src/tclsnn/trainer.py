"""Momentum SGD for weights plus the plain L2-regularized update for clip ceilings."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .tcl import LAMBDA_MIN, Clip, clip_layers
from .tensor import BatchNorm, NonFiniteError, softmax_cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, detail="loss is not finite"):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch, self.step = epoch, step


@dataclass
class OptimizerConfig:
    eta: float = 0.01
    alpha: float = 5e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    schedule: tuple = ((15, 0.1), (25, 0.1))
    epochs: int = 30
    batch_size: int = 64
    seed: int = 42

    def __post_init__(self):
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("alpha and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {epochs}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def learning_rate(self, epoch):
        lr = self.eta
        for start, mult in self.schedule:
            if epoch >= start:
                lr *= mult
        return lr


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)  # one list of clip ceilings per epoch
    lr: list = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.train_loss)

    def to_csv(self):
        """Per-epoch rows; floats are written with ``repr`` so reruns compare byte-for-byte."""
        n_clip = len(self.lambdas[0]) if self.lambdas else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc"]
                   + [f"lambda_{i}" for i in range(n_clip)])
        for e in range(self.epochs):
            w.writerow([e, repr(self.lr[e]), repr(self.train_loss[e]), repr(self.train_acc[e]),
                        repr(self.test_loss[e]), repr(self.test_acc[e])]
                       + [repr(v) for v in self.lambdas[e]])
        return buf.getvalue()

    def to_dict(self):
        return asdict(self)


def lambda_update(lam, eta, alpha, grad_lambda):
    """One step of ``lam - eta*alpha*lam - eta*grad``, floored at ``LAMBDA_MIN``."""
    if not lam > 0:
        raise ValueError(f"clip ceiling must be positive, got {lam}")
    return max(lam - eta * alpha * lam - eta * grad_lambda, LAMBDA_MIN)


def sgd_update(p, g, lr, momentum=0.0, velocity=None, weight_decay=0.0):
    """Update ``p`` in place with momentum SGD and return the new velocity.

    The first step seeds the velocity with the raw gradient.
    """
    if weight_decay:
        g = g + weight_decay * p
    if momentum:
        velocity = g.copy() if velocity is None else momentum * velocity + g
        g = velocity
    p -= (lr * g).astype(p.dtype, copy=False)
    return velocity


def evaluate(graph, dataset, batch_size=1000, return_loss=False):
    """Argmax accuracy in eval mode; ties go to the lowest class index."""
    correct, loss_sum = 0, 0.0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = dataset.labels[i:i + batch_size]
        logits = graph.forward(x, "eval")
        correct += int((np.argmax(logits, axis=1) == y).sum())
        if return_loss:
            loss_sum += softmax_cross_entropy(logits, y)[0] * len(y)
    n = max(len(dataset), 1)
    acc = correct / n
    return (acc, loss_sum / n) if return_loss else acc


def _decayed(layer, name):
    # ordinary L2 decay covers conv/dense weights only, never BN affine terms or biases
    return name == "weight" and not isinstance(layer, BatchNorm)


def train(graph, train_set, test_set, cfg: OptimizerConfig, progress=None):
    """Train ``graph`` in place and return the per-epoch report.

    ``progress`` is an optional callable receiving ``(epoch, report)``.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    velocity = {}
    clips = clip_layers(graph)
    report = TrainReport()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            try:
                logits = graph.forward(x, "train")
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            loss, grad = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, step)
            graph.backward(grad.astype(logits.dtype, copy=False))
            loss_sum += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == y).sum())
            for li, layer in enumerate(graph.layers):
                if isinstance(layer, Clip):
                    layer.lam.value = lambda_update(layer.lam.value, lr, cfg.alpha, layer.lam.grad)
                    continue
                for name, p in layer.params.items():
                    decay = cfg.weight_decay if _decayed(layer, name) else 0.0
                    velocity[(li, name)] = sgd_update(p, layer.grads[name], lr, cfg.momentum,
                                                      velocity.get((li, name)), decay)
        report.lr.append(lr)
        report.train_loss.append(loss_sum / n)
        report.train_acc.append(correct / n)
        if test_set is not None and len(test_set):
            acc, tloss = evaluate(graph, test_set, return_loss=True)
        else:
            acc, tloss = float("nan"), float("nan")
        report.test_acc.append(acc)
        report.test_loss.append(tloss)
        report.lambdas.append([c.lam.value for c in clips])
        log.info("epoch %d lr=%g loss=%.4f test_acc=%.4f lambdas=%s", epoch, lr,
                 loss_sum / n, acc, ["%.3f" % c.lam.value for c in clips])
        if progress is not None:
            progress(epoch, report)
    return report
