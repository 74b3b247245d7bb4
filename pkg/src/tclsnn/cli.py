"""Command-line driver: ``tclsnn <command> [options]``.

Options come from three layers, later ones winning: built-in defaults, a flat
``key=value`` file given by ``--config``, then explicit flags. The resolved
configuration is written next to each run's outputs as ``<output>.config``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys

import numpy as np

from .architectures import SpecError, build_architecture
from .converter import ConversionError, NormFactorStrategy, convert
from .data import DatasetError, load_dataset
from .experiments import StageError, alpha_csv, run_alpha_comparison, run_latency_sweep, sweep_csv
from .fusion import fuse_model
from .modelfile import ModelFileError, load_model, save_model
from .snn import SimConfig, evaluate_snn
from .tensor import GraphError, NonFiniteError, ShapeError
from .trainer import OptimizerConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("tclsnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULTS = {
    "dataset": "mnist",
    "data_dir": "data/mnist",
    "arch": "cnet",
    "seed": 42,
    "eta": 0.01,
    "alpha": 5e-4,
    "weight_decay": 5e-4,
    "momentum": 0.9,
    "epochs": 30,
    "batch_size": 64,
    "schedule": "15:0.1,25:0.1",
    "lambda_init": 4.0,
    "strategy": "tcl",
    "calib_samples": 10000,
    "T": "100",
    "alphas": "1e-4,1e-3",
    "limit": 0,
    "deterministic": False,
}

# option name -> (type, help); every command accepts the subset it lists below
OPTIONS = {
    "dataset": (str, "mnist or cifar10"),
    "data_dir": (str, "directory holding the dataset files"),
    "arch": (str, "cnet, mlp, or mlp-784-100-10 style size list"),
    "seed": (int, "random seed (default 42)"),
    "eta": (float, "initial learning rate"),
    "alpha": (float, "L2 penalty on clip ceilings"),
    "weight_decay": (float, "L2 penalty on conv/dense weights"),
    "momentum": (float, "SGD momentum for weights"),
    "epochs": (int, "training epochs"),
    "batch_size": (int, "minibatch size"),
    "schedule": (str, "learning-rate drops as epoch:factor,epoch:factor"),
    "lambda_init": (float, "initial clip ceiling"),
    "strategy": (str, "norm factors: tcl, max, or percentile such as p99.9"),
    "calib_samples": (int, "training samples used for calibration"),
    "T": (str, "latency, or comma-separated latencies for sweeps"),
    "alphas": (str, "comma-separated alpha values"),
    "limit": (int, "evaluate only the first N test samples (0 = all)"),
}

COMMANDS = {
    "train": ("train a clipped ANN and save it",
              ["dataset", "data_dir", "arch", "seed", "eta", "alpha", "weight_decay", "momentum",
               "epochs", "batch_size", "schedule", "lambda_init"]),
    "fuse": ("fold batch normalization into the preceding layers", []),
    "convert": ("convert a trained ANN into a spiking network",
                ["dataset", "data_dir", "strategy", "calib_samples"]),
    "simulate": ("run a converted network on the test set", ["dataset", "data_dir", "T", "limit"]),
    "sweep": ("convert once per strategy and record accuracy over latencies",
              ["dataset", "data_dir", "strategy", "T", "calib_samples", "limit"]),
    "alpha-compare": ("train one model per alpha and compare SNN accuracy",
                      ["dataset", "data_dir", "arch", "seed", "eta", "weight_decay", "momentum",
                       "epochs", "batch_size", "schedule", "alphas", "T", "limit"]),
    "eval": ("test accuracy of an ANN or converted model", ["dataset", "data_dir", "T", "limit"]),
}

NEEDS_MODEL = {"fuse", "convert", "simulate", "sweep", "eval"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="tclsnn", description="Clipped-ANN training and spiking conversion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.add_argument("--out", "-o", help="output path")
        if name in NEEDS_MODEL:
            p.add_argument("--model", "-m", help="input model file")
        for opt in opts:
            typ, h = OPTIONS[opt]
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, type=typ, default=None, help=h)
        if name in ("sweep", "alpha-compare"):
            p.add_argument("--deterministic", action="store_const", const=True, default=None,
                           help="write 0 for wall time so reruns are byte-identical")
    return parser


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(key, value):
    if key == "deterministic":
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"deterministic: expected a boolean, got {value!r}")
    typ = OPTIONS[key][0] if key in OPTIONS else type(DEFAULTS.get(key, ""))
    try:
        return typ(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def resolve_config(args):
    """Defaults, then the config file, then flags; only keys the command uses are kept."""
    keys = list(COMMANDS[args.command][1])
    if args.command in ("sweep", "alpha-compare"):
        keys.append("deterministic")
    cfg = {k: DEFAULTS[k] for k in keys}
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in cfg:
                raise UsageError(f"{args.config}: key {key!r} is not used by {args.command!r}")
            cfg[key] = _coerce(key, value)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    return cfg


def config_text(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]


def _write_config(out, command, cfg):
    with open(out + ".config", "w", encoding="utf-8") as f:
        f.write(f"# tclsnn {command}\n" + config_text(cfg))


def _float_list(text, key):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{key}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{key}: empty list")
    return vals


def _int_list(text, key):
    vals = _float_list(text, key)
    if any(v != int(v) or v < 1 for v in vals):
        raise UsageError(f"{key}: expected positive integers, got {text!r}")
    return [int(v) for v in vals]


def _schedule(text):
    out = []
    for part in filter(None, (p.strip() for p in str(text).split(","))):
        try:
            epoch, factor = part.split(":")
            out.append((int(epoch), float(factor)))
        except ValueError:
            raise UsageError(f"schedule: expected epoch:factor pairs, got {part!r}") from None
    return tuple(out)


def _optimizer(cfg, alpha=None):
    try:
        return OptimizerConfig(eta=cfg["eta"], alpha=cfg.get("alpha", 0.0) if alpha is None else alpha,
                               weight_decay=cfg["weight_decay"], momentum=cfg["momentum"],
                               schedule=_schedule(cfg["schedule"]), epochs=cfg["epochs"],
                               batch_size=cfg["batch_size"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _data(cfg, split, limit_key="limit"):
    ds = load_dataset(cfg["dataset"], cfg["data_dir"], split)
    limit = cfg.get(limit_key, 0) if split == "test" else 0
    return ds.subset(limit) if limit else ds


def _calib(cfg):
    train_set = _data(cfg, "train")
    n = min(cfg["calib_samples"], len(train_set))
    return train_set.subset(n)


def _require(args, *names):
    for name in names:
        if not getattr(args, name):
            raise UsageError(f"--{name} is required for {args.command}")


def _emit(text, out):
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(args, cfg):
    _require(args, "out")
    opt = _optimizer(cfg)
    train_set, test_set = _data(cfg, "train"), _data(cfg, "test")
    graph = build_architecture(cfg["arch"], train_set.sample_shape, train_set.num_classes,
                               seed=cfg["seed"], lambda_init=cfg["lambda_init"])
    report = train(graph, train_set, test_set, opt)
    save_model(args.out, graph, {"seed": cfg["seed"], "config_hash": config_hash(cfg),
                                 "command": "train", "test_acc": report.test_acc[-1]})
    _emit(report.to_csv(), args.out + ".report.csv")
    _write_config(args.out, "train", cfg)
    print(f"test accuracy {100 * report.test_acc[-1]:.2f}%  clip ceilings "
          + " ".join(f"{v:.4f}" for v in report.lambdas[-1]))


def cmd_fuse(args, cfg):
    _require(args, "model", "out")
    graph = load_model(args.model)
    fused = fuse_model(graph)
    save_model(args.out, fused, {"fused_from": os.path.basename(args.model)})
    _write_config(args.out, "fuse", cfg)


def cmd_convert(args, cfg):
    _require(args, "model", "out")
    strategy = _strategy(cfg)
    graph = load_model(args.model)
    calib = _calib(cfg) if strategy.needs_calibration or strategy.kind == "tcl" else None
    net = convert(graph, strategy, calib)
    save_model(args.out, net, {"converted_from": os.path.basename(args.model),
                               "config_hash": config_hash(cfg)})
    _write_config(args.out, "convert", cfg)
    print("norm factors " + " ".join(f"{v:.4f}" for v in net.lambdas)
          + f"  output {net.output_lambda:.4f}")


def _strategy(cfg):
    try:
        return NormFactorStrategy.parse(cfg["strategy"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _snn_lines(net, test_set, T_list):
    ev = evaluate_snn(net, test_set, SimConfig(T=max(T_list), checkpoints=tuple(T_list)))
    return [f"T={t} snn_acc={100 * ev.accuracies[t]:.2f}% mean_rate={ev.mean_rate(t):.4f}"
            for t in sorted(T_list)]


def cmd_simulate(args, cfg):
    _require(args, "model")
    net = load_model(args.model)
    if not hasattr(net, "spiking_layers"):
        raise UsageError(f"{args.model} is not a converted spiking model; run convert first")
    lines = _snn_lines(net, _data(cfg, "test"), _int_list(cfg["T"], "T"))
    _emit("\n".join(lines) + "\n", args.out)
    if args.out:
        _write_config(args.out, "simulate", cfg)


def cmd_eval(args, cfg):
    _require(args, "model")
    model = load_model(args.model)
    test_set = _data(cfg, "test")
    if hasattr(model, "spiking_layers"):
        lines = _snn_lines(model, test_set, _int_list(cfg["T"], "T"))
    else:
        lines = [f"ann_acc={100 * evaluate(model, test_set):.2f}%"]
    _emit("\n".join(lines) + "\n", args.out)


def cmd_sweep(args, cfg):
    _require(args, "model")
    graph = load_model(args.model)
    test_set = _data(cfg, "test")
    T_list = _int_list(cfg["T"], "T")
    strategies = [s.strip() for s in cfg["strategy"].split(",") if s.strip()]
    for s in strategies:
        _strategy({"strategy": s})
    calib = _calib(cfg)
    ann = evaluate(graph, test_set)
    records = []
    for s in strategies:
        recs, _ = run_latency_sweep(graph, calib, test_set, T_list, s, ann_acc=ann,
                                    deterministic=cfg["deterministic"])
        records += recs
    _emit(sweep_csv(records), args.out)
    if args.out:
        _write_config(args.out, "sweep", cfg)


def cmd_alpha_compare(args, cfg):
    _require(args, "out")
    train_set, test_set = _data(cfg, "train"), _data(cfg, "test")
    alphas = _float_list(cfg["alphas"], "alphas")
    if len(alphas) < 2:
        raise UsageError("alphas: need at least two values")
    runs = run_alpha_comparison(cfg["arch"], train_set, test_set, alphas,
                                _int_list(cfg["T"], "T"), _optimizer(cfg, alpha=alphas[0]),
                                deterministic=cfg["deterministic"])
    _emit(alpha_csv(runs), args.out)
    _write_config(args.out, "alpha-compare", cfg)


HANDLERS = {"train": cmd_train, "fuse": cmd_fuse, "convert": cmd_convert, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "alpha-compare": cmd_alpha_compare, "eval": cmd_eval}


def _exit_code(exc):
    if isinstance(exc, StageError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, (TrainingDiverged, NonFiniteError, FloatingPointError)):
        return EXIT_DIVERGED
    if isinstance(exc, (DatasetError, ModelFileError, OSError, ShapeError, GraphError)):
        return EXIT_DATA
    if isinstance(exc, (UsageError, SpecError, ConversionError, ValueError)):
        return EXIT_USAGE
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        np.seterr(over="ignore", invalid="ignore")
        HANDLERS[args.command](args, cfg)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"tclsnn {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
