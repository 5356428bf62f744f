"""Command-line entry point: ``smoothinf <subcommand> [flags] [key=value ...]``.

Exit status: 0 on success, 1 for configuration or usage errors, 2 for
runtime failures. Every output file is written atomically.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod, data, engine, harness, training
from .errors import ConfigError, ParseError, SmoothInfError
from .noise import NoiseSpec
from .smoothing import SmoothingConfig, smooth_predict

COMMANDS = ("train", "finetune", "attack", "evaluate", "sweep-sigma-m", "sweep-km",
            "sweep-eps", "svm-demo", "dump-config")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="sets run.seed, train.seed and model.init_seed")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--threads", type=int, help="worker threads for seed fan-out (run.threads)")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    parser = _Parser(prog="smoothinf", description="Smoothed inference experiments on desk-scale data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train a base model", "finetune": "fine-tune model.checkpoint",
        "attack": "craft adversarial test inputs against model.checkpoint",
        "evaluate": "clean and adversarial accuracy of one smoothed classifier",
        "sweep-sigma-m": "accuracy over the noise-scale x sample-count grid",
        "sweep-km": "accuracy against PGD/EPGD/SmoothAdv over k x M_b budgets",
        "sweep-eps": "accuracy over attack radii",
        "svm-demo": "linear SVM objective under input noise",
        "dump-config": "print the fully resolved configuration",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    subs["evaluate"].add_argument("--dump-tally", type=int, metavar="INDEX",
                                  help="also write the vote tally of test example INDEX (first seed)")
    return parser


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def resolve_config(args) -> cfgmod.ExperimentConfig:
    try:
        cfg = cfgmod.load_config(args.config, _overrides(args.overrides))
    except ParseError as exc:
        raise ConfigError(str(exc)) from None
    if args.seed is not None:
        cfg = cfgmod.apply_overrides(cfg, {"run.seed": str(args.seed), "train.seed": str(args.seed),
                                           "model.init_seed": str(args.seed)})
    if args.out is not None:
        cfg = replace(cfg, run=replace(cfg.run, out=args.out))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = replace(cfg, run=replace(cfg.run, threads=args.threads))
    return cfg


# -- building blocks -------------------------------------------------------

def build_model(cfg: cfgmod.ExperimentConfig, splits: data.Splits) -> engine.Model:
    m = cfg.model
    noise = None
    if m.noise != "none":
        noise = NoiseSpec(target=m.noise, alpha=m.noise_alpha, learnable=m.noise_learnable)
    if m.arch == "mlp":
        return engine.mlp(splits.input_shape, [int(h) for h in m.hidden], splits.num_classes,
                          seed=m.init_seed, noise=noise)
    if len(splits.input_shape) != 3:
        raise ConfigError("model.arch=cnn needs image inputs (C, H, W)")
    return engine.cnn(splits.input_shape, m.channels, splits.num_classes, seed=m.init_seed, noise=noise)


def _load_checkpoint(cfg) -> engine.Model:
    path = cfg.model.checkpoint
    if not path:
        raise ConfigError("model.checkpoint is required for this command")
    if not Path(path).is_file():
        raise ConfigError(f"model.checkpoint: file {path} does not exist")
    return checkpoint.load(path)


def _model_for_eval(cfg, splits):
    """Load ``model.checkpoint`` or, when it is empty, train one from the config."""
    if cfg.model.checkpoint:
        return _load_checkpoint(cfg), None
    model, log = training.fit(build_model(cfg, splits), splits.train, splits.val, cfg.train)
    return model, log


def _model_id(cfg, model) -> str:
    return cfg.model.id or checkpoint.content_hash(checkpoint.dumps(model))[:12]


def _test_split(cfg, splits):
    x, y = splits.test
    if cfg.run.eval_limit > 0:
        x, y = x[:cfg.run.eval_limit], y[:cfg.run.eval_limit]
    return x, y


def _seeds(cfg) -> list:
    return [cfg.run.seed + i for i in range(cfg.run.num_seeds)]


def _smoothing(cfg) -> SmoothingConfig:
    g = cfg.smoothing
    return SmoothingConfig(M=int(g.Ms[0]), sigma=float(g.sigmas[0]), voting=g.voting, C=g.C)


class _Outputs:
    def __init__(self, cfg, command, args=None):
        self.args = args
        self.dir = Path(cfg.run.out)
        self.cfg = cfg
        self.command = command
        self.files = {}
        self.extra = {}
        self.start = time.perf_counter()

    def write(self, name, payload):
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        checkpoint.atomic_write(path, payload)
        self.files[name] = str(path)
        return path

    def model(self, model, name="model.json"):
        blob = checkpoint.dumps(model)
        self.write(name, blob)
        self.extra["checkpoint_hash"] = checkpoint.content_hash(blob)

    def summary(self, **extra):
        doc = {"command": self.command, "config": cfgmod.to_flat(self.cfg), "outputs": self.files,
               "wall_time": time.perf_counter() - self.start, **self.extra, **extra}
        self.write("summary.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")


# -- commands --------------------------------------------------------------

def cmd_dump_config(cfg, out):
    sys.stdout.write(cfgmod.dump_config(cfg))


def cmd_train(cfg, out):
    splits = data.load_dataset(cfg.dataset)
    model, log = training.fit(build_model(cfg, splits), splits.train, splits.val, cfg.train)
    out.write("train_log.csv", log.to_csv())
    out.model(model)
    out.summary(model_id=_model_id(cfg, model))


def cmd_finetune(cfg, out):
    model = _load_checkpoint(cfg)
    splits = data.load_dataset(cfg.dataset)
    tuned, log = training.finetune(model, splits, cfg.train)
    out.write("train_log.csv", log.to_csv())
    out.model(tuned)
    out.summary(model_id=_model_id(cfg, tuned))


def cmd_attack(cfg, out):
    model = _load_checkpoint(cfg)
    x, y = _test_split(cfg, data.load_dataset(cfg.dataset))
    x_adv = harness.craft(model, x, y, cfg.attack, cfg.run.seed)
    buf = io.BytesIO()
    np.save(buf, x_adv, allow_pickle=False)
    out.write("adversarial.npy", buf.getvalue())
    report = harness.evaluate(model, (x, y), cfg.attack, None, [cfg.run.seed], _model_id(cfg, model))
    out.write("attack.csv", report.to_csv())
    out.summary()


def cmd_evaluate(cfg, out):
    model = _load_checkpoint(cfg)
    split = _test_split(cfg, data.load_dataset(cfg.dataset))
    sm = _smoothing(cfg)
    report = harness.evaluate(model, split, cfg.attack, sm, _seeds(cfg),
                              _model_id(cfg, model), cfg.run.threads)
    out.write("evaluate.csv", report.to_csv())
    index = getattr(out.args, "dump_tally", None)
    if index is not None:
        if not 0 <= index < len(split[1]):
            raise ConfigError(f"--dump-tally index {index} outside the test split")
        seeded = replace(sm, base_seed=harness.smoothing_seed(cfg.run.seed))
        _, tally = smooth_predict(model, split[0][index:index + 1], seeded)
        out.write("tally.csv", tally.to_csv(0))
    out.summary(report_wall_time=report.wall_time)


def _sweep_model(cfg, out):
    splits = data.load_dataset(cfg.dataset)
    model, log = _model_for_eval(cfg, splits)
    if log is not None:
        out.write("train_log.csv", log.to_csv())
        out.model(model)
    return model, _test_split(cfg, splits)


def cmd_sweep_sigma_m(cfg, out):
    model, split = _sweep_model(cfg, out)
    g = cfg.smoothing
    report = harness.sweep_sigma_M(model, split, cfg.attack, g.sigmas, g.Ms, g.voting, g.C,
                                   _seeds(cfg), _model_id(cfg, model), cfg.run.threads)
    out.write("sweep_sigma_m.csv", report.to_csv())
    out.summary(report_wall_time=report.wall_time)


def cmd_sweep_km(cfg, out):
    model, split = _sweep_model(cfg, out)
    s = cfg.sweep
    triples = harness.kM_triples(s.families, s.ks, s.M_bs)
    report = harness.sweep_kM(model, split, triples, cfg.attack, _smoothing(cfg), _seeds(cfg),
                              _model_id(cfg, model), cfg.run.threads)
    out.write("sweep_km.csv", report.to_csv())
    out.summary(report_wall_time=report.wall_time)


def cmd_sweep_eps(cfg, out):
    model, split = _sweep_model(cfg, out)
    report = harness.sweep_epsilon(model, split, cfg.attack, cfg.sweep.epsilons, _smoothing(cfg),
                                   _seeds(cfg), _model_id(cfg, model), cfg.run.threads)
    out.write("sweep_eps.csv", report.to_csv())
    out.summary(report_wall_time=report.wall_time)


def cmd_svm_demo(cfg, out):
    s = cfg.svm
    reports = harness.svm_repetitions(s.repetitions, seed=cfg.run.seed, dim=s.dim, n=s.n,
                                      sigma=s.sigma, trials=s.trials, epsilon=s.epsilon,
                                      separation=s.separation)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(harness.SVM_FIELDS)
    for i, rep in enumerate(reports):
        rec = dict(rep.as_record(), repetition=i)
        writer.writerow([harness._cell(rec[f]) for f in harness.SVM_FIELDS])
    out.write("svm.csv", buf.getvalue())
    inside = sum(r.within for r in reports)
    out.summary(within_fraction=inside / len(reports),
                separable=all(r.separable for r in reports))
    if not all(r.separable for r in reports):
        print("warning: SVM training data is not linearly separable", file=sys.stderr)


HANDLERS = {
    "train": cmd_train, "finetune": cmd_finetune, "attack": cmd_attack, "evaluate": cmd_evaluate,
    "sweep-sigma-m": cmd_sweep_sigma_m, "sweep-km": cmd_sweep_km, "sweep-eps": cmd_sweep_eps,
    "svm-demo": cmd_svm_demo, "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[args.command](cfg, _Outputs(cfg, args.command, args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SmoothInfError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry_point():
    sys.exit(main())
