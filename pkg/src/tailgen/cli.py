"""Command-line entry point.

Every command writes ``<run.out>/<command>.config`` with the effective
configuration; passing it back with ``--config`` reproduces the outputs.
Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric failure.
"""
import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import checkpoint, clustering, data, scoring
from . import flow as flow_mod
from . import tail as tail_mod
from .config import RunConfig, parse_datasets, parse_value
from .errors import ConfigError, InputError, TailgenError, TrainingAborted
from .numerics import OptimizerConfig, derive_seed

log = logging.getLogger("tailgen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


SHORTCUTS = {
    "out": "run.out",
    "seed": "run.seed",
    "density": "io.density",
    "tail": "io.tail",
    "data": "io.data",
    "input": "io.input",
    "reference": "io.reference",
    "n": "io.n",
}


def build_parser():
    parser = _Parser(prog="tailgen", description="Density, tail-sample generation and anomaly scoring.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in [
        ("train-density", "generate/load data and fit the flow by maximum likelihood"),
        ("train-tail", "train the tail generator against a frozen density"),
        ("generate", "draw boundary samples from a tail checkpoint"),
        ("score", "anomaly scores for the rows of a CSV"),
        ("make-ood", "build an out-of-distribution CSV from an input CSV"),
        ("evaluate", "loss/AUROC/AUPRC report plus proximity summary"),
        ("show-config", "print the effective configuration"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="config file (section.key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--density")
        p.add_argument("--tail")
        p.add_argument("--data")
        p.add_argument("--input")
        p.add_argument("--reference")
        p.add_argument("-n", type=int)
        p.add_argument("--dataset", action="append", default=[], metavar="NAME=PATH",
                       help="evaluate: dataset to report on (repeatable; first is normal)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = RunConfig()
    if args.config:
        cfg.load(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        cfg.set(key.strip(), parse_value(val))
    for flag, key in SHORTCUTS.items():
        val = getattr(args, flag)
        if val is not None:
            cfg.set(key, val)
    if args.dataset:
        parse_datasets(",".join(args.dataset))
        cfg.set("io.datasets", ",".join(args.dataset))
    cfg.absolutize()
    return cfg


def _seed(cfg, name):
    return derive_seed(cfg["run.seed"], name)


def _opt(cfg, section, name):
    kw = cfg.section(section)
    return OptimizerConfig(seed=_seed(cfg, name), **kw)


def _out(cfg, name):
    os.makedirs(cfg["run.out"], exist_ok=True)
    return os.path.join(cfg["run.out"], name)


def _require(cfg, key):
    path = cfg[key]
    if not path:
        raise ConfigError(f"{key} is required for this command")
    if not os.path.exists(path):
        raise InputError(f"{key}: no such file {path}")
    return path


def _beside(cfg, key, anchor_key, name):
    """``cfg[key]`` or ``name`` in the directory of ``cfg[anchor_key]``."""
    if cfg[key]:
        return _require(cfg, key)
    path = os.path.join(os.path.dirname(cfg[anchor_key]), name)
    if not os.path.exists(path):
        raise InputError(f"{key} not set and {path} does not exist")
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer, str)):
        return v
    return f"{float(v):.17g}"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _load_dataset(cfg):
    preset = cfg["data.preset"]
    if preset in data.PRESETS:
        spec = data.PRESETS[preset](seed=_seed(cfg, "data"))
        return data.generate(spec, cfg["data.n"])
    if preset == "csv":
        return data.load_csv(_require(cfg, "data.csv"))
    if preset == "idx":
        return data.load_idx(_require(cfg, "data.idx_images"), _require(cfg, "data.idx_labels"))
    raise ConfigError(f"unknown data.preset {preset!r}")


def _weights(cfg, epsilon):
    kw = cfg.section("loss")
    if kw["w_e"] == "auto":
        kw["w_e"] = tail_mod.entropy_weight_for_level(epsilon)
    kw["M"] = kw["M"] or None
    return tail_mod.LossWeights(**kw)


def _score_cfg(cfg, meta):
    eps = cfg["score.epsilon"]
    if eps == "auto":
        if "epsilon" not in meta:
            raise ConfigError("score.epsilon is auto but the density checkpoint stores no epsilon")
        eps = meta["epsilon"]
    return scoring.ScoreConfig(float(eps), cfg["score.alpha_density"], cfg["score.alpha_distance"], cfg["score.p"])


def cmd_train_density(cfg):
    ds = _load_dataset(cfg)
    if cfg["data.leave_out"]:
        normal, left = data.leave_one_out(ds, cfg["data.leave_out"])
        data.save_matrix_csv(_out(cfg, "leftout.csv"), left)
    else:
        normal = ds
    train, held = data.train_test_split(normal, cfg["data.test_fraction"], _seed(cfg, "split"))
    train_csv = _out(cfg, "train.csv")
    data.save_csv(train_csv, train)
    data.save_csv(_out(cfg, "heldout.csv"), held)

    f = cfg.section("flow")
    model = flow_mod.FlowModel(train.dim, f["layers"], f["hidden"], f["max_log_scale"], f["init"],
                               _seed(cfg, "flow_init"), f["init_scale"])
    try:
        model, trace = flow_mod.fit_mle(model, train.x, _opt(cfg, "flow_opt", "flow_opt"))
        aborted = None
    except TrainingAborted as exc:
        model, trace, aborted = exc.model, exc.trace, exc
    eps = scoring.density_threshold(model, train.x, cfg["score.quantile"])
    meta = {"epsilon": eps, "quantile": cfg["score.quantile"], "train_csv": train_csv}
    checkpoint.save_flow(_out(cfg, "flow.ckpt"), model, meta)
    _write_rows(_out(cfg, "density_trace.csv"), ["epoch", "nll"], [(i, v) for i, v in enumerate(trace)])
    if aborted:
        raise aborted
    log.info("flow: NLL %.4f -> %.4f, epsilon %.6g", trace[0], trace[-1], eps)


def cmd_train_tail(cfg):
    density, meta = checkpoint.load_flow(_require(cfg, "io.density"))
    train = data.load_csv(_beside(cfg, "io.data", "io.density", "train.csv"))
    eps = _score_cfg(cfg, meta).epsilon
    w = _weights(cfg, eps)
    t = cfg.section("tail")
    arch = None if t["arch"] == "auto" else t["arch"]
    tail = tail_mod.init_tail(density, t["init"], _seed(cfg, "tail_init"), arch, t["hidden"], t["depth"])
    try:
        tail, trace = tail_mod.train_tail(tail, density, train.x, w, _opt(cfg, "tail_opt", "tail_opt"))
        aborted = None
    except TrainingAborted as exc:
        tail, trace, aborted = exc.model, exc.trace, exc
    tmeta = {"epsilon": eps, "w_e": w.w_e, "density": cfg["io.density"]}
    checkpoint.save_tail(_out(cfg, "tail.ckpt"), tail, tmeta)
    _write_rows(_out(cfg, "tail_trace.csv"), ["epoch", *tail_mod.TERMS],
                [(i, *(row[k] for k in tail_mod.TERMS)) for i, row in enumerate(trace)])
    if aborted:
        raise aborted
    log.info("tail: L_tot %.6g -> %.6g in %d epochs", trace[0]["L_tot"], trace[-1]["L_tot"], len(trace) - 1)


def cmd_generate(cfg):
    tail, _ = checkpoint.load_tail(_require(cfg, "io.tail"))
    y = tail_mod.generate_boundary(tail, cfg["io.n"], _seed(cfg, "generate"))
    data.save_matrix_csv(_out(cfg, "samples.csv"), y)


def cmd_score(cfg):
    density, meta = checkpoint.load_flow(_require(cfg, "io.density"))
    x = data.load_csv(_require(cfg, "io.input")).x
    ref = data.load_csv(_beside(cfg, "io.reference", "io.density", "train.csv")).x
    sc = _score_cfg(cfg, meta)
    logp = flow_mod.log_density(density, x) if len(x) else np.empty(0)
    dist = data.nearest_distance(x, ref, sc.p) if len(x) else np.empty(0)
    score = sc.alpha_density * -logp + sc.alpha_distance * dist
    inside = np.exp(logp) >= sc.epsilon
    _write_rows(_out(cfg, "scores.csv"), ["score", "log_density", "distance", "in_support"],
                zip(score, logp, dist, (bool(v) for v in inside)))


def cmd_make_ood(cfg):
    x = data.load_csv(_require(cfg, "io.input")).x
    o = data.make_ood(x, cfg["ood.mode"], cfg["ood.magnitude"], _seed(cfg, "ood"), cfg["ood.n"] or None)
    data.save_matrix_csv(_out(cfg, f"{cfg['ood.name']}.csv"), o)


def cmd_evaluate(cfg):
    density, meta = checkpoint.load_flow(_require(cfg, "io.density"))
    tail, tmeta = checkpoint.load_tail(_require(cfg, "io.tail"))
    if tail.dim != density.dim:
        raise ConfigError("tail and density dimensions differ")
    specs = parse_datasets(cfg["io.datasets"])
    if not specs:
        raise ConfigError("io.datasets (or --dataset) is required for evaluate")
    sets = []
    for name, path in specs:
        if not os.path.exists(path):
            raise InputError(f"dataset {name}: no such file {path}")
        sets.append((name, data.load_csv(path).x))
    ref_ds = data.load_csv(_beside(cfg, "io.reference", "io.density", "train.csv"))
    sc = _score_cfg(cfg, meta)
    w = _weights(cfg, tmeta.get("epsilon", sc.epsilon))
    report = scoring.build_report(tail, density, sets, w, sc, reference=ref_ds.x, z_seed=_seed(cfg, "report"))

    ys = tail_mod.generate_boundary(tail, cfg["eval.n_boundary"], _seed(cfg, "eval_boundary"))
    if ref_ds.n_classes >= 2:
        prox = clustering.proximity_batch(ys, ref_ds, w.p, cfg["eval.paired_floor"])
        report.proximity = clustering.proximity_summary(prox)
        _write_rows(_out(cfg, "proximity.csv"), ["k", "R", "floor", "satisfied", "margin"],
                    [(r.k, r.R, r.floor, bool(r.satisfied), r.margin) for r in prox])
    else:
        report.proximity = {"n": 0, "note": "reference has a single class"}
    dens = np.exp(flow_mod.log_density(density, ys))
    report.proximity["band_fraction"] = float(np.mean((dens >= 0.2 * sc.epsilon) & (dens <= 5 * sc.epsilon)))
    report.to_csv(_out(cfg, "report.csv"))
    report.to_text(_out(cfg, "report.json"))
    for r in report.rows:
        log.info("%-16s L_tot=%.6g L_d=%.6g AUROC=%s", r.name, r.L_tot, r.L_d, r.AUROC)


COMMANDS = {
    "train-density": cmd_train_density,
    "train-tail": cmd_train_tail,
    "generate": cmd_generate,
    "score": cmd_score,
    "make-ood": cmd_make_ood,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.dumps())
            return 0
        cfg.save(_out(cfg, f"{args.command}.config"))
        COMMANDS[args.command](cfg)
    except TailgenError as exc:
        print(f"tailgen {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
