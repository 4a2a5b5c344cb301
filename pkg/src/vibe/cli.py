"""Command-line entry point: ``vibe <subcommand> ...``.

Every report is a CSV with a one-line header. Failures exit nonzero and
print a single ``error code=<code> message=<text>`` line to stderr.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, evaluation
from .data import (TrainConfig, load_coupling, load_features, load_params, parse_kv_config,
                   save_coupling, save_features, save_params)
from .em import train, train_baseline
from .errors import VibeError
from .numerics import make_rng
from .preprocess import preprocess, report_rows

log = logging.getLogger("vibe")

DEFAULT_KNN = 50
DEFAULT_DELTA = 0.275


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _read_record(path):
    return attacks.PoisonRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- config handling ------------------------------------------------------

def _config_flags(parser):
    """One optional flag per TrainConfig field; unset flags stay None."""
    g = parser.add_argument_group("training config (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        name = "lambda" if f.name == "lam" else f.name
        typ = {"int": int, "float": float, "str": str}.get(f.type, f.type)
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + f.name, type=typ, default=None)
    g.add_argument("--config", type=Path, help="key = value file; flags win over it")


def _build_config(args):
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_mapping(parse_kv_config(args.config), base=cfg)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if overrides:
        cfg = TrainConfig.from_mapping(overrides, base=cfg)
    return cfg


# --- subcommands ----------------------------------------------------------

def cmd_generate(args):
    rng = make_rng(args.seed)
    if args.layout == "anchored":
        means = attacks.anchored_means(args.classes, args.dim, rng, cos=args.mean_cos)
    else:
        means = attacks.draw_means(args.classes, args.dim, rng)
    fs = attacks.gen_vmf_clusters(args.classes, args.dim, args.n_per_class, args.kappa_gen, rng, means=means)
    save_features(fs, args.out)
    if args.test_out:
        test = attacks.gen_vmf_clusters(args.classes, args.dim, args.test_n_per_class or args.n_per_class,
                                        args.kappa_gen, rng, means=means)
        save_features(test, args.test_out)
    if args.means_out:
        np.savetxt(args.means_out, means, delimiter=",", fmt="%.17g")


def cmd_poison(args):
    fs = load_features(args.input)
    rng = make_rng(args.seed)
    if args.trigger == "offmanifold":
        # Orthogonal to the span of the class means estimated from the data.
        means = np.stack([fs.features[fs.corrupted_labels == c].mean(axis=0)
                          for c in range(fs.num_classes) if np.any(fs.corrupted_labels == c)])
        trigger = attacks.offmanifold_trigger(means, rng)
    else:
        trigger = attacks.random_trigger(fs.dim, rng)
    spec = attacks.AttackSpec(args.kind, trigger, rate=args.rate, target=args.target, blend=args.blend,
                              offmanifold_scale=args.offmanifold_scale)
    out, record = attacks.apply_attack(fs, spec, rng)
    save_features(out, args.out)
    Path(args.record).write_text(json.dumps(record.to_dict(), indent=1) + "\n", encoding="utf-8")


def cmd_preprocess(args):
    fs = load_features(args.input)
    out, report = preprocess(fs, args.knn, fs.num_classes, args.delta, make_rng(args.seed))
    save_features(out, args.out)
    if args.report:
        _write_csv(args.report, ["index", "community", "removed"], report_rows(report, fs.n))
    if args.distances:
        _write_csv(args.distances, ["community", "distance", "chosen"],
                   [(i, _fmt(d), int(i == report.chosen)) for i, d in enumerate(report.distances)])
    log.info("community distances %s; chosen %d; removed %d", np.round(report.distances, 4),
             report.chosen, report.removed_indices.size)


def cmd_train(args):
    fs = load_features(args.input)
    cfg = _build_config(args)
    state = train_baseline(fs, cfg) if args.baseline else train(fs, cfg)
    save_params(state.params, args.params_out)
    if args.dump_coupling:
        save_coupling(state.coupling, args.dump_coupling)
    if args.log:
        _write_csv(args.log, ["iter", "loss", "elbo", "wall_ms"],
                   [(j, _fmt(loss), _fmt(elbo), f"{ms:.3f}") for j, loss, elbo, ms in state.log_rows])


def cmd_eval(args):
    params = load_params(args.params)
    test = load_features(args.test)
    record = _read_record(args.record) if args.record else None
    spec = record.spec if record is not None else None
    coupling = load_coupling(args.coupling) if args.coupling else None
    train_fs = load_features(args.train) if args.train else None
    report = evaluation.evaluate(params, test, spec=spec, coupling=coupling, train_fs=train_fs,
                                 rule=None if record is None else record.rule, mode=args.posterior_mode)
    rows = [("acc", _fmt(report.acc)), ("asr", _fmt(report.asr)),
            ("pseudolabel_agreement", _fmt(report.pseudolabel_agreement)),
            ("rule_argmax_match", _fmt(report.rule_argmax_match))]
    _write_csv(args.out, ["metric", "value"], rows)


def cmd_infer_rules(args):
    params = load_params(args.params)
    table = evaluation.infer_rules(params)
    source = "prototype_surrogate" if args.posterior_mode == "full" else "approx"
    k = table.shape[0]
    truth = _read_record(args.record).rule if args.record else None
    header = ["clean_class"] + [f"y{j}" for j in range(k)] + ["argmax", "truth_argmax", "source"]
    rows = []
    for l in range(k):
        t = "" if truth is None else int(np.argmax(truth[l]))
        rows.append([l] + [_fmt(x) for x in table[l]] + [int(np.argmax(table[l])), t, source])
    _write_csv(args.out, header, rows)


def _parse_grid(items):
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise VibeError(f"bad grid entry {item!r}; expected key=v1,v2,...", code="bad_grid")
        key, values = item.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def cmd_sweep(args):
    train_fs = load_features(args.train)
    test = load_features(args.test)
    spec = _read_record(args.record).spec if args.record else None
    grid = _parse_grid(args.grid)
    rows = evaluation.sweep(grid, _build_config(args), train_fs, test, spec=spec, threads=args.threads)
    cols = evaluation.sweep_columns(grid)
    _write_csv(args.out, cols, [[_fmt(r.get(c)) for c in cols[:-2]] + [f"{r['runtime_s']:.3f}", r["error"]]
                                for r in rows])


# --- parser ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vibe", description="Backdoor-robust EM training on feature embeddings.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample a synthetic vMF dataset")
    g.add_argument("--classes", "-K", type=int, default=5)
    g.add_argument("--dim", "-d", type=int, default=16)
    g.add_argument("--n-per-class", type=int, default=500)
    g.add_argument("--kappa-gen", type=float, default=30.0)
    g.add_argument("--layout", choices=("repelled", "anchored"), default="repelled")
    g.add_argument("--mean-cos", type=float, default=attacks.MAX_MEAN_COS,
                   help="pairwise mean cosine for the anchored layout")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", "-o", type=Path, required=True)
    g.add_argument("--test-out", type=Path)
    g.add_argument("--test-n-per-class", type=int)
    g.add_argument("--means-out", type=Path)
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("poison", parents=[common], help="apply a feature-space attack")
    q.add_argument("--in", dest="input", type=Path, required=True)
    q.add_argument("--out", "-o", type=Path, required=True)
    q.add_argument("--record", type=Path, required=True, help="JSON poison record output")
    q.add_argument("--kind", choices=attacks.ATTACK_KINDS, default=attacks.ALL_TO_ONE)
    q.add_argument("--rate", type=float, default=0.10)
    q.add_argument("--target", type=int, default=0)
    q.add_argument("--blend", type=float, default=0.6)
    q.add_argument("--offmanifold-scale", type=float, default=1.0)
    q.add_argument("--trigger", choices=("random", "offmanifold"), default="random")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_poison)

    r = sub.add_parser("preprocess", parents=[common], help="remove the off-manifold community")
    r.add_argument("--in", dest="input", type=Path, required=True)
    r.add_argument("--out", "-o", type=Path, required=True)
    r.add_argument("--report", type=Path, help="CSV: index, community, removed")
    r.add_argument("--distances", type=Path, help="CSV: per-community distance")
    r.add_argument("--knn", type=int, default=DEFAULT_KNN)
    r.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", parents=[common], help="EM training (or the plain baseline)")
    t.add_argument("--in", dest="input", type=Path, required=True)
    t.add_argument("--params-out", type=Path, required=True)
    t.add_argument("--dump-coupling", type=Path)
    t.add_argument("--log", type=Path, help="CSV training log: iter, loss, elbo, wall_ms")
    t.add_argument("--baseline", action="store_true", help="fix Q to one-hot corrupted labels")
    _config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="ACC / ASR / pseudolabel agreement / rule match")
    e.add_argument("--params", type=Path, required=True)
    e.add_argument("--test", type=Path, required=True)
    e.add_argument("--record", type=Path)
    e.add_argument("--coupling", type=Path)
    e.add_argument("--train", type=Path, help="training set the coupling belongs to")
    e.add_argument("--posterior-mode", choices=("full", "approx"), default="full")
    e.add_argument("--out", "-o", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer-rules", parents=[common], help="recovered label-flip table")
    i.add_argument("--params", type=Path, required=True)
    i.add_argument("--record", type=Path)
    i.add_argument("--posterior-mode", choices=("full", "approx"), default="full")
    i.add_argument("--out", "-o", type=Path, required=True)
    i.set_defaults(func=cmd_infer_rules)

    s = sub.add_parser("sweep", parents=[common], help="grid of train+eval runs")
    s.add_argument("--train", type=Path, required=True)
    s.add_argument("--test", type=Path, required=True)
    s.add_argument("--record", type=Path)
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2,...")
    s.add_argument("--threads", type=int, help="defaults to $VIBE_THREADS or 1")
    s.add_argument("--out", "-o", type=Path, required=True)
    _config_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except VibeError as err:
        print(f"error code={err.code or 'error'} message={err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error code=io message={err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
