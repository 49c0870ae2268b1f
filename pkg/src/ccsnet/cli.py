"""Command-line front end.

Subcommands: ``mnist-sample``, ``train``, ``transform``, ``eval``,
``cluster``, ``features`` and ``demo1d``. Every CSV and text report starts
with a ``# ccsnet ...`` provenance line listing the command's settings.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import re
import sys
from pathlib import Path

import numpy as np

from ccsnet import ccs as ccs_mod
from ccsnet.cluster import ClusterConfig, ClusterReduction, OutputReduction, reduce_output, sweep_k, write_sweep_csv
from ccsnet.data import Dataset, load_dataset, load_mnist, save_dataset, subset, write_mnist_sample
from ccsnet.errors import FormatError, NumericError, ShapeError
from ccsnet.features import export_maps, extract_features
from ccsnet.nn import (
    TrainConfig,
    accuracy,
    init_cnn,
    init_mlp,
    load_network,
    save_network,
    train,
)
from ccsnet.oned import run_demo

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_arch(text: str):
    """``WIDTHxDEPTH`` (optionally ``relu-`` prefixed) or ``cnn``.

    Returns (kind, hidden_sizes, activation_or_None).
    """
    t = text.strip().lower()
    act = None
    if t.startswith("relu-"):
        act, t = "relu", t[5:]
    if t == "cnn":
        return "cnn", [], act
    m = re.fullmatch(r"(\d+)x(\d+)", t)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise UsageError(f"bad architecture {text!r}; expected WIDTHxDEPTH (e.g. 200x2) or cnn")
    return "mlp", [int(m.group(1))] * int(m.group(2)), act


def provenance(cmd, args) -> str:
    skip = {"func", "command", "config", "threads"}
    items = sorted((k, v) for k, v in vars(args).items() if k not in skip)
    return f"ccsnet {cmd} " + " ".join(f"{k}={v}" for k, v in items)


def _write_csv(path, header, rows, prov):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {prov}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "" if x is None else repr(float(x))


# ----------------------------------------------------------------- data args


def _add_data_args(p, test=True):
    p.add_argument("--data", help="directory holding MNIST IDX files")
    p.add_argument("--anchors", help="DSB1 dataset file used instead of --data train split")
    p.add_argument("--subset", type=int, help="stratified training subset size")
    p.add_argument("--subset-seed", type=int, default=0)
    if test:
        p.add_argument("--test-subset", type=int, help="stratified test subset size")
        p.add_argument("--no-test", action="store_true", help="skip the test split")


def _train_data(args) -> Dataset:
    if args.anchors and args.data and args.subset is not None:
        raise UsageError("--anchors conflicts with --subset")
    if args.anchors:
        return load_dataset(args.anchors)
    if not args.data:
        raise UsageError("need --data DIR or --anchors FILE")
    data = load_mnist(args.data, "train")
    if args.subset is not None:
        data = subset(data, args.subset, args.subset_seed)
    return data


def _test_data(args) -> Dataset | None:
    if getattr(args, "no_test", False) or not args.data:
        return None
    data = load_mnist(args.data, "test")
    if args.test_subset is not None:
        data = subset(data, args.test_subset, args.subset_seed)
    return data


# ------------------------------------------------------------------ commands


def cmd_mnist_sample(args):
    n_train, n_test = write_mnist_sample(args.out, args.n_test)
    print(f"wrote {n_train} training and {n_test} test digits to {args.out}")


def cmd_train(args):
    kind, hidden, arch_act = parse_arch(args.arch)
    if arch_act and args.activation and args.activation != arch_act:
        raise UsageError(f"--arch {args.arch} conflicts with --activation {args.activation}")
    act = arch_act or args.activation or "sigmoid"
    data = _train_data(args)
    test = _test_data(args)
    if kind == "cnn":
        if data.input_dim != 784:
            raise ShapeError("the cnn architecture expects 28x28 inputs")
        net = init_cnn(output_dim=data.n_classes, activation=act, seed=args.seed)
    else:
        net = init_mlp(data.input_dim, hidden, data.n_classes, act, seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        dropout=args.dropout,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    rows = []

    def log(epoch, loss, current):
        acc = accuracy(current, test) if test is not None else None
        rows.append([epoch, repr(float(loss)), _fmt(acc)])
        if args.verbose:
            print(f"epoch {epoch}: loss {loss:.5f}" + ("" if acc is None else f" test_acc {acc:.4f}"))

    net = train(net, data, cfg, callback=log)
    save_network(net, args.out)
    if args.metrics:
        _write_csv(args.metrics, ["epoch", "train_loss", "test_acc"], rows, provenance("train", args))
    if args.save_train:
        save_dataset(data, args.save_train)
    print(f"saved {args.out}: train_acc {accuracy(net, data):.4f}"
          + ("" if test is None else f" test_acc {accuracy(net, test):.4f}"))


def cmd_transform(args):
    if args.c is not None and args.borrow_c:
        raise UsageError("--c and --borrow-c are mutually exclusive")
    net = load_network(args.model)
    data = _train_data(args)
    if data.input_dim != net.input_dim:
        raise ShapeError(f"model expects {net.input_dim} inputs, data has {data.input_dim}")
    anchors = data.inputs
    report = None
    if args.c is not None:
        if args.c < 0:
            raise UsageError("--c must be non-negative")
        c = np.full(net.output_dim, float(args.c))
    elif args.borrow_c:
        c = ccs_mod.load_ccs(args.borrow_c).c
        if c.shape != (net.output_dim,):
            raise ShapeError(f"{args.borrow_c} has {c.size} c values, model has {net.output_dim} outputs")
    else:
        if net.uses_relu:
            raise UsageError(
                "ReLU networks have no usable Hessian: supply a uniform value with --c "
                "(e.g. --c 5) or copy the constants of a smooth network's CCS file with --borrow-c"
            )
        sample = anchors
        if args.c_sample is not None and args.c_sample < len(anchors):
            pick = np.random.default_rng(args.seed).choice(len(anchors), args.c_sample, replace=False)
            sample = anchors[np.sort(pick)]
        report = ccs_mod.estimate_all_c(net, sample, seed=args.seed)
        c = report.c

    if net.uses_relu:
        audit = "unverified (piecewise-linear activations)"
    elif args.no_audit:
        audit = "skipped"
    else:
        if report is None or report.n_anchors != len(anchors):
            report_full = ccs_mod.estimate_all_c(net, anchors, seed=args.seed)
            lam_min = report_full.lambda_min
            if report is None:
                report = report_full
        else:
            lam_min = report.lambda_min
        ok = bool(np.all(lam_min >= -c))
        audit = "pass" if ok else "FAIL (min Hessian eigenvalue below -c for outputs " + \
            ",".join(str(k) for k in np.flatnonzero(lam_min < -c)) + ")"

    model = ccs_mod.sample_planes(net, anchors, c)
    ccs_mod.save_ccs(model, args.out)
    rng = np.random.default_rng(args.seed)
    pairs = rng.integers(0, len(anchors), size=(min(1000, len(anchors) ** 2), 2))
    hull = max(ccs_mod.hull_violation(model, k, pairs) for k in range(model.output_dim))
    card = f"# {provenance('transform', args)}\n" + ccs_mod.model_card(model, report, audit)
    card += f"hull_max_violation: {hull:.6g}\n"
    if args.report:
        Path(args.report).write_text(card)
    print(card, end="")


def cmd_eval(args):
    net = load_network(args.model)
    model = ccs_mod.load_ccs(args.ccs)
    if model.input_dim != net.input_dim or model.output_dim != net.output_dim:
        raise ShapeError("network and CCS model dimensions differ")
    rows = []
    splits = [("train", _train_data(args)), ("test", _test_data(args))]
    for name, data in splits:
        if data is None:
            continue
        if data.input_dim != net.input_dim:
            raise ShapeError(f"{name} data has {data.input_dim} inputs, model expects {net.input_dim}")
        net_acc = accuracy(net, data)
        ccs_acc = ccs_mod.ccs_accuracy(model, data)
        rows.append([name, repr(net_acc), repr(ccs_acc), repr(ccs_acc - net_acc)])
        print(f"{name}: net_acc {net_acc:.4f} ccs_acc {ccs_acc:.4f} delta {ccs_acc - net_acc:+.4f}")
    if args.out:
        _write_csv(args.out, ["split", "net_acc", "ccs_acc", "delta"], rows, provenance("eval", args))


def _parse_ks(text, n_planes):
    ks = []
    for part in text.split(","):
        part = part.strip().lower()
        if part in ("n", "all"):
            ks.append(n_planes)
        elif part.isdigit() and int(part) >= 1:
            ks.append(int(part))
        else:
            raise UsageError(f"bad --ks entry {part!r}")
    return ks


def cmd_cluster(args):
    model = ccs_mod.load_ccs(args.ccs)
    test = _test_data(args)
    if test is None:
        raise UsageError("cluster needs --data DIR with a test split")
    ks = _parse_ks(args.ks, min(model.support_counts))
    cfg = ClusterConfig(
        k=ks[0], restarts=args.restarts, max_iters=args.max_iters, seed=args.seed,
        tolerance=args.tol, normalize=args.normalize,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def show(row):
        if args.verbose:
            print(f"k={row.k} restart={row.restart} acc={row.accuracy:.4f} inertia={row.inertia:.6g}")

    rows, summary, best = sweep_k(model, test, ks, cfg, on_row=show)
    prov = provenance("cluster", args)
    write_sweep_csv(rows, summary, out / "sweep.csv", out / "sweep_agg.csv", prov)
    for k, red in best.items():
        ccs_mod.save_ccs(red.model, out / f"reduced_k{k}.ccs")
    for k, mean, std in summary:
        print(f"k={k}: mean_acc {mean:.4f} std_acc {std:.4f}")


def cmd_features(args):
    model = ccs_mod.load_ccs(args.ccs)
    if not 0 <= args.cls < model.output_dim:
        raise UsageError(f"--class must lie in [0, {model.output_dim})")
    planes = model.planes[args.cls]
    if args.k is not None:
        cfg = ClusterConfig(k=args.k, restarts=args.restarts, seed=args.seed)
        red, _ = reduce_output(planes, cfg)
    else:
        offsets = planes.values - np.einsum("nd,nd->n", planes.gradients, planes.anchors)
        red = OutputReduction(planes.gradients, offsets, planes.anchors, np.arange(len(planes)), 0.0)
    outputs = [None] * model.output_dim
    outputs[args.cls] = red
    reduction = ClusterReduction(outputs, model)
    shape = None
    if args.shape:
        h, w = args.shape.lower().split("x")
        shape = (int(h), int(w))
    maps = extract_features(reduction, args.cls, select=args.select, seed=args.seed, shape=shape)
    paths = export_maps(maps, args.out_dir, global_norm=args.global_norm, csv_dump=args.csv)
    for p in paths:
        print(p)


def cmd_demo1d(args):
    res = run_demo(args.function, args.planes, args.components, args.seed, args.grid)
    rows = [
        [repr(float(v)) for v in r]
        for r in zip(res.x, res.f, res.convex, res.concave, res.ccs, res.error)
    ]
    summary = (
        f"{args.function}: planes {res.model.n_planes} c {res.model.c:.6g} "
        f"max_error {res.max_error:.6g} at x={res.max_error_at:.6g}"
    )
    if args.out:
        _write_csv(args.out, ["x", "f", "convex", "concave", "ccs", "error"], rows,
                   provenance("demo1d", args) + f" max_error={res.max_error!r} max_error_x={res.max_error_at!r}")
    print(summary)


# ------------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="ccsnet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    parser.add_argument("--config", help="key=value file supplying defaults for the subcommand")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("mnist-sample", help="write IDX files from the MNIST sample bundled with mlxtend")
    p.add_argument("--out", required=True)
    p.add_argument("--n-test", type=int, default=1000)
    p.set_defaults(func=cmd_mnist_sample)

    p = sub.add_parser("train", help="train a network (SGD + momentum + dropout)")
    p.add_argument("--arch", default="200x1")
    p.add_argument("--activation", choices=["sigmoid", "relu"])
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="NNC1 model file")
    p.add_argument("--metrics", help="per-epoch CSV")
    p.add_argument("--save-train", help="write the training set as DSB1")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="estimate c and sample planes into a CCS1 file")
    p.add_argument("--model", required=True)
    p.add_argument("--c", type=float, help="uniform curvature constant")
    p.add_argument("--borrow-c", help="copy per-output c from another CCS1 file")
    p.add_argument("--c-sample", type=int, help="anchors used for c estimation")
    p.add_argument("--no-audit", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_data_args(p, test=False)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("eval", help="network vs CCS accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--ccs", required=True)
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="k-means sweep over plane counts")
    p.add_argument("--ccs", required=True)
    p.add_argument("--ks", required=True, help="comma list, 'all' for every plane")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    _add_data_args(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("features", help="export feature maps as PGM")
    p.add_argument("--ccs", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--k", type=int, help="cluster the class's planes first")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--select", type=int, help="render this many randomly chosen clusters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", help="HxW raster shape (default: square)")
    p.add_argument("--global-norm", action="store_true")
    p.add_argument("--csv", action="store_true", help="also dump raw values")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("demo1d", help="1-D CCS reconstructions")
    p.add_argument("function", choices=["gaussian", "sigmoid", "mixture"])
    p.add_argument("--planes", type=int, default=300)
    p.add_argument("--components", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo1d)
    return parser


def _read_config(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, argv, values):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub.choices), None)
    if command is None:
        raise UsageError("no subcommand given")
    subparser = sub.choices[command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        if key not in known:
            raise UsageError(f"config key {key!r} is not an option of {command}")
        action = known[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
        action.required = False
    subparser.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
        pre.add_argument("--config")
        known, rest = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, rest, _read_config(known.config))
        args = parser.parse_args(rest)
        limit = contextlib.nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=args.threads)
        with limit:
            args.func(args)
    except UsageError as exc:
        print(f"ccsnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"ccsnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"ccsnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ccsnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
