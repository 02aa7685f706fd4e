"""Command-line interface.

Exit status is 0 on success, 1 for usage, configuration and I/O problems and
2 for numerical failures (non-finite losses, failed factorizations, failed
self-checks).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import checkpoint, config, counting, data, experiments, ood
from .errors import CheckpointError, ConfigError, FidgpError
from .model import predict

EXIT_USAGE = 1
EXIT_NUMERIC = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_matrix(path):
    """Numeric columns of a CSV with a header row."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise UsageError(f"--inputs: {path} has no data rows")
    try:
        return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise UsageError(f"--inputs: {path}: {exc}") from None


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _resolve_config(args):
    if args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = config.load(args.config)
    elif args.preset:
        cfg = config.preset(args.preset)
    else:
        cfg = config.RunConfig()
    cfg = config.apply_overrides(cfg, _parse_set(args.set)).validate()
    config.seed_override(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _seed(args, default):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FIDGP_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FIDGP_SEED must be an integer, got {env!r}") from None
    return default


# ---------------------------------------------------------------- commands


def cmd_generate_data(args):
    os.makedirs(args.out, exist_ok=True)
    seed = _seed(args, 42)
    if args.task == "regression1d":
        tr, te = data.gen_regression1d(args.n_per_cluster, seed, args.n_grid)
        _write_csv(os.path.join(args.out, "train.csv"), ["x", "y"], zip(tr.x, tr.y))
        _write_csv(os.path.join(args.out, "test.csv"), ["x", "y"], zip(te.x, te.y))
        written = ["train.csv", "test.csv"]
    else:
        sets = data.gen_toy_ood(seed, args.n_train, args.n_test, args.n_ood)
        written = []
        for name, s in zip(("train", "test", "ood"), sets):
            _write_csv(os.path.join(args.out, f"{name}.csv"), ["x0", "x1", "label"],
                       ((a, b, int(c)) for (a, b), c in zip(s.x, s.y)))
            written.append(f"{name}.csv")
    print(f"wrote {', '.join(written)} to {args.out} (seed {seed})")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    res = experiments.run(cfg)
    elapsed = time.perf_counter() - t0
    ckpt = os.path.join(args.out, "checkpoint.json")
    checkpoint.save(ckpt, res.model, cfg)
    experiments.write_trace(os.path.join(args.out, "trace.csv"), res.trace)
    with open(os.path.join(args.out, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(config.dumps(cfg))
    summary = {k: round(v, 6) for k, v in res.metrics.items()}
    print(f"trained {cfg.task} for {cfg.train.epochs} epochs in {elapsed:.1f}s; {summary}")
    print(f"checkpoint: {ckpt}")
    return 0


def _maybe_svg(path, x, mean, std, true_f, train=None):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; skipping --svg", file=sys.stderr)
        return
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.fill_between(x, mean - 3 * std, mean + 3 * std, alpha=0.3, label="mean +/- 3 std")
    ax.plot(x, mean, "--", label="predictive mean")
    if true_f is not None:
        ax.plot(x, true_f, "k", lw=1, label="true f")
    if train is not None:
        ax.plot(train.x, train.y, ".", ms=3, alpha=0.5, label="train")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_predict(args):
    net, cfg = checkpoint.load(args.checkpoint)
    if net.task != "regression":
        raise UsageError("predict writes regression curves; use ood-score for classification checkpoints")
    if args.inputs:
        _, mat = _read_matrix(args.inputs)
        x = mat[:, 0]
        true_f = data.true_function(x)
    else:
        _, te = data.gen_regression1d(cfg.data.n_per_cluster, cfg.seed, cfg.data.n_grid)
        x, true_f = te.x, te.y
    n = args.samples or cfg.train.test_samples
    pred = predict(net, x[:, None], n, np.random.default_rng(_seed(args, cfg.seed)), args.mode)
    mean, std = pred.mean[:, 0], pred.std[:, 0]
    experiments.write_predictions(args.out, x, mean, std, true_f)
    if args.svg:
        tr, _ = data.gen_regression1d(cfg.data.n_per_cluster, cfg.seed, cfg.data.n_grid)
        _maybe_svg(args.svg, x, mean, std, true_f, tr)
    print(f"wrote {len(x)} predictions to {args.out}")
    return 0


def cmd_ood_score(args):
    net, cfg = checkpoint.load(args.checkpoint)
    if net.task != "classification":
        raise UsageError("ood-score needs a toy_classification checkpoint")
    seed = _seed(args, cfg.seed)
    _, test, ood_set = data.gen_toy_ood(cfg.seed, cfg.data.n_train, cfg.data.n_test, cfg.data.n_ood)
    key_layers = args.key_layers or cfg.ood.key_layers
    loss_mode = args.loss_mode or cfg.ood.loss_mode
    projs = ood.build_projectors(net, key_layers, cfg.ood.lambda_proj)
    s_id = ood.score_batch(net, projs, test.x, loss_mode)
    s_ood = ood.score_batch(net, projs, ood_set.x, loss_mode)
    auc = ood.auroc(s_id, s_ood)
    if args.out:
        experiments.write_scores(args.out, np.concatenate([s_id, s_ood]),
                                 ["id"] * len(s_id) + ["ood"] * len(s_ood))
    reports = []
    if not args.no_margin:
        rng = np.random.default_rng(seed)
        for p in projs:
            layer = net.layers[p.layer_id - 1]
            if hasattr(layer, "q"):
                reports.append(ood.margin_report(layer, ood.build_output_projector(layer, cfg.ood.lambda_proj,
                                                                                  p.layer_id),
                                                 args.n_probe or cfg.ood.n_probe, cfg.ood.n_E, rng).as_dict())
    doc = {"auroc": auc, "n_id": len(s_id), "n_ood": len(s_ood), "loss_mode": loss_mode, "margins": reports}
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    print(f"AUROC {auc:.4f} over {len(s_id)} ID / {len(s_ood)} OoD samples")
    for r in reports:
        print(f"layer {r['layer_id']}: S={r['S_estimate']:.4f} ||E||={r['E_norm_estimate']:.4f} "
              f"separation_holds={r['separation_holds']}")
    return 0


def cmd_count_params(args):
    if args.manifest not in counting.MANIFESTS:
        raise UsageError(f"--manifest: unknown manifest {args.manifest!r}; choose from {sorted(counting.MANIFESTS)}")
    t0 = time.perf_counter()
    manifest = counting.MANIFESTS[args.manifest]()
    m_in = args.m_in or args.m
    m_out = args.m_out or args.m
    if not m_in or not m_out:
        raise UsageError("--m (or both --m-in and --m-out) is required")
    rep = counting.compressed_param_count(manifest, m_in, m_out, args.mode, args.k, args.include_flow)
    ref = counting.DENSE_RESNET18_CIFAR100 if args.manifest == "resnet18" else rep.dense_reference
    out = {
        "manifest": args.manifest,
        "m_in": m_in,
        "m_out": m_out,
        "mode": args.mode,
        "transforms": rep.transforms,
        "variational": rep.variational,
        "matheron_extra": rep.matheron_extra,
        "dense": rep.dense,
        "bias_norm": rep.bias_norm,
        "total": rep.total,
        "flow": rep.flow,
        "dense_reference": ref,
        "compression": rep.compression(ref),
        "seconds": time.perf_counter() - t0,
    }
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        print(f"{args.manifest} M_in={m_in} M_out={m_out} ({args.mode})")
        print(f"  total        {rep.total:>12,}  ({rep.total / 1e6:.2f}M)")
        print(f"  dense        {ref:>12,}  ({ref / 1e6:.2f}M)")
        print(f"  compression  {100 * rep.compression(ref):.1f}%")
        if args.include_flow:
            print(f"  flow params  {rep.flow:>12,}  (not in total)")
    return 0


def cmd_selfcheck(args):
    from .selfcheck import run_all

    results = run_all(_seed(args, 0))
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="fidgp", description="Inducing-weight Bayesian layers with flow priors.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed and FIDGP_SEED")
        sp.set_defaults(fn=fn)
        return sp

    g = add("generate-data", cmd_generate_data, "write synthetic datasets as CSV")
    g.add_argument("--task", choices=config.TASKS, default="regression1d")
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-cluster", type=int, default=100)
    g.add_argument("--n-grid", type=int, default=200)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--n-ood", type=int, default=500)

    t = add("train", cmd_train, "train a model and write checkpoint and trace")
    t.add_argument("--config")
    t.add_argument("--preset", choices=sorted(config.PRESETS))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    t.add_argument("--out", required=True)

    pr = add("predict", cmd_predict, "write predictive mean and std on a grid")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--inputs", help="CSV whose first column holds x values")
    pr.add_argument("--out", required=True)
    pr.add_argument("--samples", type=int)
    pr.add_argument("--mode", choices=("reparam", "matheron", "mean"), default="reparam")
    pr.add_argument("--svg", help="also render the curves as SVG (needs matplotlib)")

    o = add("ood-score", cmd_ood_score, "score ID and OoD points and report margins")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--out", help="scores CSV")
    o.add_argument("--report", help="JSON report with AUROC and margin diagnostics")
    o.add_argument("--loss-mode", choices=("pseudo_label", "uniform", "activation"))
    o.add_argument("--key-layers", type=int, nargs="+")
    o.add_argument("--n-probe", type=int)
    o.add_argument("--no-margin", action="store_true")

    c = add("count-params", cmd_count_params, "storage counts for a shape manifest")
    c.add_argument("--manifest", default="resnet18")
    c.add_argument("--m", type=int, help="inducing size used for both sides")
    c.add_argument("--m-in", type=int)
    c.add_argument("--m-out", type=int)
    c.add_argument("--mode", choices=("reparam", "matheron"), default="reparam")
    c.add_argument("--k", type=int, default=1, help="Matheron samples kept")
    c.add_argument("--include-flow", action="store_true")
    c.add_argument("--json", action="store_true")

    add("selfcheck", cmd_selfcheck, "run the built-in numerical oracle checks")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FidgpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
