"""Command-line entry point: ``cy2mixer <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import formats
from .data import load_signals, save_signals, synthesize_dataset
from .encodings import BenchConfig, benchmark_preprocessing
from .errors import ConfigError, Cy2MixerError
from .topology import (
    clique_adjacency,
    cycle_basis_paton,
    cycle_stats,
    dense_adjacency,
    random_graph,
    read_edge_csv,
    verify_theorem,
    write_edge_csv,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(args, doc: dict, lines: list[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=2, default=float))
    else:
        print("\n".join(lines))


# --- graph subcommands --------------------------------------------------------


def cmd_preprocess(args) -> int:
    g = read_edge_csv(args.edges, args.num_nodes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.gaussian:
        sigma, thr = args.gaussian
        a = dense_adjacency(g, "gaussian", sigma, thr)
    else:
        a = dense_adjacency(g, "binary")
    basis = cycle_basis_paton(g)
    ac = clique_adjacency(g, basis)
    formats.write_matrix(out / "A.cy2m", a.data)
    formats.write_matrix(out / "A_C.cy2m", ac.data)
    count, avg = cycle_stats(basis)
    doc = {"num_nodes": g.num_nodes, "num_edges": g.num_edges, "count": count, "avg_magnitude": avg,
           "cycles": [list(c) for c in basis]}
    if args.json:
        (out / "cycles.json").write_text(json.dumps(doc, indent=2))
    print(f"wrote {out / 'A.cy2m'} and {out / 'A_C.cy2m'} ({g.num_nodes} nodes, {count} cycles)")
    return 0


def cmd_inspect_cycles(args) -> int:
    g = read_edge_csv(args.edges, args.num_nodes)
    basis = cycle_basis_paton(g)
    count, avg = cycle_stats(basis)
    doc = {"count": count, "avg_magnitude": avg, "cycles": [list(c) for c in basis]}
    lines = [f"count {count}", f"avg_magnitude {avg:.4f}"]
    lines += [f"cycle {i}: " + " ".join(map(str, c)) for i, c in enumerate(basis)]
    _emit(args, doc, lines)
    return 0


def cmd_bench_preproc(args) -> int:
    g = read_edge_csv(args.edges, args.num_nodes)
    signals = load_signals(args.signals) if args.signals else None
    cfg = BenchConfig(dtw=signals is not None and not args.no_dtw, dtw_stride=args.dtw_stride,
                      dtw_top_k=args.dtw_top_k, rwse_k=args.rwse_k, lappe_k=args.lappe_k)
    results = benchmark_preprocessing(g, signals, cfg)
    if args.dump_dir:
        d = Path(args.dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.method in ("clique", "dtw"):
                formats.write_matrix(d / f"{r.method}.cy2m", r.payload)
            else:
                formats.write_tensor(d / f"{r.method}.cy2t", r.payload)
    doc = {"results": [{"method": r.method, "shape": list(r.shape), "elapsed": r.elapsed} for r in results]}
    lines = [f"{'method':<8} {'shape':<12} {'elapsed_s':>12}"]
    lines += [f"{r.method:<8} {'x'.join(map(str, r.shape)):<12} {r.elapsed:>12.6f}" for r in results]
    _emit(args, doc, lines)
    return 0


def cmd_verify_theorem1(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = []
    for trial in range(args.trials):
        g = random_graph(args.nodes, args.edge_prob, rng, connected=True)
        if not verify_theorem(g, args.steps):
            failures.append(trial)
            print(f"trial {trial}: FAIL ({g.num_edges} edges)")
    passed = args.trials - len(failures)
    print(f"{'PASS' if not failures else 'FAIL'} {passed}/{args.trials} "
          f"(nodes={args.nodes}, steps={args.steps}, seed={args.seed})")
    return 0 if not failures else 3


# --- training subcommands -----------------------------------------------------------


def cmd_train(args) -> int:
    from .training import load_config, load_experiment, save_run, train

    cfg = load_config(args.config)
    exp = load_experiment(args.data_dir, cfg)

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  steps {rec.steps:6d}  lr {rec.lr:.2e}  train {rec.train_loss:.4f}  "
              f"val_mae {rec.val_mae:.4f}  val_rmse {rec.val_rmse:.4f}", flush=True)

    params, tlog = train(cfg, exp, progress=progress)
    save_run(args.out, cfg, params, tlog, args.data_dir)
    print(f"best epoch {tlog.best_epoch} val_mae {tlog.best_val_mae:.4f}; saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_experiment, load_run

    cfg, params, meta = load_run(args.checkpoint)
    exp = load_experiment(args.data_dir or meta["data_dir"], cfg)
    rep = evaluate(params, exp.split(args.split), exp.artifacts, cfg.mape_epsilon)
    doc = {"split": args.split, **rep.as_dict()}
    _emit(args, doc, [f"{args.split}: MAE {rep.mae:.4f}  RMSE {rep.rmse:.4f}  MAPE {rep.mape:.2f}%"])
    return 0


def cmd_ablate(args) -> int:
    from .training import ablate, load_config, load_experiment

    cfg = load_config(args.config)
    exp = load_experiment(args.data_dir, cfg)
    seeds = args.seeds if args.seeds is not None else cfg.ablation_seeds
    rows = ablate(cfg, exp, seeds, set(args.variants) if args.variants else None)
    doc = {"seeds": list(seeds), "rows": [vars(r) for r in rows]}
    lines = [f"{'variant':<20} {'MAE':>8} {'RMSE':>8} {'MAPE%':>8}"]
    lines += [f"{r.variant:<20} {r.mae:>8.4f} {r.rmse:>8.4f} {r.mape:>8.2f}" for r in rows]
    _emit(args, doc, lines)
    return 0


def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        spec = yaml.safe_load(Path(args.spec).read_text()) or {}
        if not isinstance(spec, dict):
            raise ConfigError(f"{args.spec}: expected a mapping of synth parameters")
    g, signals = synthesize_dataset(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_csv(g, out / "edges.csv")
    name = "signals.csv" if args.csv else "signals.cy2s"
    save_signals(signals, out / name)
    t, n, c = signals.shape
    print(f"wrote {out / 'edges.csv'} and {out / name} (T={t}, N={n}, C={c}, cycles={len(cycle_basis_paton(g))})")
    return 0


# --- wiring ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cy2mixer", description="Cycle-aware spatiotemporal forecasting lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def graph_args(sp):
        sp.add_argument("--edges", required=True, help="edge CSV with header from,to,cost")
        sp.add_argument("--num-nodes", type=int, default=None, help="default: largest node id + 1")

    sp = sub.add_parser("preprocess", help="write A, A_C and the cycle basis")
    graph_args(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--gaussian", nargs=2, type=float, metavar=("SIGMA", "THRESHOLD"))
    sp.add_argument("--json", action="store_true", help="also write cycles.json")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("inspect-cycles", help="print the cycle basis")
    graph_args(sp)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_inspect_cycles)

    sp = sub.add_parser("bench-preproc", help="time clique, DTW, RWSE and LapPE construction")
    graph_args(sp)
    sp.add_argument("--signals", default=None)
    sp.add_argument("--dtw-stride", type=int, default=1)
    sp.add_argument("--dtw-top-k", type=int, default=None)
    sp.add_argument("--no-dtw", action="store_true")
    sp.add_argument("--rwse-k", type=int, default=16)
    sp.add_argument("--lappe-k", type=int, default=8)
    sp.add_argument("--dump-dir", default=None, help="write each payload as a binary matrix")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_bench_preproc)

    sp = sub.add_parser("verify-theorem1", help="random sweep of the cycle-basis projection property")
    sp.add_argument("--nodes", type=int, required=True)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--steps", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--edge-prob", type=float, default=0.3)
    sp.set_defaults(func=cmd_verify_theorem1)

    sp = sub.add_parser("train", help="train a model and write a run directory")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data-dir", required=True, help="directory with edges.csv and signals.cy2s|csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a run directory on one split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--data-dir", default=None, help="default: the directory used for training")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare the model variants")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=None)
    sp.add_argument("--variants", nargs="+", default=None)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="generate a synthetic cycle-coupled dataset")
    sp.add_argument("--spec", default=None, help="YAML mapping of synth parameters")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--csv", action="store_true", help="write signals.csv instead of signals.cy2s")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except Cy2MixerError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
