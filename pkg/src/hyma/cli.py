"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import embeddings as em
from . import ledger
from . import metrics as me
from . import search as se
from .config import RunConfig
from .errors import HymaError
from .objectives import evaluate_connector, load_eval_task
from .store import RunStore

SEARCH_CHOICES = ("hyma", "grid", "random", "unit1", "ask", "autopair", "cgs", "bestguess")


def _context(cfg: RunConfig, hyma: bool = False) -> se.SearchContext:
    zoo, dataset = cfg.load_zoo()
    layouts = cfg.layouts(zoo)
    train = cfg.hyma_train_config() if hyma else cfg.train_config()
    return se.SearchContext(zoo, dataset, layouts, train, cfg.eval_task(dataset))


def cmd_gen_synthetic(args) -> int:
    cfg = RunConfig.load(args.config)
    s = cfg.synthetic_section()
    if s is None:
        raise HymaError("gen-synthetic needs a 'synthetic' zoo section")
    zoo, dataset = cfg.load_zoo()
    out = Path(args.out) if args.out else cfg.output_dir / "zoo"
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for enc in zoo.encoders_a + zoo.encoders_b:
        paths[enc.id] = out / f"{enc.id}.emb"
        em.write_bank(paths[enc.id], dataset.bank(enc.id))
    planted = em.planted_scores(zoo)
    order = [zoo.pair_name(k) for k in me.order_by_metric(dict(enumerate(planted)))]
    em.write_manifest(out / "manifest.json", zoo, paths, split_seed=cfg.seed,
                      val_fraction=float(s.get("val_fraction", 0.125)),
                      count=int(s.get("sample_count", 4096)),
                      extra={"planted_order": order})
    print(f"wrote {len(paths)} banks and {out / 'manifest.json'}")
    print("planted order (best first): " + " > ".join(order))
    return 0


def _advisor(opts: dict):
    if "replies" in opts:
        return se.ScriptedAdvisor(opts["replies"])
    if "endpoint" in opts:
        return se.HttpAdvisor(opts["endpoint"], opts.get("credential_env", "HYMA_ADVISOR_KEY"))
    raise HymaError("strategy 'ask' needs strategies.ask.endpoint or strategies.ask.replies")


def cmd_search(args) -> int:
    cfg = RunConfig.load(args.config)
    store = RunStore(cfg.output_dir)
    name = args.strategy
    opts = cfg.strategy_options(name)
    with store.run(name, cfg.to_dict()) as run:
        if name == "bestguess":
            grid = store.outcomes().get("grid")
            if grid is None:
                raise HymaError("bestguess needs a completed grid outcome in the output directory")
            theta_path = store.run_dir("grid") / "winner_theta.npy"
            if theta_path.exists():
                grid.winner_theta = np.load(theta_path)
            outcome = se.best_guess(grid)
        else:
            ctx = _context(cfg, hyma=(name == "hyma"))
            if name == "grid":
                outcome = se.run_grid_search(ctx)
            elif name == "hyma":
                ckpt = run.dir / "checkpoints" if ctx.config.checkpoint_every else None
                outcome = se.run_hyma_search(ctx, checkpoint_dir=ckpt, **cfg.hyma_options())
            elif name == "random":
                outcome = se.run_random(ctx, int(opts.get("trials", 5)))
            elif name == "unit1":
                outcome = se.run_unit1(ctx)
            elif name == "ask":
                outcome = se.run_ask_advisor(ctx, _advisor(opts),
                                             task_name=opts.get("task_name"),
                                             dataset_name=opts.get("dataset_name", "paired embeddings"))
            elif name == "cgs":
                outcome = se.run_cgs(ctx, float(opts.get("data_fraction", 1 / 3)))
            else:  # autopair
                budget = opts.get("budget_flops")
                if budget is None:
                    hcfg = cfg.hyma_train_config()
                    budget = ledger.hyma_bill(ctx.zoo, ctx.layouts, hcfg, len(ctx.dataset.train),
                                              cfg.hyper_config(ctx.zoo, ctx.layouts))
                outcome = se.run_autopair(ctx, int(budget), int(opts.get("round_epochs", 2)))
            run.append_records(ctx.records)
        run.write_outcome(outcome)
    print(f"{name}: winner {outcome.winner} metric {outcome.winner_metric} flops {outcome.flops_total}")
    print(f"outputs in {store.run_dir(name)}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    zoo, dataset = cfg.load_zoo()
    layouts = cfg.layouts(zoo)
    task = load_eval_task(args.task) if args.task else cfg.eval_task(dataset)
    if args.outcome:
        oc = se.StrategyOutcome.load(args.outcome)
        k = oc.winner if args.pair is None else args.pair
        theta = np.load(Path(args.theta) if args.theta else Path(args.outcome).parent / "winner_theta.npy")
    else:
        if args.pair is None or args.theta is None:
            raise HymaError("eval needs --outcome or both --pair and --theta")
        k, theta = args.pair, np.load(args.theta)
    a, b = zoo.pair(k)
    metric = evaluate_connector(task, dataset.bank(a.id), dataset.bank(b.id), layouts[k], theta)
    print(f"pair {k} ({zoo.pair_name(k)}) {task.kind}@{task.k}: {metric:.6f}")
    return 0


def rank_compare_rows(oracle: se.StrategyOutcome, candidate: se.StrategyOutcome, ks) -> list:
    ref, cand = oracle.metrics(), candidate.metrics()
    if set(ref) != set(cand):
        raise HymaError("outcomes rank different pair sets")
    rows = [{"metric": f"ndcg@{k}", "value": me.ndcg_from_metrics(cand, ref, k)} for k in ks]
    rows.append({"metric": "spearman_rho", "value": me.spearman_rho(cand, ref)})
    return rows


def cmd_rank_compare(args) -> int:
    oracle = se.StrategyOutcome.load(args.oracle)
    cand = se.StrategyOutcome.load(args.candidate)
    ks = args.k or list(me.default_ks(len(oracle.metrics())))
    rows = rank_compare_rows(oracle, cand, ks)
    for r in rows:
        print(f"{r['metric']:>14}  {r['value']:.4f}")
    if args.csv:
        Path(args.csv).write_text(me.rows_to_csv(rows, ["metric", "value"]))
    return 0


def cmd_flops(args) -> int:
    cfg = RunConfig.load(args.config)
    zoo, dataset = cfg.load_zoo()
    layouts = cfg.layouts(zoo)
    bills = ledger.predict_bills(zoo, layouts, cfg.train_config(), len(dataset.train),
                                 hyma_config=cfg.hyma_train_config(),
                                 hyper_config=cfg.hyper_config(zoo, layouts),
                                 random_trials=int(cfg.strategy_options("random").get("trials", 5)),
                                 cgs_fraction=float(cfg.strategy_options("cgs").get("data_fraction", 1 / 3)),
                                 autopair_budget=cfg.strategy_options("autopair").get("budget_flops"))
    bills["per_pair"] = {zoo.pair_name(k): v for k, v in bills["per_pair"].items()}
    print(json.dumps(bills, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    cfg = RunConfig.load(args.config)
    outcomes = RunStore(cfg.output_dir).outcomes()
    if not outcomes:
        raise HymaError(f"no completed outcomes under {cfg.output_dir}")
    print(f"{'strategy':>10} {'winner':>7} {'metric':>9} {'flops':>16}")
    for name, oc in sorted(outcomes.items()):
        metric = "-" if oc.winner_metric is None else f"{oc.winner_metric:.4f}"
        print(f"{name:>10} {oc.winner!s:>7} {metric:>9} {oc.flops_total:>16d}")
    hyma, grid = outcomes.get("hyma"), outcomes.get("grid")
    if hyma and grid:
        bg = outcomes.get("bestguess") or se.best_guess(grid)
        ratios = me.efficiency_ratios(hyma.flops_total, grid.flops_total, bg.flops_total)
        print(f"efficiency: grid/hyma {ratios['grid_over_hyma']:.2f}x, "
              f"bestguess/hyma {ratios['best_guess_over_hyma']:.2f}x")
        try:
            for r in rank_compare_rows(grid, hyma, me.default_ks(len(grid.metrics()))):
                print(f"{r['metric']:>14}  {r['value']:.4f}")
        except HymaError:
            pass
    if hyma:
        base = {n: oc.winner_metric for n, oc in sorted(outcomes.items())
                if n != "hyma" and oc.winner_metric is not None}
        rows = me.delta_table(hyma.winner_metric, base, task=cfg.doc.get("eval", {}).get("kind", "retrieval"),
                              connector=cfg.connector_kind)
        if rows:
            csv = me.rows_to_csv(rows, me.DELTA_COLUMNS)
            (cfg.output_dir / "delta.csv").write_text(csv)
            print(csv, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyma", description="Search and stitch frozen encoder pairs.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="materialise a planted synthetic zoo")
    g.add_argument("config")
    g.add_argument("--out", help="directory for banks and manifest (default: <output_dir>/zoo)")
    g.set_defaults(fn=cmd_gen_synthetic)

    s = sub.add_parser("search", help="run one search strategy")
    s.add_argument("config")
    s.add_argument("--strategy", required=True, choices=SEARCH_CHOICES)
    s.set_defaults(fn=cmd_search)

    e = sub.add_parser("eval", help="evaluate a trained connector")
    e.add_argument("config")
    e.add_argument("--outcome")
    e.add_argument("--pair", type=int)
    e.add_argument("--theta")
    e.add_argument("--task")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("rank-compare", help="NDCG@k and Spearman rho between two outcomes")
    r.add_argument("oracle")
    r.add_argument("candidate")
    r.add_argument("--k", type=int, nargs="+")
    r.add_argument("--csv")
    r.set_defaults(fn=cmd_rank_compare)

    f = sub.add_parser("flops", help="predicted FLOPs bill per strategy")
    f.add_argument("config")
    f.set_defaults(fn=cmd_flops)

    rep = sub.add_parser("report", help="summarise completed outcomes")
    rep.add_argument("config")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (HymaError, OSError, ValueError, KeyError) as exc:
        where = f" [{args.command}" + (f" --strategy {args.strategy}" if hasattr(args, "strategy") else "") + "]"
        print(f"error{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
