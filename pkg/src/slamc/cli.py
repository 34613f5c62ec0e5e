"""Command-line interface.

Subcommands: synth, compress, train, grid, eval, score-terms,
report-footprint.  Declared library errors print as ``error: <Name>: ...``
and exit 1; usage problems exit 2.  Commands that write a report TSV also
render a companion figure unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from . import checkpoint, config, interpret, report, synth, training
from .compress import (MarginalAggregator, SumAggregator, read_embeddings,
                       read_query_log, write_embeddings, write_query_log)
from .embedders import (make_provider, parse_embedder_flag,
                        provider_from_fingerprint)
from .errors import ConfigError, SlamcError
from .model import new_model
from .training import write_history, write_metrics
from .util import fmt_float


def _parse_agg(text: str):
    if text == "sum":
        return ("sum", None)
    if text.startswith("marginal:"):
        try:
            bins = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad aggregation {text!r}") from exc
        return ("marginal", bins)
    raise ConfigError(f"unknown aggregation {text!r} (use sum or marginal:K)")


def cmd_synth(args) -> int:
    spec = config.world_spec_from_file(args.spec) if args.spec \
        else synth.WorldSpec()
    world = synth.make_world(spec, args.seed)
    data = synth.generate(world, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    n = write_query_log(os.path.join(args.out, "logs.tsv"), data.records)
    training.write_targets(os.path.join(args.out, "targets.tsv"), data.targets)
    synth.write_truth(os.path.join(args.out, "truth.json"),
                      os.path.join(args.out, "truth_cells.tsv"), data.truth)
    if not args.no_figures:
        by_day: dict = {}
        for (day, _region), value in data.targets.items():
            by_day[day] = by_day.get(day, 0.0) + value
        report.render_targets_figure(by_day,
                                     os.path.join(args.out, "targets.png"))
    print(f"wrote {n} log records for {len(data.targets)} cells to {args.out}")
    print(f"embedder: {world.provider.fingerprint}  "
          f"test start: {spec.test_start.isoformat()}")
    return 0


def cmd_compress(args) -> int:
    provider = make_provider(parse_embedder_flag(args.embedder,
                                                 args.missing_term))
    kind, bins = _parse_agg(args.agg)
    deterministic = not args.fast
    if kind == "sum":
        agg = SumAggregator(provider.fingerprint, deterministic)
    else:
        agg = MarginalAggregator(provider.fingerprint, bins, deterministic)
    agg.add_many(read_query_log(args.logs, has_header=not args.no_header))
    embeddings = agg.finalize(provider)
    write_embeddings(args.out, embeddings, provider.fingerprint, args.agg)
    degenerate = sum(1 for e in embeddings.values() if e.degenerate)
    skipped = sum(e.skipped_terms for e in embeddings.values())
    print(f"compressed {len(embeddings)} cells to {args.out}"
          f" ({degenerate} degenerate, {skipped} skipped term lookups)")
    return 0


def _load_training_inputs(args):
    emb_file = read_embeddings(args.embeddings)
    embeddings = emb_file.embeddings
    if args.category:
        embeddings = {k: v for k, v in embeddings.items()
                      if k[2] == args.category}
        if not embeddings:
            raise ConfigError(f"no cells with category {args.category!r}")
    targets = training.read_targets(args.targets)
    regions = tuple(sorted({cell[1] for cell in targets}))
    dim = emb_file.width
    return emb_file, embeddings, targets, regions, dim


def cmd_train(args) -> int:
    run_cfg = config.run_config_from_file(args.config)
    emb_file, embeddings, targets, regions, dim = _load_training_inputs(args)
    model_cfg = run_cfg.model_config(dim, regions)
    seed = args.seed if args.seed is not None else run_cfg.seeds[0]
    model = new_model(model_cfg, seed, emb_file.provider_fingerprint)
    result = training.train_full_batch(model, embeddings, targets,
                                       run_cfg.split_spec(),
                                       run_cfg.optimizer, seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    checkpoint.save_model(result.model, ckpt_path)
    write_history(os.path.join(args.out, "history.tsv"), result.history)

    data = training.build_dataset(model_cfg, embeddings, targets)
    _, val_dates, test_dates = training.split_dates(data.periods,
                                                    run_cfg.split_spec())
    metrics = {"best_val_loss": result.best_val_loss,
               "best_step": float(result.best_step),
               "steps_run": float(len(result.history))}
    for label, dates in (("val", val_dates), ("test", test_dates)):
        part = data.subset(data.date_mask(dates))
        if len(part) == 0:
            continue
        eval_targets = {(p, r): t for p, r, t in
                        zip(part.periods, part.regions, part.targets)}
        rep = interpret.evaluate(result.model, embeddings, eval_targets,
                                 level="region")
        metrics[f"{label}_mape"] = rep.mape
        metrics[f"{label}_r"] = rep.pearson
        if len(model_cfg.regions) > 1 and len(set(part.periods)) > 1:
            # regional models also report parent-level fit after rollup
            roll_targets: dict = {}
            for (day, _region), value in eval_targets.items():
                roll_targets[day] = roll_targets.get(day, 0.0) + value
            roll = interpret.evaluate(result.model, embeddings, roll_targets,
                                      level="rollup")
            metrics[f"{label}_rollup_mape"] = roll.mape
            metrics[f"{label}_rollup_r"] = roll.pearson
    write_metrics(os.path.join(args.out, "metrics.tsv"), metrics)
    if not args.no_figures:
        report.render_history_figure(result.history,
                                     os.path.join(args.out, "history.png"))
    print(f"trained {len(result.history)} steps (stopped: {result.stopped}), "
          f"best val loss {result.best_val_loss:.6g} at step {result.best_step}")
    print(f"checkpoint: {ckpt_path}")
    for name in sorted(metrics):
        print(f"  {name}: {metrics[name]:.6g}")
    return 0


def cmd_grid(args) -> int:
    run_cfg = config.run_config_from_file(args.config)
    emb_file, embeddings, targets, regions, dim = _load_training_inputs(args)
    model_cfg = run_cfg.model_config(dim, regions)
    with open(args.grid, encoding="utf-8") as handle:
        grid_pairs = config.parse_config_text(handle.read())
    if not grid_pairs:
        raise ConfigError(f"{args.grid}: empty grid")
    grid: dict[str, list] = {}
    for key, value in grid_pairs.items():
        values = [v.strip() for v in value.split(",") if v.strip()]
        typed = []
        for v in values:
            try:
                typed.append(int(v))
            except ValueError:
                try:
                    typed.append(float(v))
                except ValueError:
                    typed.append(v)
        grid[key] = typed
    results = training.grid_search(model_cfg, run_cfg.optimizer, grid,
                                   embeddings, targets, run_cfg.split_spec(),
                                   trials=args.trials, base_seed=args.seed,
                                   provider_fingerprint=emb_file.provider_fingerprint)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "grid.tsv")
    with open(out_path, "w", encoding="utf-8") as handle:
        names = sorted(grid)
        handle.write("rank\t" + "\t".join(names) +
                     "\tval_loss_mean\tval_loss_std"
                     "\tval_mape_mean\tval_mape_std"
                     "\ttest_mape_mean\ttest_mape_std"
                     "\tval_r_mean\tval_r_std\ttest_r_mean\ttest_r_std\n")
        for rank, res in enumerate(results):
            fields = [str(rank)] + [str(res.point[n]) for n in names]
            for metric in ("val_loss", "val_mape", "test_mape", "val_r",
                           "test_r"):
                fields.append(fmt_float(res.mean(metric)))
                fields.append(fmt_float(res.std(metric)))
            handle.write("\t".join(fields) + "\n")
    if not args.no_figures:
        report.render_grid_figure(results, os.path.join(args.out, "grid.png"))
    best = results[0]
    print(f"ran {len(results)} grid points x {args.trials} trials; "
          f"best point {best.point} "
          f"(val loss {best.mean('val_loss'):.6g} "
          f"± {best.std('val_loss'):.2g})")
    print(f"results: {out_path}")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load_model(args.model)
    emb_file = read_embeddings(args.embeddings)
    targets_raw = training.read_targets(args.targets)
    if model.provider_fingerprint and \
            emb_file.provider_fingerprint != model.provider_fingerprint:
        raise ConfigError(
            f"embeddings built with {emb_file.provider_fingerprint!r} but "
            f"model trained on {model.provider_fingerprint!r}")
    policy = args.region_policy
    if args.zero_shot:
        if args.zero_shot == "to_parent":
            if len({cell[0] for cell in targets_raw}) != len(targets_raw):
                raise ConfigError(
                    "to_parent expects parent-level targets (one region "
                    "code per period), got multiple regions per period")
            targets = {cell[0]: value for cell, value in targets_raw.items()}
        else:
            targets = targets_raw
        rep = interpret.zero_shot_eval(model, emb_file.embeddings, targets,
                                       direction=args.zero_shot,
                                       region_policy=policy)
    else:
        if args.level == "rollup":
            targets = {}
            for (day, _region), value in targets_raw.items():
                targets[day] = targets.get(day, 0.0) + value
        else:
            targets = targets_raw
        rep = interpret.evaluate(model, emb_file.embeddings, targets,
                                 level=args.level, region_policy=policy)
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.tsv")
    with open(pred_path, "w", encoding="utf-8") as handle:
        if rep.level == "rollup":
            handle.write("period\tactual\tpredicted\n")
            for day in sorted(targets):
                handle.write(f"{day.isoformat()}\t{fmt_float(targets[day])}\t"
                             f"{fmt_float(rep.predictions[day])}\n")
        else:
            handle.write("period\tregion\tactual\tpredicted\n")
            for cell in sorted(targets):
                handle.write(f"{cell[0].isoformat()}\t{cell[1]}\t"
                             f"{fmt_float(targets[cell])}\t"
                             f"{fmt_float(rep.predictions[cell])}\n")
    metrics = {"mape": rep.mape, "pearson_r": rep.pearson}
    write_metrics(os.path.join(args.out, "metrics.tsv"), metrics)
    if not args.no_figures:
        report.render_series_figure(
            targets, rep.predictions,
            os.path.join(args.out, "predictions.png"), level=rep.level)
    mode = f"zero-shot {args.zero_shot}" if args.zero_shot else args.level
    policy_note = f", region policy {rep.region_policy}" if rep.region_policy \
        else ""
    print(f"evaluated {mode}{policy_note}: MAPE {rep.mape:.4g}%  "
          f"r {rep.pearson:.6g}")
    print(f"predictions: {pred_path}")
    return 0


def cmd_score_terms(args) -> int:
    model = checkpoint.load_model(args.model)
    if args.embedder:
        provider = make_provider(parse_embedder_flag(args.embedder))
        if model.provider_fingerprint and \
                provider.fingerprint != model.provider_fingerprint:
            raise ConfigError(
                f"embedder {provider.fingerprint!r} does not match the "
                f"model's {model.provider_fingerprint!r}")
    else:
        provider = provider_from_fingerprint(model.provider_fingerprint)
    with open(args.terms, "r", encoding="utf-8") as handle:
        terms = [line.strip() for line in handle if line.strip()]
    scores = interpret.score_terms(terms, model, provider, region=args.region)
    interpret.write_term_scores(args.out, scores)
    skipped = len(terms) - len(scores)
    print(f"scored {len(scores)} terms to {args.out}"
          + (f" ({skipped} not embeddable)" if skipped else ""))
    return 0


def cmd_report_footprint(args) -> int:
    rows = report.footprint_table(args.terms, args.periods, args.dim,
                                  bins=args.bins, accepted=args.accepted,
                                  classes=args.classes)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "footprint.tsv")
    report.write_footprint(out_path, rows)
    if not args.no_figures:
        report.render_footprint_figure(rows,
                                       os.path.join(args.out, "footprint.png"))
    for row in rows:
        print(f"{row.method:>20}: {row.human:>8}  ({row.cells})")
    print(f"report: {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slamc",
        description="Compress search-query logs into fixed-length embeddings "
                    "and nowcast time series from them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="world spec file (synth.* keys)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="aggregate a query log into embeddings")
    p.add_argument("--logs", required=True)
    p.add_argument("--embedder", required=True,
                   help="hash:D:SEED or table:PATH")
    p.add_argument("--agg", default="sum", help="sum or marginal:K")
    p.add_argument("--out", required=True)
    p.add_argument("--no-header", action="store_true",
                   help="logs file has no header row")
    p.add_argument("--fast", action="store_true",
                   help="skip deterministic ordering of reductions")
    p.add_argument("--missing-term", default="skip",
                   choices=["skip", "error", "hash-fallback"])
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("train", help="fit a model on embeddings and targets")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--category", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True,
                   help="file of 'param = v1, v2, ...' lines")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--category", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a checkpoint against targets")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--level", default="region", choices=["region", "rollup"])
    p.add_argument("--zero-shot", default=None,
                   choices=["to_parent", "to_child"])
    p.add_argument("--region-policy", default=None,
                   choices=["zeros", "uniform"])
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score-terms", help="score individual terms")
    p.add_argument("--model", required=True)
    p.add_argument("--terms", required=True, help="one term per line")
    p.add_argument("--region", default=None)
    p.add_argument("--embedder", default=None,
                   help="required for table-backed models")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_terms)

    p = sub.add_parser("report-footprint",
                       help="memory footprint of feature methods")
    p.add_argument("--terms", type=int, required=True)
    p.add_argument("--periods", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--accepted", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report_footprint)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except SlamcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
