"""Command-line pipeline.

Subcommands:
    validate   check a bid CSV against the dataset invariants
    screens    per-tender screen values as CSV
    graph      dump per-market edge lists (jaccard, squared time gap)
    synth      write a synthetic benchmark suite (CSV + JSON sidecar)
    train      fit one model on all markets and save a checkpoint
    loo        leave-one-market-out evaluation, JSON report
    predict    score tenders with a saved checkpoint
    sweep      grid of LOMO runs over hyperparameters
    gradcheck  finite-difference verification of the analytic gradients

Exit codes: 0 success, 1 runtime/fold failure, 2 usage/validation error.
Every JSON artifact embeds the effective configuration and tool version;
fixed seeds give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .data_model import (
    BidDataError,
    MarketDataset,
    filter_min_bids,
    parse_bids_csv,
    validate_dataset,
    write_bids_csv,
)
from .graph import EmptyGraphError, build_market_graph, union_graph
from .metrics import MetricError
from .model import (
    CheckpointError,
    Hyperparams,
    gradient_check,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .screens import SCREEN_NAMES, DegenerateTenderError, compute_screens
from .synth import SynthMarketSpec, _SUITE_PROFILES, generate_market
from .training import (
    Normalizer,
    TrainingError,
    fit,
    fit_normalizer,
    leave_one_market_out,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


@dataclass
class RunConfig:
    """Effective configuration: model hyperparameters plus graph options.

    Unset fields take the defaults below; the whole config is echoed into
    every JSON artifact.
    """

    hidden_channels: int = 64
    layers: int = 2
    dropout: float = 0.3
    learning_rate: float = 0.075
    momentum: float = 0.9
    max_epochs: int = 150
    patience: int = 5
    start_delay: int = 5
    val_fraction: float = 0.15
    seed: int = 0
    use_bias: bool = False
    jaccard_threshold: float = 0.0
    top_k: int | None = None
    min_bids: int = 3

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            hidden_channels=self.hidden_channels,
            layers=self.layers,
            dropout=self.dropout,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            max_epochs=self.max_epochs,
            patience=self.patience,
            start_delay=self.start_delay,
            val_fraction=self.val_fraction,
            seed=self.seed,
            use_bias=self.use_bias,
        )


def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            blob = json.load(fh)
        known = {f.name for f in fields(RunConfig)}
        unknown = set(blob) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(cfg, **blob)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _dump_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _open_out(out: str | None):
    return open(out, "w", encoding="utf-8", newline="") if out else sys.stdout


def _add_common(p: argparse.ArgumentParser, config=True, out=True, jobs=False):
    if config:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
    if out:
        p.add_argument("--out", help="output path (default: stdout)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel fold workers (default 1)")


def cmd_validate(args) -> int:
    try:
        ds = parse_bids_csv(args.input)
    except BidDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    violations = validate_dataset(ds, mode=args.mode)
    for v in violations:
        print(str(v))
    _, would_drop = filter_min_bids(ds)
    if would_drop:
        print(f"warning: {would_drop} tender(s) have fewer than 3 bids and will be "
              "dropped by the pipeline", file=sys.stderr)
    if violations:
        print(f"{len(violations)} violation(s)", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_screens(args) -> int:
    try:
        ds = parse_bids_csv(args.input)
    except BidDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ds, dropped = filter_min_bids(ds, args.min_bids)
    if dropped:
        logger.warning("dropped %d tender(s) with fewer than %d bids", dropped, args.min_bids)
    degenerate = 0
    fh = _open_out(args.out)
    try:
        fh.write("market_id,tender_id,label," + ",".join(SCREEN_NAMES) + "\n")
        for t in ds.all_tenders():
            try:
                sv = compute_screens(t)
            except DegenerateTenderError:
                degenerate += 1
                continue
            vals = ",".join(f"{v:.12g}" for v in sv.as_array())
            fh.write(f"{t.market_id},{t.tender_id},{t.label.value},{vals}\n")
    finally:
        if args.out:
            fh.close()
    if degenerate:
        logger.warning("skipped %d degenerate tender(s)", degenerate)
    return EXIT_OK


def cmd_graph(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        ds = parse_bids_csv(args.input)
    except BidDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ds, _ = filter_min_bids(ds, cfg.min_bids)
    if ds.n_tenders == 0:
        print("error: no usable tenders", file=sys.stderr)
        return EXIT_USAGE
    epoch = ds.earliest_date()
    fh = _open_out(args.out)
    try:
        fh.write("market_id,i_tender,j_tender,jaccard,dt2\n")
        for mid in sorted(ds.markets):
            try:
                g = build_market_graph(ds.markets[mid], epoch,
                                       tau=cfg.jaccard_threshold, top_k=cfg.top_k)
            except EmptyGraphError as exc:
                logger.warning("%s", exc)
                continue
            for e in g.edges:
                fh.write(f"{mid},{g.nodes[e.i].tender_id},{g.nodes[e.j].tender_id},"
                         f"{e.jaccard:.12g},{e.dt2:.12g}\n")
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = MarketDataset()
    specs = []
    for i in range(args.markets):
        profile = dict(_SUITE_PROFILES[i % len(_SUITE_PROFILES)])
        if args.collusive_fraction is not None:
            profile["collusive_fraction"] = args.collusive_fraction
        spec = SynthMarketSpec(
            market_id=f"SYN_{chr(ord('A') + i)}",
            n_tenders=args.tenders,
            seed=args.seed + 1000 * (i + 1),
            **profile,
        )
        specs.append(spec)
        ds.markets[spec.market_id] = generate_market(spec)
    write_bids_csv(ds, args.out)
    sidecar = {
        "version": __version__,
        "base_seed": args.seed,
        "specs": [
            {**asdict(s),
             "date_range": [s.date_range[0].isoformat(), s.date_range[1].isoformat()]}
            for s in specs
        ],
    }
    _dump_json(sidecar, str(args.out) + ".meta.json")
    print(f"wrote {ds.n_tenders} tenders across {ds.n_markets} markets to {args.out}")
    return EXIT_OK


def _load_training_dataset(path: str, cfg: RunConfig) -> MarketDataset:
    ds = parse_bids_csv(path)
    violations = validate_dataset(ds, mode="train")
    if violations:
        for v in violations:
            print(str(v), file=sys.stderr)
        raise TrainingError(f"{len(violations)} dataset violation(s)")
    filtered, dropped = filter_min_bids(ds, cfg.min_bids)
    if dropped:
        logger.info("dropped %d tender(s) with fewer than %d bids", dropped, cfg.min_bids)
    return filtered


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        ds = _load_training_dataset(args.input, cfg)
    except (BidDataError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    epoch = ds.earliest_date()
    graphs = [
        build_market_graph(ds.markets[mid], epoch, tau=cfg.jaccard_threshold, top_k=cfg.top_k)
        for mid in sorted(ds.markets)
    ]
    norm = fit_normalizer(graphs)
    train_g = norm.normalize_graph(union_graph(graphs))
    result = fit(train_g, cfg.hyperparams())
    save_checkpoint(args.out, result.params, cfg.hyperparams(), norm.mean, norm.sd)
    print(f"trained on {train_g.n} tenders ({ds.n_markets} markets), "
          f"best epoch {result.best_epoch}, lambda {result.params.lam:.6g}; "
          f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_loo(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        ds = _load_training_dataset(args.input, cfg)
    except (BidDataError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if ds.n_markets < 2:
        print("error: leave-one-market-out needs at least 2 markets", file=sys.stderr)
        return EXIT_USAGE
    report = leave_one_market_out(
        ds, cfg.hyperparams(), tau=cfg.jaccard_threshold, top_k=cfg.top_k,
        min_bids=cfg.min_bids, jobs=args.jobs)
    payload = lomo_payload(report, cfg)
    _dump_json(payload, args.out)
    return EXIT_OK if report.ok else EXIT_RUNTIME


def lomo_payload(report, cfg: RunConfig) -> dict:
    return {
        "version": __version__,
        "config": asdict(cfg),
        "markets": {
            f.market_id: {
                "accuracy": f.report.accuracy,
                "balanced_accuracy": f.report.balanced_accuracy,
                "f1": f.report.f1,
                "roc_auc": f.report.roc_auc,
                "confusion": f.report.confusion.as_table(),
                "best_epoch": f.best_epoch,
                "lambda_final": f.lambda_final,
                "n_test": f.n_test,
            }
            for f in report.folds
        },
        "macro": report.macro,
        "failures": {mid: msg for mid, msg in report.failures},
    }


def cmd_predict(args) -> int:
    try:
        params, hyper, mean, sd = load_checkpoint(args.model)
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        ds = parse_bids_csv(args.input)
    except BidDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    norm = Normalizer(mean=mean, sd=sd)

    fh = _open_out(args.out)
    try:
        fh.write("market_id,tender_id,label,p_collusive,predicted,"
                 + ",".join(SCREEN_NAMES) + ",note\n")
        for mid in sorted(ds.markets):
            tenders = ds.markets[mid]
            usable = [t for t in tenders if t.n_bids >= 3]
            rows: dict[str, str] = {}
            for t in tenders:
                if t.n_bids < 3:
                    rows[t.tender_id] = (f"{mid},{t.tender_id},{t.label.value},,,"
                                         + "," * len(SCREEN_NAMES)
                                         + "skipped: fewer than 3 bids")
            if usable:
                epoch = min(t.date for t in usable)
                g = None
                try:
                    g = build_market_graph(usable, epoch)
                except EmptyGraphError:
                    pass
                if g is not None:
                    probs = predict_proba(norm.normalize_graph(g), params)
                    for nd, p in zip(g.nodes, probs[:, 1]):
                        verdict = "collusive" if p > 0.5 else "competitive"
                        vals = ",".join(f"{v:.12g}" for v in nd.features.as_array())
                        rows[nd.tender_id] = (f"{mid},{nd.tender_id},{nd.label.value},"
                                              f"{p:.12g},{verdict},{vals},")
                    skipped = dict(g.skipped)
                else:
                    skipped = {t.tender_id: "degenerate" for t in usable}
                for t in usable:
                    if t.tender_id in skipped and t.tender_id not in rows:
                        rows[t.tender_id] = (f"{mid},{t.tender_id},{t.label.value},,,"
                                             + "," * len(SCREEN_NAMES)
                                             + "skipped: degenerate screens")
            for t in tenders:
                fh.write(rows[t.tender_id] + "\n")
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        ds = _load_training_dataset(args.input, cfg)
    except (BidDataError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if ds.n_markets < 2:
        print("error: sweep needs at least 2 markets", file=sys.stderr)
        return EXIT_USAGE
    with open(args.grid, encoding="utf-8") as fh:
        grid = json.load(fh)
    axes = ["learning_rate", "dropout", "layers", "hidden_channels"]
    unknown = set(grid) - set(axes)
    if unknown:
        print(f"error: unknown grid axes {sorted(unknown)}", file=sys.stderr)
        return EXIT_USAGE

    cells: list[dict] = [{}]
    for axis in axes:
        if axis in grid:
            cells = [dict(c, **{axis: v}) for c in cells for v in grid[axis]]
    seen: set[tuple] = set()
    unique_cells = []
    for c in cells:
        key = tuple(sorted(c.items()))
        if key not in seen:
            seen.add(key)
            unique_cells.append(c)

    results = []
    any_failure = False
    for cell in unique_cells:
        cell_cfg = replace(cfg, **cell)
        entry = {axis: getattr(cell_cfg, axis) for axis in axes}
        try:
            report = leave_one_market_out(
                ds, cell_cfg.hyperparams(), tau=cell_cfg.jaccard_threshold,
                top_k=cell_cfg.top_k, min_bids=cell_cfg.min_bids, jobs=args.jobs)
            entry["macro"] = report.macro
            entry["failures"] = {mid: msg for mid, msg in report.failures}
            any_failure = any_failure or not report.ok
        except Exception as exc:  # record and keep sweeping
            entry["error"] = f"{type(exc).__name__}: {exc}"
            any_failure = True
        results.append(entry)
    results.sort(key=lambda e: json.dumps(e, sort_keys=True))

    _dump_json({
        "version": __version__,
        "config": asdict(cfg),
        "grid": grid,
        "cells": results,
    }, args.out)
    return EXIT_RUNTIME if any_failure else EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed if args.seed is not None else 0,
                            n_seeds=args.n_seeds, perturb=args.corrupt)
    payload = {
        "version": __version__,
        "config": {"seed": args.seed, "n_seeds": args.n_seeds, "corrupt": args.corrupt},
        "tolerance": report.tolerance,
        "max_rel_error": report.max_rel_error,
        "block_errors": report.block_errors,
        "passed": report.passed,
    }
    _dump_json(payload, args.out)
    print(f"gradcheck {'PASS' if report.passed else 'FAIL'}: "
          f"max relative error {report.max_rel_error:.3g} "
          f"(tolerance {report.tolerance:g})", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidscreen",
        description="Bid-rigging screening: screens, tender graphs, "
                    "cross-market training and prediction.",
    )
    parser.add_argument("--version", action="version", version=f"bidscreen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a bid CSV")
    p.add_argument("input")
    p.add_argument("--mode", choices=["train", "predict"], default="train")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("screens", help="per-tender screen values")
    p.add_argument("input")
    p.add_argument("--min-bids", type=int, default=3)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_screens)

    p = sub.add_parser("graph", help="dump per-market edge lists")
    p.add_argument("input")
    _add_common(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("synth", help="generate a synthetic benchmark suite")
    p.add_argument("--markets", type=int, default=6)
    p.add_argument("--tenders", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--collusive-fraction", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on all markets and save a checkpoint")
    p.add_argument("input")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loo", help="leave-one-market-out evaluation")
    p.add_argument("input")
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("predict", help="score tenders with a checkpoint")
    p.add_argument("model")
    p.add_argument("input")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="hyperparameter grid of LOMO runs")
    p.add_argument("input")
    p.add_argument("--grid", required=True, help="JSON grid of hyperparameter values")
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--corrupt", type=float, default=0.0,
                   help="offset added to analytic gradients (negative control)")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, MetricError, EmptyGraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
