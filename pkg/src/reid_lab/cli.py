"""Command-line entry point: ``reid-lab <subcommand>``.

Exit codes: 0 success, 1 a check or requested gain failed, 2 invalid input.
Outputs are computed in full before anything is written, so a failing run
leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, rank_eval
from .config import ConfigError, ExperimentConfig, SyntheticSection, load_config
from .data import generate_confusable, write_dataset_file
from .experiment import (
    compare_variants,
    evaluate_features,
    format_compare_table,
    gain_failures,
    load_dataset,
    load_feature_pair,
    summary_metrics,
    write_compare_csv,
)
from .gradcheck import format_table, run_gradcheck
from .model import load_checkpoint, save_checkpoint
from .trainer import extract_features, train

log = logging.getLogger("reid_lab")

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2
THREADS_ENV = "REID_LAB_THREADS"


class UsageError(ValueError):
    pass


def _add_common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="experiment JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-rank", type=int, dest="max_rank", help="length of the CMC curve")
    p.add_argument("--k1", type=int, help="re-ranking neighbourhood size")
    p.add_argument("--k2", type=int, help="re-ranking query-expansion size")
    p.add_argument("--lambda", type=float, dest="lambda_value", help="weight of the original distance")
    p.add_argument("--no-camera-mask", action="store_true", help="keep same-identity same-camera gallery items")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reid-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write checkpoint, report and features")
    _add_common(p, config_required=True)
    _add_eval_flags(p)
    p.add_argument("--rerank", action="store_true", help="also report re-ranked metrics")

    p = sub.add_parser("evaluate", help="rank query against gallery and write metric CSVs")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--checkpoint", help="model checkpoint; features come from the config dataset")
    p.add_argument("--query-features", help="binary feature file for the queries")
    p.add_argument("--gallery-features", help="binary feature file for the gallery")
    p.add_argument("--rerank", action="store_true", help="also report k-reciprocal re-ranked metrics")
    p.add_argument("--plot", action="store_true", help="write cmc.svg")

    p = sub.add_parser("rerank", help="write the k-reciprocal re-ranked distance matrix")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--query-features")
    p.add_argument("--gallery-features")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--only", action="append", help="restrict to a variant, case or scope (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("compare", help="train several loss variants under one seed and budget")
    _add_common(p, config_required=True)
    _add_eval_flags(p)
    p.add_argument("--baseline", default=None, help="variant the gain is measured against (default: first)")
    p.add_argument("--require-gain", type=float, default=None,
                   help="exit 1 unless every other variant beats the baseline mAP by this margin")
    p.add_argument("--plot", action="store_true", help="write cmc.svg")

    p = sub.add_parser("synth", help="write a synthetic confusable-identity dataset file")
    _add_common(p)
    return parser


# --- helpers -------------------------------------------------------------------------


def _load(args) -> Optional[ExperimentConfig]:
    if not getattr(args, "config", None):
        return None
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: Optional[ExperimentConfig]) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None:
        return cfg.resolve(cfg.output_dir)
    raise UsageError("--out is required without --config")


def _settings(args, cfg: Optional[ExperimentConfig]) -> rank_eval.EvalSettings:
    s = cfg.eval.to_settings() if cfg is not None else rank_eval.EvalSettings()
    for name in ("max_rank", "k1", "k2", "lambda_value"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(s, name, value)
    if getattr(args, "no_camera_mask", False):
        s.use_camera_mask = False
    if getattr(args, "rerank", False):
        s.rerank = True
    if s.max_rank < 1:
        raise UsageError("--max-rank must be >= 1")
    if not 1 <= s.k2 <= s.k1:
        raise UsageError(f"need 1 <= k2 <= k1, got k1={s.k1}, k2={s.k2}")
    if not 0 <= s.lambda_value <= 1:
        raise UsageError("--lambda must lie in [0, 1]")
    return s


def _features(args, cfg: Optional[ExperimentConfig]):
    """``(query, gallery)`` triples of (features, ids, cams) from whichever source was given."""
    q_path, g_path = args.query_features, args.gallery_features
    if (q_path is None) != (g_path is None):
        raise UsageError("--query-features and --gallery-features go together")
    if q_path is None and cfg is not None and cfg.dataset.features is not None:
        q_path, g_path = cfg.resolve(cfg.dataset.features.query), cfg.resolve(cfg.dataset.features.gallery)
    if q_path is not None:
        for p in (q_path, g_path):
            if not Path(p).is_file():
                raise UsageError(f"feature file not found: {p}")
        return load_feature_pair(q_path, g_path)
    if args.checkpoint is None or cfg is None:
        raise UsageError("give feature files, or --checkpoint together with --config")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, _, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg)
    aug = cfg.augment.to_config()
    out = []
    for split, samples in (("query", dataset.query), ("gallery", dataset.gallery)):
        if not samples:
            raise UsageError(f"dataset has an empty {split} split")
        ids, cams = dataset.labels(split)
        out.append((extract_features(model, samples, aug=aug), ids, cams))
    return tuple(out)


def _eval_outputs(query, gallery, settings: rank_eval.EvalSettings, with_rerank: bool):
    plain = evaluate_features(query, gallery, settings, rerank=False)
    metrics = summary_metrics(plain)
    curves = {"l2": plain.cmc}
    if with_rerank:
        rr = evaluate_features(query, gallery, settings, rerank=True)
        metrics.update(summary_metrics(rr, "_rerank"))
        curves["rerank"] = rr.cmc
    return metrics, curves


def _print_metrics(metrics: dict) -> None:
    for name, value in metrics.items():
        print(f"{name:<20} {int(value)}" if name.startswith("num_") else f"{name:<20} {value:.6f}")


# --- subcommands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    settings = _settings(args, cfg)
    dataset = load_dataset(cfg)
    train_cfg = cfg.train_config()
    aug = cfg.augment.to_config()
    model, head, report = train(dataset, train_cfg, cfg.model.to_spec(), settings, aug)
    evaluated = bool(dataset.query) and bool(dataset.gallery)
    if evaluated:
        feats = {}
        for split in ("query", "gallery"):
            ids, cams = dataset.labels(split)
            feats[split] = (extract_features(model, dataset.split(split), aug=aug), ids, cams)
        metrics, curves = _eval_outputs(feats["query"], feats["gallery"], settings, settings.rerank)

    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "losses": [vars(t) for t in train_cfg.losses]}
    save_checkpoint(out / "checkpoint.npz", model, head, meta=meta)
    report.write_csv(out / "train_report.csv")
    if evaluated:
        for split, (f, ids, cams) in feats.items():
            rank_eval.write_features(out / f"{split}_features.bin", f, ids, cams)
        rank_eval.write_metrics_csv(out / "metrics.csv", metrics)
        rank_eval.write_cmc_csv(out / "cmc.csv", curves)
        _print_metrics(metrics)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    settings = _settings(args, cfg)
    query, gallery = _features(args, cfg)
    metrics, curves = _eval_outputs(query, gallery, settings, settings.rerank)
    out.mkdir(parents=True, exist_ok=True)
    rank_eval.write_metrics_csv(out / "metrics.csv", metrics)
    rank_eval.write_cmc_csv(out / "cmc.csv", curves)
    if args.plot:
        rank_eval.plot_cmc(out / "cmc.svg", curves)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_rerank(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    settings = _settings(args, cfg)
    query, gallery = _features(args, cfg)
    k1, k2 = rank_eval.clamp_rerank_params(len(gallery[1]), settings.k1, settings.k2)
    dist = rank_eval.k_reciprocal_rerank(query[0], gallery[0], k1, k2, settings.lambda_value)
    mask = rank_eval.protocol_mask(query[1], query[2], gallery[1], gallery[2], settings.use_camera_mask)
    report = rank_eval.evaluate(dist, mask, query[1], gallery[1], settings.max_rank)
    metrics = summary_metrics(report, "_rerank")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "rerank_distances.npy", dist)
    rank_eval.write_metrics_csv(out / "rerank_metrics.csv", metrics)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.only, args.seed, inject_fault=args.inject_fault)
    if not results:
        raise UsageError(f"--only {args.only} matches no gradient case")
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    settings = _settings(args, cfg)
    variants = cfg.variant_terms()
    if len(variants) < 2:
        raise UsageError("compare needs at least two entries under 'variants'")
    baseline = args.baseline or next(iter(variants))
    if baseline not in variants:
        raise UsageError(f"baseline {baseline!r} is not one of the variants")
    dataset = load_dataset(cfg)
    rows = compare_variants(
        dataset, variants, cfg.train_config(), cfg.model.to_spec(), settings, cfg.augment.to_config()
    )
    out.mkdir(parents=True, exist_ok=True)
    write_compare_csv(out / "compare.csv", rows)
    curves = {r.variant: r.cmc for r in rows}
    rank_eval.write_cmc_csv(out / "compare_cmc.csv", curves)
    if args.plot:
        rank_eval.plot_cmc(out / "cmc.svg", curves)
    print(format_compare_table(rows))
    if args.require_gain is not None:
        failures = gain_failures(rows, baseline, args.require_gain)
        if failures:
            print(f"mAP gain over {baseline} below {args.require_gain}: {', '.join(failures)}")
            return EXIT_FAIL
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg) if (args.out or cfg) else Path("reid_out")
    if cfg is not None and cfg.dataset.synthetic is None:
        raise UsageError("synth needs a config with a 'synthetic' dataset source")
    section = cfg.dataset.synthetic if cfg is not None else SyntheticSection()
    seed = cfg.seed if cfg is not None else (args.seed or 0)
    dataset = generate_confusable(section.to_spec(), seed)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_file(dataset, out / "synthetic.csv")
    counts = {s: len(dataset.split(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {out / 'synthetic.csv'} {json.dumps(counts)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rerank": cmd_rerank,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
    "synth": cmd_synth,
}


def _thread_limit() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _thread_limit()
        if threads is None:
            return COMMANDS[args.command](args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"reid-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
