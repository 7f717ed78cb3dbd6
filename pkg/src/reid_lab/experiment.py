"""Dataset loading from a config, training runs and multi-variant comparisons."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import rank_eval
from .config import ConfigError, ExperimentConfig
from .data import AugmentConfig, Dataset, generate_confusable, load_market_dir, read_dataset_file
from .losses import LossConfig
from .trainer import ModelSpec, TrainConfig, TrainReport, evaluate_model, train

COMPARE_COLUMNS = ("variant", "mAP", "rank1", "entropy", "loss")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Materialise the configured sample source (feature-file sources are not datasets)."""
    src = cfg.dataset
    if src.synthetic is not None:
        return generate_confusable(src.synthetic.to_spec(), cfg.seed)
    if src.dataset_file is not None:
        return read_dataset_file(cfg.resolve(src.dataset_file))
    if src.market_dir is not None:
        return load_market_dir(cfg.resolve(src.market_dir))
    raise ConfigError("feature files can be evaluated or re-ranked but not trained on")


def load_feature_pair(query_path, gallery_path):
    qf, q_ids, q_cams = rank_eval.read_features(query_path)
    gf, g_ids, g_cams = rank_eval.read_features(gallery_path)
    if qf.shape[1] != gf.shape[1]:
        raise ValueError(f"query features have dim {qf.shape[1]}, gallery features {gf.shape[1]}")
    return (qf, q_ids, q_cams), (gf, g_ids, g_cams)


def evaluate_features(
    query,
    gallery,
    settings: rank_eval.EvalSettings,
    rerank: bool,
) -> rank_eval.EvalReport:
    """Rank ``(features, ids, cams)`` triples with plain L2 or re-ranked distances."""
    qf, q_ids, q_cams = query
    gf, g_ids, g_cams = gallery
    mask = rank_eval.protocol_mask(q_ids, q_cams, g_ids, g_cams, settings.use_camera_mask)
    if rerank:
        k1, k2 = rank_eval.clamp_rerank_params(len(g_ids), settings.k1, settings.k2)
        dist = rank_eval.k_reciprocal_rerank(qf, gf, k1, k2, settings.lambda_value)
    else:
        dist = rank_eval.l2_distance_matrix(qf, gf)
    return rank_eval.evaluate(dist, mask, q_ids, g_ids, settings.max_rank, settings=vars(settings))


def summary_metrics(report: rank_eval.EvalReport, suffix: str = "") -> dict[str, float]:
    out = {"mAP": report.mAP}
    for k in (1, 5, 10):
        if k <= len(report.cmc):
            out[f"rank{k}"] = report.rank(k)
    out["num_queries"] = report.num_queries
    out["num_excluded"] = report.num_excluded
    return {f"{name}{suffix}": float(v) for name, v in out.items()}


@dataclass
class CompareRow:
    variant: str
    mAP: float
    rank1: float
    entropy: float
    loss: float
    cmc: Optional[np.ndarray] = None
    report: Optional[TrainReport] = None


def compare_variants(
    dataset: Dataset,
    variants: dict[str, Sequence[LossConfig]],
    base: TrainConfig,
    model_spec: Optional[ModelSpec] = None,
    settings: Optional[rank_eval.EvalSettings] = None,
    aug: Optional[AugmentConfig] = None,
) -> list[CompareRow]:
    """Train every variant with the same seed and budget, then evaluate each."""
    if len(variants) < 2:
        raise ValueError("a comparison needs at least two variants")
    if not dataset.query or not dataset.gallery:
        raise ValueError("a comparison needs query and gallery splits")
    settings = settings or rank_eval.EvalSettings()
    rows = []
    for name, terms in variants.items():
        cfg = replace(base, losses=list(terms))
        model, _, report = train(dataset, cfg, model_spec, settings, aug)
        ev = evaluate_model(model, dataset, settings, aug)
        last = report.records[-1]
        rows.append(CompareRow(name, ev.mAP, ev.rank(1), last.entropy, last.loss, ev.cmc, report))
    return rows


def write_compare_csv(path, rows: Sequence[CompareRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for r in rows:
            writer.writerow([r.variant] + [repr(float(getattr(r, c))) for c in COMPARE_COLUMNS[1:]])


def read_compare_csv(path) -> list[CompareRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != COMPARE_COLUMNS:
            raise ValueError(f"{path}: bad comparison header")
        return [CompareRow(row[0], *(float(v) for v in row[1:])) for row in reader]


def format_compare_table(rows: Sequence[CompareRow]) -> str:
    width = max(8, *(len(r.variant) for r in rows))
    lines = [f"{'variant':<{width}} {'mAP':>7} {'rank1':>7} {'entropy':>8} {'loss':>8}"]
    for r in rows:
        lines.append(f"{r.variant:<{width}} {r.mAP:7.4f} {r.rank1:7.4f} {r.entropy:8.4f} {r.loss:8.4f}")
    return "\n".join(lines)


def gain_failures(rows: Sequence[CompareRow], baseline: str, margin: float) -> list[str]:
    """Variants whose mAP falls short of ``baseline`` mAP + ``margin``."""
    by_name = {r.variant: r for r in rows}
    if baseline not in by_name:
        raise ValueError(f"baseline variant {baseline!r} not in the comparison")
    target = by_name[baseline].mAP + margin
    return [r.variant for r in rows if r.variant != baseline and not r.mAP >= target]
