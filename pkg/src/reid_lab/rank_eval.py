"""Query/gallery ranking protocol: L2 distances, CMC, mAP and k-reciprocal re-ranking."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FEATURE_MAGIC = b"RLFEAT01"


@dataclass
class EvalSettings:
    max_rank: int = 50
    use_camera_mask: bool = True
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    num_queries: int
    num_excluded: int
    settings: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def l2_distance_matrix(queries, gallery) -> np.ndarray:
    """Euclidean distances via ``|q|^2 + |g|^2 - 2 q.g``.

    Entries whose squared value is tiny relative to the norms are recomputed
    directly, so identical rows give exactly 0.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    qq = (q * q).sum(axis=1)[:, None]
    gg = (g * g).sum(axis=1)[None, :]
    sq = qq + gg - 2.0 * (q @ g.T)
    np.maximum(sq, 0.0, out=sq)
    suspect = sq <= 1e-8 * (qq + gg)
    if np.any(suspect):
        rows, cols = np.nonzero(suspect)
        diff = q[rows] - g[cols]
        sq[rows, cols] = (diff * diff).sum(axis=1)
    return np.sqrt(sq)


def protocol_mask(q_ids, q_cams, g_ids, g_cams, use_camera: bool = True) -> np.ndarray:
    """True where a gallery item may be ranked for a query.

    Same identity seen by the same camera is excluded; with ``use_camera=False``
    everything is admissible.
    """
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if not use_camera:
        return np.ones((q_ids.size, g_ids.size), dtype=bool)
    same_id = q_ids[:, None] == g_ids[None, :]
    same_cam = q_cams[:, None] == g_cams[None, :]
    return ~(same_id & same_cam)


def _ranked_matches(dist, mask, q_ids, g_ids):
    """Per query: boolean relevance of its admissible gallery items in ranked order."""
    dist = np.asarray(dist, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    if dist.shape != mask.shape or dist.shape != (q_ids.size, g_ids.size):
        raise ValueError("distance matrix, mask and label arrays have inconsistent shapes")
    order = np.argsort(dist, axis=1, kind="stable")
    for i in range(dist.shape[0]):
        ranked = order[i][mask[i, order[i]]]
        yield g_ids[ranked] == q_ids[i]


def _check_max_rank(max_rank: int) -> None:
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")


def evaluate(dist, mask, q_ids, g_ids, max_rank: int = 50, settings: Optional[dict] = None) -> EvalReport:
    """CMC and mAP in one pass. Queries without an admissible positive are excluded."""
    _check_max_rank(max_rank)
    cmc_rows, aps = [], []
    excluded = 0
    for matches in _ranked_matches(dist, mask, q_ids, g_ids):
        if not matches.any():
            excluded += 1
            continue
        hits = np.cumsum(matches)
        first = int(np.argmax(matches))
        row = np.zeros(max_rank)
        row[first:] = 1.0
        cmc_rows.append(row)
        positions = np.nonzero(matches)[0] + 1
        aps.append(float(np.mean(hits[positions - 1] / positions)))
    if not aps:
        raise ValueError("no query has an admissible positive in the gallery")
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=np.mean(cmc_rows, axis=0),
        num_queries=len(aps),
        num_excluded=excluded,
        settings=dict(settings or {}),
    )


def cmc(dist, mask, q_ids, g_ids, max_rank: int = 50) -> np.ndarray:
    return evaluate(dist, mask, q_ids, g_ids, max_rank).cmc


def mean_average_precision(dist, mask, q_ids, g_ids) -> float:
    return evaluate(dist, mask, q_ids, g_ids, 1).mAP


def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_rerank(queries, gallery, k1: int = 20, k2: int = 6, lambda_value: float = 0.3) -> np.ndarray:
    """Jaccard distance over k-reciprocal encodings mixed with the original distance.

    Works on the union of queries and gallery. The original distance is the
    squared L2 distance divided by each row's maximum, which keeps every query's
    ordering, so ``lambda_value=1`` reproduces plain L2 ranking.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    if not 1 <= k2 <= k1:
        raise ValueError(f"need 1 <= k2 <= k1, got k1={k1}, k2={k2}")
    if k1 >= g.shape[0]:
        raise ValueError(f"k1={k1} must be smaller than the gallery size {g.shape[0]}")
    if not 0 <= lambda_value <= 1:
        raise ValueError("lambda_value must lie in [0, 1]")

    nq = q.shape[0]
    feats = np.concatenate([q, g])
    n = feats.shape[0]
    original = l2_distance_matrix(feats, feats) ** 2
    row_max = original.max(axis=1, keepdims=True)
    original = original / np.where(row_max > 0, row_max, 1.0)
    initial_rank = np.argsort(original, axis=1, kind="stable")

    half_k = int(np.around(k1 / 2))
    V = np.zeros((n, n))
    for i in range(n):
        reciprocal = _k_reciprocal(initial_rank, i, k1)
        expansion = [reciprocal]
        for candidate in reciprocal:
            cand_set = _k_reciprocal(initial_rank, candidate, half_k)
            if np.intersect1d(cand_set, reciprocal).size > 2.0 / 3.0 * cand_set.size:
                expansion.append(cand_set)
        members = np.unique(np.concatenate(expansion))
        weight = np.exp(-original[i, members])
        V[i, members] = weight / weight.sum()

    if k2 != 1:
        expanded = np.empty_like(V)
        for i in range(n):
            expanded[i] = V[initial_rank[i, :k2]].mean(axis=0)
        V = expanded

    jaccard = np.empty((nq, n))
    for i in range(nq):
        overlap = np.minimum(V[i][None, :], V).sum(axis=1)
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    final = (1.0 - lambda_value) * jaccard + lambda_value * original[:nq]
    return final[:, nq:]


def clamp_rerank_params(num_gallery: int, k1: int, k2: int) -> tuple[int, int]:
    """Shrink k1/k2 so they fit a small gallery."""
    k1 = max(1, min(k1, num_gallery - 1))
    k2 = max(1, min(k2, k1))
    return k1, k2


# --- feature files --------------------------------------------------------------------


def write_features(path, features, ids, cams) -> None:
    """Binary layout: magic, uint64 count, uint64 dim, float64 rows, int64 ids, int64 cams (little endian)."""
    f = np.ascontiguousarray(np.asarray(features, dtype="<f8"))
    if f.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    ids = np.asarray(ids, dtype="<i8")
    cams = np.asarray(cams, dtype="<i8")
    if ids.shape != (f.shape[0],) or cams.shape != (f.shape[0],):
        raise ValueError("ids/cams must have one entry per row")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", f.shape[0], f.shape[1]))
        fh.write(f.tobytes())
        fh.write(ids.tobytes())
        fh.write(cams.tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a reid-lab feature file")
    count, dim = struct.unpack("<QQ", raw[8:24])
    expected = 24 + count * dim * 8 + 2 * count * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header ({expected})")
    offset = 24
    feats = np.frombuffer(raw, dtype="<f8", count=count * dim, offset=offset).reshape(count, dim)
    offset += count * dim * 8
    ids = np.frombuffer(raw, dtype="<i8", count=count, offset=offset)
    offset += count * 8
    cams = np.frombuffer(raw, dtype="<i8", count=count, offset=offset)
    return feats.astype(np.float64), ids.astype(np.int64), cams.astype(np.int64)


# --- report CSVs ----------------------------------------------------------------------


def write_metrics_csv(path, metrics: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, repr(float(value))])


def read_metrics_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["metric", "value"]:
            raise ValueError(f"{path}: bad metrics header")
        return {name: float(value) for name, value in reader}


def write_cmc_csv(path, curves: dict[str, np.ndarray]) -> None:
    """Columns ``k`` then one accuracy column per named curve."""
    names = list(curves)
    length = min(len(c) for c in curves.values())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k"] + names)
        for k in range(length):
            writer.writerow([k + 1] + [repr(float(curves[n][k])) for n in names])


def read_cmc_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "k":
            raise ValueError(f"{path}: bad CMC header")
        rows = [[float(v) for v in row[1:]] for row in reader]
    data = np.array(rows).reshape(len(rows), len(header) - 1)
    return {name: data[:, j] for j, name in enumerate(header[1:])}


def plot_cmc(path, curves: dict[str, np.ndarray]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        ax.plot(np.arange(1, len(curve) + 1), curve, label=name)
    ax.set_xlabel("rank k")
    ax.set_ylabel("matching accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    # fixed hash salt and no date keep the SVG byte-stable
    with matplotlib.rc_context({"svg.hashsalt": "reid-lab"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
