"""Descriptor extraction, Euclidean ranking and Recall@K / AP."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from . import kernels
from .data import DatasetManifest, ImageStore
from .errors import ConfigError

log = logging.getLogger(__name__)

DIRECTIONS = ("uav_to_sat", "sat_to_uav")


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]
    mean_ap: float
    num_queries: int
    # per query: (query id, top-ranked gallery ids, AP)
    per_query: list[tuple[str, list[str], float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "mean_ap": self.mean_ap,
            "num_queries": self.num_queries,
            "per_query": [{"query": q, "top": top, "ap": ap} for q, top, ap in self.per_query],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# ------------------------------------------------------------------ single-query primitives

def rank(query, gallery) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; ties keep insertion order."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if query.shape[1] != gallery.shape[1]:
        raise ConfigError(f"descriptor length {query.shape[1]} != gallery length {gallery.shape[1]}")
    return np.argsort(cdist(query, gallery)[0], kind="stable")


def recall_at_k(ranked_ids, relevant_ids, k: int) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant_ids)
    return int(any(r in relevant for r in list(ranked_ids)[:k]))


def average_precision(ranked_ids, relevant_ids) -> float:
    """Mean of precision at each relevant hit."""
    relevant = set(relevant_ids)
    mask = np.array([[r in relevant for r in ranked_ids]], dtype=np.uint8)
    ap, _, n_rel = kernels.ranking_metrics(mask)
    if len(relevant) and n_rel[0] < len(relevant):
        # relevant items absent from the ranking count as never retrieved
        return float(ap[0] * n_rel[0] / len(relevant))
    return float(ap[0])


# ------------------------------------------------------------------ batch evaluation

def evaluate_descriptors(q_desc, q_locs, g_desc, g_locs, ks=(1, 5, 10), direction: str = "uav_to_sat",
                         q_ids=None, g_ids=None, normalize: bool = False, keep_top: int = 10,
                         chunk: int = 1024) -> RetrievalReport:
    q_desc = np.asarray(q_desc, dtype=np.float64)
    g_desc = np.asarray(g_desc, dtype=np.float64)
    if g_desc.shape[0] == 0:
        raise ValueError("empty gallery")
    if q_desc.shape[1] != g_desc.shape[1]:
        raise ConfigError("query and gallery descriptor lengths differ")
    if normalize:
        q_desc = q_desc / np.maximum(np.linalg.norm(q_desc, axis=1, keepdims=True), 1e-12)
        g_desc = g_desc / np.maximum(np.linalg.norm(g_desc, axis=1, keepdims=True), 1e-12)
    q_locs = np.asarray(q_locs)
    g_locs = np.asarray(g_locs)
    q_ids = list(q_ids) if q_ids is not None else [str(i) for i in range(len(q_locs))]
    g_ids = list(g_ids) if g_ids is not None else [str(i) for i in range(len(g_locs))]
    aps, firsts, counts, per_query = [], [], [], []
    for start in range(0, q_desc.shape[0], chunk):
        dist = cdist(q_desc[start:start + chunk], g_desc)
        order = np.argsort(dist, axis=1, kind="stable")
        rel = (g_locs[order] == q_locs[start:start + chunk, None]).astype(np.uint8)
        ap, first, n_rel = kernels.ranking_metrics(rel)
        aps.append(ap)
        firsts.append(first)
        counts.append(n_rel)
        if keep_top:
            for i, row in enumerate(order):
                per_query.append((q_ids[start + i], [g_ids[j] for j in row[:keep_top]], float(ap[i])))
    ap = np.concatenate(aps)
    first = np.concatenate(firsts)
    n_rel = np.concatenate(counts)
    valid = n_rel > 0
    if not valid.all():
        log.warning("%d queries without relevant gallery items excluded", int((~valid).sum()))
    if not valid.any():
        raise ValueError("no query has a relevant gallery item")
    recall = {int(k): float(np.mean((first[valid] >= 0) & (first[valid] < k))) for k in ks}
    return RetrievalReport(direction, recall, float(ap[valid].mean()), int(valid.sum()), per_query)


def extract_descriptors(model, store: ImageStore, entries, norm, batch_size: int = 64) -> np.ndarray:
    from .training import to_tensor

    out = []
    for start in range(0, len(entries), batch_size):
        batch = entries[start:start + batch_size]
        images = to_tensor([store.get(e) for e in batch], *norm)
        out.append(model.descriptors(images).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model, query: DatasetManifest, gallery: DatasetManifest, store: ImageStore, norm,
             direction: str, ks=(1, 5, 10), normalize: bool = False, keep_top: int = 10) -> RetrievalReport:
    """Rank every query against the opposite-view gallery (distractors included)."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    q_view, g_view = ("uav", "satellite") if direction == "uav_to_sat" else ("satellite", "uav")
    q_entries = query.by_view(q_view)
    g_entries = gallery.by_view(g_view)
    if not q_entries or not g_entries:
        raise ValueError(f"{direction}: need {q_view} queries and {g_view} gallery items")
    with torch.no_grad():
        q_desc = extract_descriptors(model, store, q_entries, norm)
        g_desc = extract_descriptors(model, store, g_entries, norm)
    return evaluate_descriptors(
        q_desc, [e.location_id for e in q_entries], g_desc, [e.location_id for e in g_entries],
        ks, direction, [e.sample_id for e in q_entries], [e.sample_id for e in g_entries],
        normalize, keep_top,
    )


def format_table(reports: list[RetrievalReport]) -> str:
    """Aligned text table: Recall@1 and AP per direction, in percent."""
    names = {"uav_to_sat": "UAV-to-Satellite", "sat_to_uav": "Satellite-to-UAV"}
    by_dir = {r.direction: r for r in reports}
    cols = [d for d in DIRECTIONS if d in by_dir]
    header1 = " | ".join(f"{names[d]:^19}" for d in cols)
    header2 = " | ".join(f"{'Recall@1':>9} {'AP':>9}" for _ in cols)
    row = " | ".join(f"{100 * by_dir[d].recall_at[1]:9.2f} {100 * by_dir[d].mean_ap:9.2f}" for d in cols)
    return "\n".join([header1, header2, "-" * len(header2), row])


def write_rankings_csv(path, report: RetrievalReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["query", "ap", "ranked_gallery"])
        for q, top, ap in report.per_query:
            writer.writerow([q, repr(ap), " ".join(top)])
