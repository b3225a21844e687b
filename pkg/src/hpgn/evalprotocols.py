"""Retrieval evaluation: cosine distances, CMC/mAP, and the two protocols
(cross-camera exclusion, repeated single-instance splits).

Distance ties are broken by original gallery index (stable sort), so results
are independent of gallery input order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class DegenerateFeatureError(ValueError):
    """A feature vector has zero norm; cosine distance is undefined."""


@dataclass
class EvalReport:
    protocol: str
    rank_rates: dict[int, float]        # k -> identification rate, k in {1, 5, 10}
    map_score: float
    cmc: np.ndarray                     # full curve, index k-1 = rank-k rate
    per_query_ap: list[float] = field(default_factory=list)
    excluded_queries: int = 0
    repeats: int = 1
    per_repeat: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"protocol: {self.protocol}"]
        for k in sorted(self.rank_rates):
            lines.append(f"rank-{k}: {self.rank_rates[k]:.4f}")
        lines.append(f"mAP: {self.map_score:.4f}")
        lines.append(f"excluded queries: {self.excluded_queries}")
        if self.repeats > 1:
            lines.append(f"repeats: {self.repeats}")
        return "\n".join(lines)


def pairwise_cosine(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """1 - cosine similarity, shape (len(q), len(g)), values in [0, 2]."""
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(qn == 0) or np.any(gn == 0):
        raise DegenerateFeatureError("zero-norm feature vector")
    sim = (q / qn[:, None]) @ (g / gn[:, None]).T
    return 1.0 - sim


def average_precision(relevance: np.ndarray) -> float:
    """Mean over relevant positions r of (relevant in top-r) / r."""
    relevance = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(relevance)
    if len(hits) == 0:
        raise ValueError("no relevant item in ranking")
    precisions = (np.arange(1, len(hits) + 1)) / (hits + 1)
    return float(precisions.mean())


def cmc_curve(first_hit_ranks, gallery_size: int) -> np.ndarray:
    """Rank-k identification rates for k = 1..gallery_size."""
    ranks = np.asarray(list(first_hit_ranks))
    if len(ranks) == 0:
        return np.zeros(gallery_size)
    curve = np.zeros(gallery_size)
    for r in ranks:
        curve[r - 1:] += 1.0
    return curve / len(ranks)


def _rank_queries(dist: np.ndarray, relevant: np.ndarray, valid: np.ndarray):
    """Shared ranking core.

    dist: (q, g) distances; relevant: (q, g) bool; valid: (q, g) bool mask of
    gallery items admitted for each query.  Returns (first-hit ranks, APs,
    excluded count).
    """
    first_hits, aps = [], []
    excluded = 0
    for qi in range(dist.shape[0]):
        keep = np.flatnonzero(valid[qi])
        rel = relevant[qi, keep]
        if not rel.any():
            excluded += 1
            continue
        order = np.argsort(dist[qi, keep], kind="stable")
        rel_sorted = rel[order]
        first_hits.append(int(np.flatnonzero(rel_sorted)[0]) + 1)
        aps.append(average_precision(rel_sorted))
    return first_hits, aps, excluded


def _report(protocol: str, first_hits, aps, excluded: int, gallery_size: int) -> EvalReport:
    curve = cmc_curve(first_hits, gallery_size)
    rates = {k: float(curve[min(k, gallery_size) - 1]) if len(curve) else 0.0
             for k in (1, 5, 10)}
    map_score = float(np.mean(aps)) if aps else 0.0
    return EvalReport(protocol=protocol, rank_rates=rates, map_score=map_score,
                      cmc=curve, per_query_ap=list(aps), excluded_queries=excluded)


def evaluate_crosscam(probe_feats: np.ndarray, probe_ids, probe_cams,
                      gallery_feats: np.ndarray, gallery_ids, gallery_cams) -> EvalReport:
    """Cross-camera protocol: gallery items sharing both identity and camera
    with the probe are dropped before ranking; probes left without a positive
    are excluded and counted."""
    probe_ids = np.asarray(probe_ids)
    probe_cams = np.asarray(probe_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    dist = pairwise_cosine(probe_feats, gallery_feats)
    relevant = probe_ids[:, None] == gallery_ids[None, :]
    same_cam = probe_cams[:, None] == gallery_cams[None, :]
    valid = ~(relevant & same_cam)
    first_hits, aps, excluded = _rank_queries(dist, relevant & valid, valid)
    return _report("crosscam", first_hits, aps, excluded, gallery_feats.shape[0])


def evaluate_repeated_splits(features: np.ndarray, identities, repeats: int,
                             rng: np.random.Generator, mode: str = "conventional") -> EvalReport:
    """Single-instance split protocol, repeated and averaged.

    conventional: one random image per identity forms the gallery, the rest
    query it.  literal: the single image queries and the remainder is the
    gallery.  Identities with fewer than two images are excluded.
    """
    if mode not in ("conventional", "literal"):
        raise ValueError(f"unknown split mode {mode!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    identities = np.asarray(identities)
    usable = [i for i in np.unique(identities) if (identities == i).sum() >= 2]
    dropped = len(np.unique(identities)) - len(usable)
    if dropped:
        warnings.warn(f"excluded {dropped} identities with a single image")
    if not usable:
        raise ValueError("no identity has two or more images")
    per_repeat = []
    curves = []
    for _ in range(repeats):
        single, rest = [], []
        for ident in usable:
            pool = np.flatnonzero(identities == ident)
            pick = rng.choice(pool)
            single.append(pick)
            rest.extend(pool[pool != pick])
        single = np.array(single)
        rest = np.array(rest)
        if mode == "conventional":
            probe, gallery = rest, single
        else:
            probe, gallery = single, rest
        dist = pairwise_cosine(features[probe], features[gallery])
        relevant = identities[probe][:, None] == identities[gallery][None, :]
        valid = np.ones_like(relevant, dtype=bool)
        first_hits, aps, excluded = _rank_queries(dist, relevant, valid)
        rep = _report("repeated", first_hits, aps, excluded, len(gallery))
        per_repeat.append({"rank_rates": rep.rank_rates, "mAP": rep.map_score})
        curves.append(rep.cmc)
    min_len = min(len(c) for c in curves)
    mean_curve = np.mean([c[:min_len] for c in curves], axis=0)
    rates = {k: float(np.mean([r["rank_rates"][k] for r in per_repeat])) for k in (1, 5, 10)}
    report = EvalReport(protocol=f"repeated-{mode}", rank_rates=rates,
                        map_score=float(np.mean([r["mAP"] for r in per_repeat])),
                        cmc=mean_curve, repeats=repeats, per_repeat=per_repeat)
    return report


def report_csv(report: EvalReport) -> str:
    """Comma-separated table: one metric per row."""
    rows = ["metric,value"]
    for k in sorted(report.rank_rates):
        rows.append(f"rank{k},{report.rank_rates[k]:.6f}")
    rows.append(f"mAP,{report.map_score:.6f}")
    rows.append(f"excluded,{report.excluded_queries}")
    rows.append(f"repeats,{report.repeats}")
    return "\n".join(rows) + "\n"
