"""Retrieval metrics, the seen/unseen protocol and the drift/routing diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .synthdata import EvalSplit, ImageSet


def pairwise_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cosine distance ``1 - q . g`` between unit-normalized rows."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(q).all() and np.isfinite(g).all()):
        raise ValueError("non-finite embedding")
    return 1.0 - q @ g.T


@dataclass
class RankingResult:
    order: np.ndarray  # (N, M) gallery indices sorted by distance
    distances: np.ndarray  # (N, M) distances along the ranking
    valid: np.ndarray  # (N, M) False where gallery shares the query's identity and camera

    def ranked(self, i: int) -> list[int]:
        """Masked ranking of query ``i`` as a list of gallery indices."""
        return self.order[i][self.valid[i]].tolist()


def rank_gallery(dist: np.ndarray, q_ids: np.ndarray, q_cams: np.ndarray,
                 g_ids: np.ndarray, g_cams: np.ndarray) -> RankingResult:
    order = np.argsort(dist, axis=1, kind="stable")
    sorted_dist = np.take_along_axis(dist, order, axis=1)
    junk = (g_ids[order] == q_ids[:, None]) & (g_cams[order] == q_cams[:, None])
    return RankingResult(order, sorted_dist, ~junk)


def positives_for(q_ids: np.ndarray, q_cams: np.ndarray, g_ids: np.ndarray,
                  g_cams: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero((g_ids == qi) & (g_cams != qc)).tolist())
            for qi, qc in zip(q_ids, q_cams)]


def compute_ap(ranked: Sequence[int], positives: set[int]) -> float:
    """Average precision of one masked ranking; positives absent from it are ignored."""
    hits, total = 0, 0.0
    n_pos = sum(1 for g in ranked if g in positives)
    if n_pos == 0:
        raise ValueError("query has no valid positive")
    for rank, g in enumerate(ranked, start=1):
        if g in positives:
            hits += 1
            total += hits / rank
    return total / n_pos


def _rows(rankings: RankingResult | Sequence[Sequence[int]]) -> list[list[int]]:
    if isinstance(rankings, RankingResult):
        return [rankings.ranked(i) for i in range(len(rankings.order))]
    return [list(r) for r in rankings]


def compute_map(rankings, positives_per_query: list[set[int]]) -> tuple[float, int]:
    """Mean AP over queries with a valid positive; also returns the number excluded."""
    aps, excluded = [], 0
    for ranked, pos in zip(_rows(rankings), positives_per_query):
        if not any(g in pos for g in ranked):
            excluded += 1
            continue
        aps.append(compute_ap(ranked, pos))
    if not aps:
        raise ValueError("no query has a valid positive")
    return float(np.mean(aps)), excluded


def compute_cmc(rankings, positives_per_query: list[set[int]], max_rank: int) -> np.ndarray:
    """``cmc[r-1]`` is the fraction of valid queries with a positive in the top ``r``."""
    firsts = []
    for ranked, pos in zip(_rows(rankings), positives_per_query):
        hits = [r for r, g in enumerate(ranked) if g in pos]
        if hits:
            firsts.append(hits[0])
    if not firsts:
        raise ValueError("no query has a valid positive")
    firsts = np.asarray(firsts)
    return np.array([(firsts < r).mean() for r in range(1, max_rank + 1)])


def retrieval_metrics(q_feat: np.ndarray, q_ids: np.ndarray, q_cams: np.ndarray,
                      g_feat: np.ndarray, g_ids: np.ndarray, g_cams: np.ndarray) -> tuple[float, float]:
    dist = pairwise_distances(q_feat, g_feat)
    ranking = rank_gallery(dist, q_ids, q_cams, g_ids, g_cams)
    pos = positives_for(q_ids, q_cams, g_ids, g_cams)
    mAP, _ = compute_map(ranking, pos)
    r1 = compute_cmc(ranking, pos, 1)[0]
    return mAP, float(r1)


# --- protocol ------------------------------------------------------------------------

@torch.no_grad()
def embed_images(image_encoder, pool, images: ImageSet, chunk: int = 128) -> tuple[np.ndarray, np.ndarray | None]:
    """Unit-norm retrieval embeddings and, when a pool is given, routing selections."""
    was_training = image_encoder.training
    image_encoder.eval()
    feats, routes = [], []
    for s in range(0, len(images), chunk):
        px = torch.from_numpy(images.pixels[s:s + chunk])
        triple, record = image_encoder(px, pool)
        feats.append(F.normalize(triple.v_proj, dim=-1).double().numpy())
        if record is not None:
            routes.append(record.selected.numpy())
    image_encoder.train(was_training)
    return np.concatenate(feats), (np.concatenate(routes) if routes else None)


@dataclass
class SplitResult:
    domain: int
    split: str  # "seen" or "unseen"
    mAP: float
    R1: float


@dataclass
class StageReport:
    stage: int
    results: list[SplitResult]
    drift: float = float("nan")
    rho_pearson: float = float("nan")
    rho_spearman: float = float("nan")

    def _avg(self, split: str, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.results if r.split == split]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def seen_avg(self) -> tuple[float, float]:
        return self._avg("seen", "mAP"), self._avg("seen", "R1")

    @property
    def unseen_avg(self) -> tuple[float, float]:
        return self._avg("unseen", "mAP"), self._avg("unseen", "R1")

    def to_dict(self) -> dict:
        return {"stage": self.stage, "drift": self.drift, "rho_pearson": self.rho_pearson,
                "rho_spearman": self.rho_spearman,
                "results": [[r.domain, r.split, r.mAP, r.R1] for r in self.results]}

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(d["stage"], [SplitResult(int(a), b, float(c), float(e)) for a, b, c, e in d["results"]],
                   float(d["drift"]), float(d["rho_pearson"]), float(d["rho_spearman"]))


@dataclass
class MetricsReport:
    stages: list[StageReport] = field(default_factory=list)

    def forgetting(self) -> dict[int, float]:
        """Per seen domain: best mAP at an earlier stage minus the final-stage mAP."""
        if not self.stages:
            return {}
        final = {r.domain: r.mAP for r in self.stages[-1].results if r.split == "seen"}
        out = {}
        for dom, last in final.items():
            prior = [r.mAP for s in self.stages[:-1] for r in s.results
                     if r.split == "seen" and r.domain == dom]
            out[dom] = (max(prior) - last) if prior else 0.0
        return out

    def final_seen_map(self) -> float:
        return self.stages[-1].seen_avg[0]

    def write_metrics_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["stage", "domain", "split", "mAP", "R1"])
            for s in self.stages:
                for r in s.results:
                    w.writerow([s.stage, r.domain, r.split, _fmt(r.mAP), _fmt(r.R1)])

    def write_diagnostics_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["stage", "drift", "rho_pearson", "rho_spearman"])
            for s in self.stages:
                w.writerow([s.stage, _fmt(s.drift), _fmt(s.rho_pearson), _fmt(s.rho_spearman)])

    @classmethod
    def read_metrics_csv(cls, path: str | Path) -> "MetricsReport":
        stages: dict[int, StageReport] = {}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                t = int(row["stage"])
                stages.setdefault(t, StageReport(t, []))
                stages[t].results.append(SplitResult(int(row["domain"]), row["split"],
                                                     float(row["mAP"]), float(row["R1"])))
        return cls([stages[t] for t in sorted(stages)])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.10f}"


@dataclass
class ProtocolOutput:
    report: StageReport
    features: dict[tuple[str, int], np.ndarray]
    routes: dict[tuple[str, int], np.ndarray | None]


def evaluate_protocol(image_encoder, pool, seen_splits: list[EvalSplit], unseen_splits: list[EvalSplit],
                      stage: int = 0) -> ProtocolOutput:
    """Score every seen and unseen split with the image encoder alone."""
    results, feats, routes = [], {}, {}
    for split_name, splits in (("seen", seen_splits), ("unseen", unseen_splits)):
        for d, sp in enumerate(splits):
            if len(sp.query) == 0 or len(sp.gallery) == 0:
                raise ValueError(f"empty {split_name} split {d}")
            qf, qr = embed_images(image_encoder, pool, sp.query)
            gf, gr = embed_images(image_encoder, pool, sp.gallery)
            mAP, r1 = retrieval_metrics(qf, sp.query.identities, sp.query.cameras,
                                        gf, sp.gallery.identities, sp.gallery.cameras)
            results.append(SplitResult(d, split_name, mAP, r1))
            feats[(split_name, d)] = np.concatenate([qf, gf])
            routes[(split_name, d)] = None if qr is None else np.concatenate([qr, gr])
    return ProtocolOutput(StageReport(stage, results), feats, routes)


def chance_map(q_ids: np.ndarray, q_cams: np.ndarray, g_ids: np.ndarray, g_cams: np.ndarray,
               n_sim: int = 200, seed: int = 0) -> float:
    """Expected mAP of uniformly random rankings for the given split geometry."""
    rng = np.random.default_rng(seed)
    pos = positives_for(q_ids, q_cams, g_ids, g_cams)
    vals = []
    for _ in range(n_sim):
        dist = rng.uniform(size=(len(q_ids), len(g_ids)))
        vals.append(compute_map(rank_gallery(dist, q_ids, q_cams, g_ids, g_cams), pos)[0])
    return float(np.mean(vals))


# --- diagnostics --------------------------------------------------------------------

def max_cosine_score(v: torch.Tensor | np.ndarray, text_bank: torch.Tensor | np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    bank = np.asarray(text_bank, dtype=np.float64)
    if bank.shape[0] == 0:
        raise ValueError("empty text bank")
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
    return float((v @ bank.T).max(axis=1).mean())


def semantic_drift_score(image_encoder, pool, split: EvalSplit, text_bank) -> float:
    """Mean over query images of the best cosine to any frozen text prototype."""
    feats, _ = embed_images(image_encoder, pool, split.query)
    bank = text_bank.features if hasattr(text_bank, "features") else text_bank
    return max_cosine_score(feats, bank.detach().double().numpy() if torch.is_tensor(bank) else bank)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        return float("nan")
    return float(x @ y) / denom


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    return pearson(rankdata(x), rankdata(y))


def activation_histogram(selected: np.ndarray, pool_size: int) -> np.ndarray:
    """Normalized selection counts per (layer, slot) over a domain's images."""
    n_layers = selected.shape[1]
    hist = np.zeros((n_layers, pool_size))
    for layer in range(n_layers):
        hist[layer] = np.bincount(selected[:, layer].ravel(), minlength=pool_size)
    return (hist / hist.sum()).ravel()


@dataclass
class RoutingCorrelation:
    pearson: float
    spearman: float
    degenerate: bool
    n_pairs: int


def prompt_routing_correlation(routing_records: list[np.ndarray], features: list[np.ndarray],
                               pool_size: int | None = None) -> RoutingCorrelation:
    """Correlate pairwise-domain routing similarity with pairwise-domain feature similarity.

    ``routing_records[d]`` holds the (images, layers, k) selections of domain d
    and ``features[d]`` its unit-norm embeddings.
    """
    if len(routing_records) < 2 or len(routing_records) != len(features):
        raise ValueError("need routing records and features for at least two domains")
    size = pool_size or int(max(r.max() for r in routing_records)) + 1
    hists = [activation_histogram(r, size) for r in routing_records]
    means = [np.asarray(f, dtype=np.float64).mean(0) for f in features]
    act_sim, feat_sim = [], []
    for i in range(len(hists)):
        for j in range(i + 1, len(hists)):
            act_sim.append(_cos(hists[i], hists[j]))
            feat_sim.append(_cos(means[i], means[j]))
    p = pearson(np.array(act_sim), np.array(feat_sim))
    s = spearman(np.array(act_sim), np.array(feat_sim))
    return RoutingCorrelation(p, s, math.isnan(p), len(act_sim))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
