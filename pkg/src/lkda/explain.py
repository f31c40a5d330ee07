"""Perturbation-based explanation evaluation.

Nodes are ranked by the final-layer attention they send into the context
node, then node feature rows are masked in rank order (or at random) over a
sparsity grid to trace a fidelity-sparsity curve.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data import McqInstance
from .model import FusionModel

POLICIES = ("original", "random", "top")
DEFAULT_GRID = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
CURVE_COLUMNS = ("policy", "sparsity", "accuracy", "seed", "model_id")
_EPS = 1e-9


@dataclass(frozen=True)
class ImportanceRanking:
    """Per choice, ``(node_id, score)`` pairs over maskable nodes, best first."""

    choices: tuple[tuple[tuple[int, float], ...], ...]

    def order(self, choice: int) -> list[int]:
        return [node for node, _ in self.choices[choice]]

    def __len__(self) -> int:
        return len(self.choices)


@dataclass
class FidelitySparsityCurve:
    policy: str
    points: list[tuple[float, float]]
    seed: int = 0
    corpus_id: str = ""
    model_id: str = ""
    per_instance: list[list[bool]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ContractError(f"unknown policy {self.policy!r}")
        s = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ContractError("curve sparsities must be strictly increasing")
        if any(not 0.0 <= x <= 1.0 for p in self.points for x in p):
            raise ContractError("curve sparsities and accuracies must lie in [0, 1]")

    @property
    def sparsities(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def rows(self) -> list[tuple]:
        return [(self.policy, s, a, self.seed, self.model_id) for s, a in self.points]


# -------------------------------------------------------------- importance


def _rank(scores: np.ndarray, exclude: int) -> tuple[tuple[int, float], ...]:
    nodes = [j for j in range(scores.size) if j != exclude]
    nodes.sort(key=lambda j: (-scores[j], j))
    return tuple((j, float(scores[j])) for j in nodes)


def _importance_batch(model: FusionModel, instances: Sequence[McqInstance]) -> list[ImportanceRanking]:
    with ad.no_grad():
        out = model.forward(list(instances))
    gb = out.graphs
    alpha = out.attention[-1].mean(axis=1)
    src, tgt = gb.src.ids, gb.tgt.ids
    is_ctx = np.zeros(gb.num_nodes, dtype=bool)
    is_ctx[gb.context_rows] = True
    into_ctx = is_ctx[tgt]
    scores = np.zeros(gb.num_nodes)
    np.add.at(scores, src[into_ctx], alpha[into_ctx])

    rankings, k = [], 0
    for inst in instances:
        per_choice = []
        for _ in range(inst.n_choices):
            lo, hi = gb.node_offsets[k], gb.node_offsets[k + 1]
            per_choice.append(_rank(scores[lo:hi], int(gb.context_rows[k] - lo)))
            k += 1
        rankings.append(ImportanceRanking(tuple(per_choice)))
    return rankings


def attention_importance(model: FusionModel, instance: McqInstance) -> ImportanceRanking:
    """Rank maskable nodes by head-mean final-layer attention into the context node."""
    return _importance_batch(model, [instance])[0]


def importance_rankings(model: FusionModel, instances: Sequence[McqInstance],
                        chunk: int = 200) -> list[ImportanceRanking]:
    out: list[ImportanceRanking] = []
    for i in range(0, len(instances), chunk):
        out.extend(_importance_batch(model, instances[i:i + chunk]))
    return out


# ------------------------------------------------------------------- sweep


def mask_count(s: float, maskable: int) -> int:
    # the epsilon keeps e.g. 0.3 * 10 from rounding up to 4
    return min(maskable, max(0, math.ceil(s * maskable - _EPS)))


def _random_masks(inst: McqInstance, index: int, s: float, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, index, int(round(s * 1_000_000))])
    masks = []
    for g in inst.subgraphs:
        nodes = g.maskable_nodes()
        k = mask_count(s, len(nodes))
        picked = rng.choice(len(nodes), size=k, replace=False)
        masks.append(sorted(nodes[int(i)] for i in picked))
    return masks


def _top_masks(ranking: ImportanceRanking, inst: McqInstance, s: float) -> list[list[int]]:
    masks = []
    for c, g in enumerate(inst.subgraphs):
        order = ranking.order(c)
        masks.append(sorted(order[:mask_count(s, len(g.maskable_nodes()))]))
    return masks


def _check_grid(grid: Sequence[float]) -> list[float]:
    grid = [float(s) for s in grid]
    if not grid or grid[0] != 0.0:
        raise ContractError("sparsity grid must start at 0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ContractError("sparsity grid must be sorted strictly ascending")
    if grid[-1] > 1.0:
        raise ContractError("sparsity grid must lie within [0, 1]")
    return grid


def _correct(model: FusionModel, instances, masks, chunk: int) -> list[bool]:
    hits: list[bool] = []
    for i in range(0, len(instances), chunk):
        batch = instances[i:i + chunk]
        with ad.no_grad():
            out = model.forward(batch, masks=masks[i:i + chunk])
        pred = np.argmax(out.scores.values, axis=1)
        hits.extend(bool(p == inst.gold_index) for p, inst in zip(pred, batch))
    return hits


def sweep(model: FusionModel, instances: Sequence[McqInstance], policy: str,
          sparsity_grid: Sequence[float] = DEFAULT_GRID, seed: int = 0, *,
          baseline: FusionModel | None = None, model_id: str = "", corpus_id: str = "",
          chunk: int = 200) -> FidelitySparsityCurve:
    """Accuracy under node-feature masking at each sparsity of the grid.

    ``top`` masks the highest-ranked nodes of ``model``; ``random`` masks a
    seeded uniform subset; ``original`` applies top masking to ``baseline``
    using that model's own ranking.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    grid = _check_grid(sparsity_grid)
    instances = list(instances)
    if not instances:
        raise ContractError("sweep needs at least one instance")
    if policy == "original":
        if baseline is None:
            raise ContractError("policy 'original' needs the baseline model")
        model = baseline
    rankings = importance_rankings(model, instances, chunk) if policy != "random" else None

    points, per_instance = [], []
    for s in grid:
        masks = []
        for idx, inst in enumerate(instances):
            if policy == "random":
                m = _random_masks(inst, idx, s, seed)
            else:
                m = _top_masks(rankings[idx], inst, s)
            for c, g in enumerate(inst.subgraphs):
                if g.context_node in m[c]:
                    raise ContractError("masking touched the context node")
            masks.append(m)
        hits = _correct(model, instances, masks, chunk)
        per_instance.append(hits)
        points.append((s, sum(hits) / len(hits)))
    return FidelitySparsityCurve(policy, points, seed, corpus_id, model_id, per_instance)


def auc_drop(curve: FidelitySparsityCurve) -> float:
    """Trapezoidal area between the s=0 accuracy line and the curve."""
    if len(curve.points) < 2:
        raise ContractError("auc_drop needs at least two points")
    s, acc = curve.sparsities, curve.accuracies
    return float(np.trapezoid(acc[0] - acc, s))


# ---------------------------------------------------------------- recovery


def recovery_score(ranking: Sequence[int], planted_path: Sequence[int], k: int) -> float | None:
    """Precision of the top-k ranked nodes against the planted path; None if no path."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not planted_path:
        return None
    hit = len(set(list(ranking)[:k]) & set(planted_path))
    return hit / min(k, len(planted_path))


def random_recovery_moments(n_candidates: int, path_len: int, k: int) -> tuple[float, float]:
    """Mean and variance of the recovery score for a uniformly random ranking."""
    N, K, n = n_candidates, path_len, min(k, n_candidates)
    mean_hits = n * K / N
    var_hits = n * (K / N) * ((N - K) / N) * ((N - n) / (N - 1)) if N > 1 else 0.0
    d = min(k, path_len)
    return mean_hits / d, var_hits / (d * d)


def gold_recovery(model: FusionModel, instances: Sequence[McqInstance]) -> dict:
    """Mean recovery@|path| on each gold choice versus the random-ranking expectation."""
    rankings = importance_rankings(model, list(instances))
    scores, means, variances = [], [], []
    for inst, ranking in zip(instances, rankings):
        path = inst.planted_path[inst.gold_index]
        if not path:
            continue
        order = ranking.order(inst.gold_index)
        scores.append(recovery_score(order, path, len(path)))
        m, v = random_recovery_moments(len(order), len(set(path)), len(path))
        means.append(m)
        variances.append(v)
    if not scores:
        raise ContractError("no instance carries a planted path")
    n = len(scores)
    return {
        "recovery": float(np.mean(scores)),
        "random_mean": float(np.mean(means)),
        "random_sigma": float(math.sqrt(sum(variances)) / n),
        "n": n,
    }


# --------------------------------------------------------------------- io


def curves_to_csv(curves: Sequence[FidelitySparsityCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for curve in curves:
        for policy, s, a, seed, mid in curve.rows():
            w.writerow([policy, repr(float(s)), repr(float(a)), seed, mid])
    return buf.getvalue()


def read_curves_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["sparsity"] = float(r["sparsity"])
        r["accuracy"] = float(r["accuracy"])
        r["seed"] = int(r["seed"])
    return rows
