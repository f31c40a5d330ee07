"""Fidelity, consistency, sparsity and accuracy-drop metrics.

All functions are pure and operate on plain arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    gold_index: int
    full: np.ndarray
    detached: np.ndarray

    @property
    def predicted_full(self) -> int:
        return int(np.argmax(self.full))

    @property
    def predicted_detached(self) -> int:
        return int(np.argmax(self.detached))


@dataclass(frozen=True)
class MetricReport:
    accuracy_full: float
    accuracy_detached: float
    f_kg: float
    c_lk: float
    N: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DistributionError(f"{name} must be a nonempty vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DistributionError(f"{name} is not a probability distribution")
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def jsd(p, q, lam: float = 0.5) -> float:
    """Weighted Jensen-Shannon divergence (natural log) against the mixture."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise DistributionError(f"length mismatch: {p.size} vs {q.size}")
    if not 0.0 < lam < 1.0:
        raise DistributionError(f"lambda must lie in (0, 1), got {lam}")
    mix = lam * p + (1.0 - lam) * q
    return max(0.0, lam * _kl(p, mix) + (1.0 - lam) * _kl(q, mix))


def fidelity_fkg(records: Sequence[EvalRecord]) -> float:
    """Fraction of instances where full and detached predictions agree."""
    if not records:
        raise ContractError("fidelity_fkg needs at least one record")
    agree = sum(r.predicted_full == r.predicted_detached for r in records)
    return agree / len(records)


def consistency_clk(records: Sequence[EvalRecord], lam: float = 0.5) -> float:
    """Mean divergence between full and detached distributions; lower is better."""
    if not records:
        raise ContractError("consistency_clk needs at least one record")
    return math.fsum(jsd(r.full, r.detached, lam) for r in records) / len(records)


def sparsity(masked_rows: int, total_nodes: int) -> float:
    if total_nodes <= 0:
        raise ContractError("total_nodes must be positive")
    if not 0 <= masked_rows <= total_nodes:
        raise ContractError(f"masked_rows={masked_rows} outside [0, {total_nodes}]")
    return masked_rows / total_nodes


def delta_acc(acc_original: float, acc_perturbed: float) -> float:
    """Signed accuracy drop caused by a perturbation."""
    return acc_original - acc_perturbed


def accuracy(predictions: Sequence[int], gold: Sequence[int]) -> float:
    if len(predictions) != len(gold) or not gold:
        raise ContractError("accuracy needs equal-length, nonempty inputs")
    return sum(int(p == g) for p, g in zip(predictions, gold)) / len(gold)


def report(records: Sequence[EvalRecord], lam: float = 0.5) -> MetricReport:
    gold = [r.gold_index for r in records]
    return MetricReport(
        accuracy_full=accuracy([r.predicted_full for r in records], gold),
        accuracy_detached=accuracy([r.predicted_detached for r in records], gold),
        f_kg=fidelity_fkg(records),
        c_lk=consistency_clk(records, lam),
        N=len(records),
    )
