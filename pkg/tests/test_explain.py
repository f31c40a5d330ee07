from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import hypergeom

from lkda import explain as ex
from lkda.autodiff import ContractError
from lkda.data import CONTEXT, RelationalSubgraph
from lkda.model import FusionModel, ModelConfig

from test_model import _permute


@pytest.fixture(scope="module")
def model():
    return FusionModel(ModelConfig(), seed=8)


@pytest.fixture(scope="module")
def instances(small_corpus):
    return small_corpus.test


def test_ranking_covers_maskable_nodes(model, instances):
    for inst in instances[:10]:
        ranking = ex.attention_importance(model, inst)
        assert len(ranking) == inst.n_choices
        for c, g in enumerate(inst.subgraphs):
            order = ranking.order(c)
            assert sorted(order) == sorted(g.maskable_nodes())
            assert g.context_node not in order
            scores = [s for _, s in ranking.choices[c]]
            keys = [(-s, j) for j, s in ranking.choices[c]]
            assert keys == sorted(keys) and all(a >= b for a, b in zip(scores, scores[1:]))


def test_ranking_scores_match_dense_attention(model, instances):
    inst = instances[0]
    ranking = ex.attention_importance(model, inst)
    _, traces = model.predict(inst)
    for c, g in enumerate(inst.subgraphs):
        final = np.mean(traces[c].attention[-1], axis=0)
        for node, score in ranking.choices[c]:
            assert score == pytest.approx(final[node, g.context_node], abs=1e-12)


def test_ranking_deterministic(model, instances):
    assert ex.attention_importance(model, instances[1]) == ex.attention_importance(model, instances[1])


def test_single_maskable_node(model):
    feats = np.zeros((2, model.config.d_node))
    feats[1] = 1.0
    g = RelationalSubgraph(2, [CONTEXT, "question_concept"], [-1, 0], [(0, 1, 0)], 6, feats)
    from lkda.data import McqInstance

    inst = McqInstance([1, 2], [[5]], [g], 0, [[]])
    ranking = ex.attention_importance(model, inst)
    _, traces = model.predict(inst)
    raw = float(np.mean(traces[0].attention[-1], axis=0)[1, 0])
    assert ranking.choices[0] == ((1, pytest.approx(raw, abs=1e-12)),)


def test_ranking_permutation_equivariant(model, instances):
    import dataclasses

    rng = np.random.default_rng(3)
    inst = instances[2]
    perms = [rng.permutation(g.num_nodes) for g in inst.subgraphs]
    permuted = dataclasses.replace(inst, subgraphs=[_permute(g, p) for g, p in zip(inst.subgraphs, perms)])
    a = ex.attention_importance(model, inst)
    b = ex.attention_importance(model, permuted)
    for c, perm in enumerate(perms):
        sa = {int(perm[j]): s for j, s in a.choices[c]}
        sb = dict(b.choices[c])
        assert sa.keys() == sb.keys()
        for k in sa:
            assert sb[k] == pytest.approx(sa[k], abs=1e-12)


def test_mask_count_uses_exact_ceiling():
    assert ex.mask_count(0.3, 10) == 3
    assert ex.mask_count(0.05, 10) == 1
    assert ex.mask_count(1.0, 7) == 7
    assert ex.mask_count(0.0, 7) == 0


def test_sweep_endpoints(model, instances):
    acc0 = np.mean([model.predict(i)[0].predicted_index == i.gold_index for i in instances])
    curves = [ex.sweep(model, instances, "random", seed=s) for s in (0, 1)]
    top = ex.sweep(model, instances, "top")
    for c in curves + [top]:
        assert c.points[0] == (0.0, acc0)
    assert curves[0].points[-1] == curves[1].points[-1] == top.points[-1]
    assert curves[0].points != curves[1].points


def test_sweep_validation(model, instances):
    with pytest.raises(ContractError):
        ex.sweep(model, instances, "top", [0.0, 0.5, 0.3])
    with pytest.raises(ContractError):
        ex.sweep(model, instances, "top", [0.1, 0.5])
    with pytest.raises(ContractError):
        ex.sweep(model, instances, "original")
    with pytest.raises(ContractError):
        ex.sweep(model, instances, "bogus")


def test_random_draws_independent_of_chunking(model, instances):
    a = ex.sweep(model, instances, "random", [0.0, 0.3], seed=5, chunk=7)
    b = ex.sweep(model, instances, "random", [0.0, 0.3], seed=5, chunk=200)
    assert a.points == b.points


def test_auc_drop_examples():
    flat = ex.FidelitySparsityCurve("top", [(0.0, 0.8), (0.5, 0.8), (1.0, 0.8)])
    assert ex.auc_drop(flat) == 0.0
    a = 0.9
    linear = ex.FidelitySparsityCurve("top", [(0.0, a), (1.0, 0.25)])
    assert ex.auc_drop(linear) == pytest.approx((a - 0.25) / 2, abs=1e-15)
    with pytest.raises(ContractError):
        ex.auc_drop(ex.FidelitySparsityCurve("top", [(0.0, 0.5)]))


def test_auc_drop_matches_independent_integration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = np.sort(np.concatenate([[0.0], rng.random(6)]))
        acc = rng.random(7)
        curve = ex.FidelitySparsityCurve("random", list(zip(s.tolist(), acc.tolist())))
        manual = sum((s[i + 1] - s[i]) * ((acc[0] - acc[i]) + (acc[0] - acc[i + 1])) / 2
                     for i in range(6))
        assert ex.auc_drop(curve) == pytest.approx(manual, abs=1e-12)


def test_curve_invariants():
    with pytest.raises(ContractError):
        ex.FidelitySparsityCurve("top", [(0.0, 0.5), (0.0, 0.4)])
    with pytest.raises(ContractError):
        ex.FidelitySparsityCurve("top", [(0.0, 1.5)])


def test_recovery_examples():
    assert ex.recovery_score([4, 2, 9, 1], [2, 4, 9], 3) == 1.0
    assert ex.recovery_score([1, 3, 5], [2, 4], 2) == 0.0
    assert ex.recovery_score([1, 2, 3], [2, 7], 1) == 0.0
    assert ex.recovery_score([1, 2, 3], [], 2) is None
    with pytest.raises(ContractError):
        ex.recovery_score([1], [1], 0)


def test_random_recovery_moments_match_scipy():
    for N, K, k in [(10, 3, 3), (20, 3, 5), (7, 3, 2)]:
        mean, var = ex.random_recovery_moments(N, K, k)
        d = min(k, K)
        assert mean == pytest.approx(hypergeom.mean(N, K, k) / d, abs=1e-12)
        assert var == pytest.approx(hypergeom.var(N, K, k) / d ** 2, abs=1e-12)


def test_random_ranking_recovery_matches_hypergeometric(instances):
    rng = np.random.default_rng(1)
    scores, means, variances = [], [], []
    for inst in instances:
        path = inst.planted_path[inst.gold_index]
        nodes = inst.subgraphs[inst.gold_index].maskable_nodes()
        order = list(rng.permutation(nodes))
        scores.append(ex.recovery_score(order, path, len(path)))
        m, v = ex.random_recovery_moments(len(nodes), len(path), len(path))
        means.append(m)
        variances.append(v)
    sigma = math.sqrt(sum(variances)) / len(scores)
    assert abs(np.mean(scores) - np.mean(means)) < 2 * sigma


def test_curve_csv_round_trip(model, instances):
    c = ex.sweep(model, instances[:10], "top", [0.0, 0.5, 1.0], model_id="m")
    rows = ex.read_curves_csv(ex.curves_to_csv([c]))
    assert [(r["sparsity"], r["accuracy"]) for r in rows] == c.points
    assert rows[0].keys() == set(ex.CURVE_COLUMNS)
