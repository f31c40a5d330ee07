"""Text + relational-graph fusion model for multiple-choice QA.

A statement ``[question; SEP; choice]`` is encoded by a single self-attention
block into a context embedding ``z``.  Each choice subgraph is encoded by a
relational graph-attention network whose context node is seeded from ``z``;
the pooled graph embedding ``g`` (the context node's final state) is fused
with ``z`` and scored.  Choices are normalised with a softmax.

The detached forward pass replaces every text-derived signal (context-node
seed and the fusion input) by a fill vector, leaving weights and node
features untouched.

All instances and choices of a batch run as one disjoint union of graphs and
token sequences, so per-layer cost is a fixed number of array operations.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .data import CONTEXT, McqInstance, RelationalSubgraph, SEP_TOKEN


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_node: int = 32
    d_model: int = 32
    d_graph: int = 32
    d_joint: int = 32
    gnn_layers: int = 3
    heads: int = 2
    n_relations: int = 6
    max_len: int = 16
    fusion: str = "concat_mlp"
    dropout: float = 0.0
    detach_fill: float = 0.0

    def validate(self) -> None:
        for name in ("vocab_size", "d_node", "d_model", "d_graph", "d_joint",
                     "gnn_layers", "heads", "n_relations", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_graph % self.heads:
            raise ValueError(f"d_graph={self.d_graph} not divisible by heads={self.heads}")
        if self.fusion != "concat_mlp":
            raise ValueError(f"unknown fusion kind {self.fusion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def relation_slots(self) -> int:
        # forward relations, their inverses, and the self loop
        return 2 * self.n_relations + 1


TEXT_PREFIX = "text."


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters keyed by canonical name."""
    config.validate()
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(scale=1.0 / math.sqrt(n_in), size=(n_in, n_out))

    dm, D, J = config.d_model, config.d_graph, config.d_joint
    p: dict[str, np.ndarray] = {
        "text.tok_emb": rng.normal(scale=0.5, size=(config.vocab_size, dm)),
        "text.pos_emb": rng.normal(scale=0.5, size=(config.max_len, dm)),
        "text.wq": dense(dm, dm),
        "text.wk": dense(dm, dm),
        "text.wv": dense(dm, dm),
        "text.proj_w": dense(dm, dm),
        "text.proj_b": np.zeros(dm),
        "graph.node_in": dense(config.d_node, D),
        "graph.ctx_in": dense(dm, D),
    }
    for layer in range(config.gnn_layers):
        pre = f"graph.l{layer}."
        p[pre + "wq"] = dense(D, D)
        p[pre + "wk"] = dense(D, D)
        p[pre + "wv"] = dense(D, D)
        p[pre + "rel_key"] = 1.0 + 0.5 * rng.normal(size=(config.relation_slots, D))
        p[pre + "rel_msg"] = 1.0 + 0.5 * rng.normal(size=(config.relation_slots, D))
        p[pre + "fn1"] = dense(D, D)
        p[pre + "fn2"] = 0.5 * dense(D, D)
    p["fuse.w"] = dense(dm + D, J)
    p["fuse.b"] = np.zeros(J)
    p["head.w1"] = dense(J, J)
    p["head.b1"] = np.zeros(J)
    p["head.w2"] = 0.1 * dense(J, 1)
    p["head.b2"] = np.zeros(1)
    return {k: ad.parameter(v) for k, v in p.items()}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config, 0).items()}


def is_text_param(name: str) -> bool:
    return name.startswith(TEXT_PREFIX)


# ----------------------------------------------------------------- batching


def _graph_arrays(g: RelationalSubgraph, n_relations: int):
    """Edge arrays with inverse edges and self loops appended (cached per graph)."""
    cached = getattr(g, "_lkda_arrays", None)
    if cached is not None and cached[0] == n_relations:
        return cached[1]
    if g.features.shape[0] != g.num_nodes:
        raise ad.DimensionError(
            f"features have {g.features.shape[0]} rows for {g.num_nodes} nodes"
        )
    e = np.asarray(g.edges, dtype=np.int64).reshape(-1, 3)
    if e.size and (e[:, :2].max() >= g.num_nodes or e[:, :2].min() < 0):
        raise InputError("edge endpoint out of range")
    if e.size and (e[:, 2].max() >= n_relations or e[:, 2].min() < 0):
        raise InputError(f"relation id out of range for {n_relations} relations")
    loops = np.arange(g.num_nodes)
    src = np.concatenate([e[:, 0], e[:, 1], loops])
    tgt = np.concatenate([e[:, 1], e[:, 0], loops])
    rel = np.concatenate([e[:, 2], e[:, 2] + n_relations, np.full(g.num_nodes, 2 * n_relations)])
    arrays = (src, tgt, rel, g.context_node)
    object.__setattr__(g, "_lkda_arrays", (n_relations, arrays))
    return arrays


@dataclass
class GraphBatch:
    features: np.ndarray
    context_rows: np.ndarray
    src: SegmentIndex
    tgt: SegmentIndex
    rel: SegmentIndex
    node_offsets: np.ndarray
    edge_offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @classmethod
    def build(cls, graphs, config: ModelConfig, masks=None) -> "GraphBatch":
        feats, ctx, srcs, tgts, rels = [], [], [], [], []
        node_off, edge_off = [0], [0]
        for i, g in enumerate(graphs):
            src, tgt, rel, c = _graph_arrays(g, config.n_relations)
            if g.features.shape[1] != config.d_node:
                raise ad.DimensionError(
                    f"node features have width {g.features.shape[1]}, model expects {config.d_node}"
                )
            f = g.features
            if masks is not None and len(masks[i]):
                rows = np.asarray(sorted(masks[i]), dtype=np.int64)
                if c in set(rows.tolist()):
                    raise ad.ContractError("the context node cannot be masked")
                if rows.min() < 0 or rows.max() >= g.num_nodes:
                    raise InputError("masked row out of range")
                f = f.copy()
                f[rows] = 0.0
            base = node_off[-1]
            feats.append(f)
            ctx.append(base + c)
            srcs.append(src + base)
            tgts.append(tgt + base)
            rels.append(rel)
            node_off.append(base + g.num_nodes)
            edge_off.append(edge_off[-1] + src.size)
        n = node_off[-1]
        return cls(
            features=np.concatenate(feats),
            context_rows=np.asarray(ctx, dtype=np.int64),
            src=SegmentIndex(np.concatenate(srcs), n),
            tgt=SegmentIndex(np.concatenate(tgts), n),
            rel=SegmentIndex(np.concatenate(rels), config.relation_slots),
            node_offsets=np.asarray(node_off),
            edge_offsets=np.asarray(edge_off),
        )


@dataclass
class TextBatch:
    tokens: np.ndarray
    positions: np.ndarray
    seq: SegmentIndex
    pair_i: SegmentIndex
    pair_j: SegmentIndex
    vocab_size: int
    max_len: int

    @classmethod
    def build(cls, sequences, config: ModelConfig) -> "TextBatch":
        tokens, positions, seq_ids, pi, pj = [], [], [], [], []
        offset = 0
        for s, toks in enumerate(sequences):
            L = len(toks)
            if L == 0:
                raise InputError("empty token sequence")
            if L > config.max_len:
                raise InputError(f"sequence of length {L} exceeds max_len={config.max_len}")
            arr = np.asarray(toks, dtype=np.int64)
            if arr.min() < 0 or arr.max() >= config.vocab_size:
                raise InputError(f"token id out of vocabulary (size {config.vocab_size})")
            tokens.append(arr)
            positions.append(np.arange(L))
            seq_ids.append(np.full(L, s))
            ii, jj = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
            pi.append(ii.reshape(-1) + offset)
            pj.append(jj.reshape(-1) + offset)
            offset += L
        return cls(
            tokens=np.concatenate(tokens),
            positions=np.concatenate(positions),
            seq=SegmentIndex(np.concatenate(seq_ids), len(sequences)),
            pair_i=SegmentIndex(np.concatenate(pi), offset),
            pair_j=SegmentIndex(np.concatenate(pj), offset),
            vocab_size=config.vocab_size,
            max_len=config.max_len,
        )


def statement_tokens(instance: McqInstance, choice: int) -> list[int]:
    return list(instance.question_tokens) + [SEP_TOKEN] + list(instance.choices[choice])


# ------------------------------------------------------------------- traces


@dataclass
class ForwardTrace:
    z: np.ndarray | None
    attention: list[list[np.ndarray]]
    g: np.ndarray
    score: float


@dataclass
class ChoiceDistribution:
    probabilities: np.ndarray

    @property
    def predicted_index(self) -> int:
        # np.argmax returns the first maximum, i.e. lowest-index tie-break
        return int(np.argmax(self.probabilities))


@dataclass
class BatchOutput:
    scores: Tensor
    z: Tensor | None
    g: Tensor
    attention: list[np.ndarray] = field(default_factory=list)
    graphs: GraphBatch | None = None

    def distributions(self) -> list[ChoiceDistribution]:
        s = self.scores.values
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        return [ChoiceDistribution(row) for row in p]


def dense_attention(alpha: np.ndarray, batch: GraphBatch, graph: int, heads: int) -> list[np.ndarray]:
    """Per-head ``n x n`` matrices ``A[s, j]`` for one graph of the batch."""
    lo, hi = batch.node_offsets[graph], batch.node_offsets[graph + 1]
    elo, ehi = batch.edge_offsets[graph], batch.edge_offsets[graph + 1]
    n = hi - lo
    src = batch.src.ids[elo:ehi] - lo
    tgt = batch.tgt.ids[elo:ehi] - lo
    out = []
    for h in range(heads):
        m = np.zeros((n, n))
        np.add.at(m, (src, tgt), alpha[elo:ehi, h])
        out.append(m)
    return out


# -------------------------------------------------------------------- model


class FusionModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        missing = set(param_shapes(config)) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        D, H = config.d_graph, config.heads
        dh = D // H
        # block matrices summing each head's coordinates, and spreading per-head weights back
        self._head_sum = Tensor(np.kron(np.eye(H), np.ones((dh, 1))))
        self._head_expand = Tensor(np.kron(np.eye(H), np.ones((1, dh))))
        self._dot = Tensor(np.ones((config.d_model, 1)))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ---- text encoder
    def encode_text_batch(self, tb: TextBatch, rng=None) -> Tensor:
        p = self.params
        x = ad.add(ad.gather_rows(p["text.tok_emb"], tb.tokens),
                   ad.gather_rows(p["text.pos_emb"], tb.positions))
        q = ad.matmul(x, p["text.wq"])
        k = ad.matmul(x, p["text.wk"])
        v = ad.matmul(x, p["text.wv"])
        scores = ad.scale(
            ad.matmul(ad.mul(ad.gather_rows(q, tb.pair_i), ad.gather_rows(k, tb.pair_j)), self._dot),
            1.0 / math.sqrt(self.config.d_model),
        )
        attn = ad.segment_softmax(scores, tb.pair_i)
        mixed = ad.segment_sum(ad.mul(ad.gather_rows(v, tb.pair_j), attn), tb.pair_i)
        h = ad.dropout(ad.add(x, mixed), self.config.dropout, rng)
        pooled = ad.segment_mean(h, tb.seq)
        return ad.tanh(ad.add(ad.matmul(pooled, p["text.proj_w"]), p["text.proj_b"]))

    def encode_text(self, tokens) -> Tensor:
        """Context embedding ``z`` (length ``d_model``) for one token sequence."""
        return ad.reshape(self.encode_text_batch(TextBatch.build([tokens], self.config)),
                          (self.config.d_model,))

    # ---- graph encoder
    def encode_graph_batch(self, gb: GraphBatch, z: Tensor | None, detached: bool,
                           rng=None, zero_message_mlp: bool = False):
        """Node embeddings after all layers plus per-layer edge attention (E x H)."""
        cfg, p = self.config, self.params
        D, H = cfg.d_graph, cfg.heads
        n_graphs = gb.context_rows.size
        v = ad.matmul(Tensor(gb.features), p["graph.node_in"])
        if detached:
            seed = Tensor(np.full((n_graphs, D), cfg.detach_fill))
        else:
            if z is None:
                raise ad.ContractError("encode_graph needs z unless detached")
            seed = ad.matmul(z, p["graph.ctx_in"])
        ctx_index = SegmentIndex(gb.context_rows, gb.num_nodes)
        v = ad.add(ad.zero_mask(v, gb.context_rows), ad.segment_sum(seed, ctx_index))
        inv_sqrt = 1.0 / math.sqrt(D // H)
        attention = []
        for layer in range(cfg.gnn_layers):
            pre = f"graph.l{layer}."
            q = ad.matmul(v, p[pre + "wq"])
            k = ad.matmul(v, p[pre + "wk"])
            m = ad.matmul(v, p[pre + "wv"])
            k_e = ad.mul(ad.gather_rows(k, gb.src), ad.gather_rows(p[pre + "rel_key"], gb.rel))
            q_e = ad.gather_rows(q, gb.tgt)
            scores = ad.scale(ad.matmul(ad.mul(q_e, k_e), self._head_sum), inv_sqrt)
            alpha = ad.segment_softmax(scores, gb.tgt)
            attention.append(alpha.values)
            m_e = ad.mul(ad.gather_rows(m, gb.src), ad.gather_rows(p[pre + "rel_msg"], gb.rel))
            weighted = ad.mul(m_e, ad.matmul(alpha, self._head_expand))
            agg = ad.segment_sum(weighted, gb.tgt)
            update = ad.matmul(ad.relu(ad.matmul(agg, p[pre + "fn1"])), p[pre + "fn2"])
            if zero_message_mlp:
                update = ad.scale(update, 0.0)
            v = ad.add(ad.dropout(update, cfg.dropout, rng), v)
        return v, attention

    # ---- fusion and scoring
    def fuse(self, z: Tensor, g: Tensor) -> Tensor:
        joint = ad.add(ad.matmul(ad.concat([z, g], axis=1), self.params["fuse.w"]), self.params["fuse.b"])
        return ad.relu(joint)

    def score_head(self, joint: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(joint, p["head.w1"]), p["head.b1"]))
        return ad.add(ad.matmul(h, p["head.w2"]), p["head.b2"])

    # ---- batched forward
    def forward(self, instances: list[McqInstance], detached: bool = False, masks=None,
                rng=None, graphs: GraphBatch | None = None, texts: TextBatch | None = None,
                zero_message_mlp: bool = False) -> BatchOutput:
        """Scores (batch x choices) for a list of instances.

        ``masks`` optionally gives, per instance, one collection of node rows
        per choice whose features are zeroed before encoding.
        """
        cfg = self.config
        C = self._check_choices(instances)
        if graphs is None:
            flat_masks = None
            if masks is not None:
                flat_masks = [m for inst_masks in masks for m in inst_masks]
            graphs = GraphBatch.build([g for inst in instances for g in inst.subgraphs], cfg, flat_masks)
        n = len(instances) * C
        if detached:
            z = None
            z_slot = Tensor(np.full((n, cfg.d_model), cfg.detach_fill))
        else:
            if texts is None:
                texts = TextBatch.build(
                    [statement_tokens(inst, c) for inst in instances for c in range(C)], cfg
                )
            z = self.encode_text_batch(texts, rng)
            z_slot = z
        nodes, attention = self.encode_graph_batch(graphs, z, detached, rng, zero_message_mlp)
        g = ad.gather_rows(nodes, graphs.context_rows)
        scores = self.score_head(self.fuse(z_slot, g))
        return BatchOutput(ad.reshape(scores, (len(instances), C)), z, g, attention, graphs)

    def _check_choices(self, instances) -> int:
        if not instances:
            raise InputError("empty instance list")
        C = instances[0].n_choices
        for inst in instances:
            if inst.n_choices != C or len(inst.subgraphs) != C:
                raise InputError("instances disagree on the number of choices/subgraphs")
            if not 0 <= inst.gold_index < C:
                raise InputError(f"gold_index {inst.gold_index} out of range")
        return C

    # ---- single-instance API
    def predict(self, instance: McqInstance, detached: bool = False):
        """Choice distribution and per-choice traces for one instance."""
        with ad.no_grad():
            out = self.forward([instance], detached=detached)
        traces = []
        for c in range(instance.n_choices):
            att = [dense_attention(a, out.graphs, c, self.config.heads) for a in out.attention]
            traces.append(ForwardTrace(
                z=None if out.z is None else out.z.values[c].copy(),
                attention=att,
                g=out.g.values[c].copy(),
                score=float(out.scores.values[0, c]),
            ))
        return out.distributions()[0], traces

    def predict_masked(self, instance: McqInstance, node_masks) -> ChoiceDistribution:
        with ad.no_grad():
            out = self.forward([instance], masks=[node_masks])
        return out.distributions()[0]

    def encode_graph(self, subgraph: RelationalSubgraph, z=None, detached: bool = False,
                     zero_message_mlp: bool = False):
        """Final node embeddings and per-layer, per-head dense attention for one graph."""
        gb = GraphBatch.build([subgraph], self.config)
        if z is not None and not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float64))
        if z is not None and z.values.ndim == 1:
            z = ad.reshape(z, (1, z.shape[0]))
        nodes, attention = self.encode_graph_batch(gb, z, detached, zero_message_mlp=zero_message_mlp)
        dense = [dense_attention(a, gb, 0, self.config.heads) for a in attention]
        return nodes, dense


def with_text_replaced(instance: McqInstance, question_tokens, choices) -> McqInstance:
    return dataclasses.replace(instance, question_tokens=list(question_tokens),
                               choices=[list(c) for c in choices])
