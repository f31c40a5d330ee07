"""Synthetic multiple-choice QA corpora with planted explanation paths.

Each instance asks about a question concept whose *type* selects one relation
chain.  Every answer choice is grounded in its own subgraph containing a chain
from the question concept to that choice's answer concept; only the gold
choice carries the chain matching the question type.  That chain is the
planted ground-truth explanation.

A confounding motif (extra edges leaving the answer concept) is present in
every choice with the same distribution; with probability ``confounder_strength``
the gold choice instead receives a larger motif, so counting edges around the
answer node predicts the label without reading node semantics.

Node features are rows of a seeded per-concept table plus a per-kind offset,
so files store concept ids and the loader rebuilds the feature matrix.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

CONTEXT, QUESTION, ANSWER, OTHER = "context", "question_concept", "answer_concept", "other"
NODE_KINDS = (CONTEXT, QUESTION, ANSWER, OTHER)
CONTEXT_RELATION = 0
SEP_TOKEN = 0
SPLITS = ("train", "dev", "test")

# Motif sizes: every choice draws from the base range; the shortcut range is
# strictly larger so edge counting separates gold from distractors.
BASE_MOTIF = (0, 2)
SHORTCUT_MOTIF = (3, 4)


class ConfigError(ValueError):
    pass


class CorpusParseError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


class SchemaVersionError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 42
    n_train: int = 2000
    n_dev: int = 400
    n_test: int = 400
    n_choices: int = 4
    vocab_size: int = 64
    n_concepts: int = 40
    min_nodes: int = 8
    max_nodes: int = 24
    relation_count: int = 6
    d_node: int = 32
    path_length: int = 2
    confounder_strength: float = 0.0
    distractor_edge_rate: float = 0.2
    feature_noise: float = 0.5
    type_signal: float = 0.4

    def validate(self) -> None:
        for name in ("n_train", "n_dev", "n_test", "n_choices", "vocab_size", "n_concepts",
                     "min_nodes", "max_nodes", "relation_count", "d_node", "path_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.confounder_strength <= 1.0:
            raise ConfigError(f"confounder_strength must lie in [0, 1], got {self.confounder_strength}")
        if min(self.distractor_edge_rate, self.feature_noise, self.type_signal) < 0:
            raise ConfigError("distractor_edge_rate, feature_noise and type_signal must be nonnegative")
        if self.max_nodes < self.min_nodes:
            raise ConfigError("max_nodes must be >= min_nodes")
        need = self.path_length + 2 + SHORTCUT_MOTIF[1]
        if self.min_nodes < need:
            raise ConfigError(
                f"min_nodes={self.min_nodes} cannot host a path of length {self.path_length} "
                f"plus motif edges (need >= {need})"
            )
        if self.relation_count - 1 < self.n_choices:
            raise ConfigError("relation_count must exceed n_choices (one chain per question type)")
        if self.n_concepts < self.n_choices + 2 or self.n_concepts % self.n_choices:
            raise ConfigError("n_concepts must be a multiple of n_choices and at least n_choices + 2")
        if self.vocab_size < self.first_filler_token + 1:
            raise ConfigError("vocab_size too small for concept tokens plus filler tokens")

    @property
    def n_types(self) -> int:
        return self.n_choices

    @property
    def first_concept_token(self) -> int:
        # token 0 separates question from choice; 1..n_types name the question type
        return 1 + self.n_types

    @property
    def first_filler_token(self) -> int:
        return self.first_concept_token + self.n_concepts


@dataclass
class RelationalSubgraph:
    num_nodes: int
    node_kinds: list[str]
    node_concepts: list[int]
    edges: list[tuple[int, int, int]]
    relation_count: int
    features: np.ndarray = field(repr=False)

    @property
    def context_node(self) -> int:
        return self.node_kinds.index(CONTEXT)

    def maskable_nodes(self) -> list[int]:
        return [i for i, k in enumerate(self.node_kinds) if k != CONTEXT]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RelationalSubgraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.node_kinds == other.node_kinds
            and self.node_concepts == other.node_concepts
            and [tuple(e) for e in self.edges] == [tuple(e) for e in other.edges]
            and self.relation_count == other.relation_count
            and np.array_equal(self.features, other.features)
        )


@dataclass
class McqInstance:
    question_tokens: list[int]
    choices: list[list[int]]
    subgraphs: list[RelationalSubgraph]
    gold_index: int
    planted_path: list[list[int]]

    @property
    def n_choices(self) -> int:
        return len(self.choices)


@dataclass
class Corpus:
    config: GenConfig
    train: list[McqInstance]
    dev: list[McqInstance]
    test: list[McqInstance]

    def split(self, name: str) -> list[McqInstance]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def __iter__(self):
        return iter((self.train, self.dev, self.test))


# ------------------------------------------------------------------ helpers


def concept_type(concept: int, config: GenConfig) -> int:
    return concept % config.n_types


def chain_for_type(question_type: int, config: GenConfig) -> tuple[int, ...]:
    """Relation sequence that answers a question of the given type."""
    n_rel = config.relation_count - 1
    return tuple(1 + (question_type + k) % n_rel for k in range(config.path_length))


def concept_token(concept: int, config: GenConfig) -> int:
    return config.first_concept_token + concept


def type_token(question_type: int) -> int:
    return 1 + question_type


def feature_tables(config: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-concept and per-kind feature rows; a pure function of the config."""
    rng = np.random.default_rng([config.seed, 7919])
    protos = config.type_signal * rng.normal(size=(config.n_types, config.d_node))
    noise = rng.normal(scale=config.feature_noise, size=(config.n_concepts, config.d_node))
    concepts = protos[np.arange(config.n_concepts) % config.n_types] + noise
    kinds = 0.5 * rng.normal(size=(len(NODE_KINDS), config.d_node))
    kinds[NODE_KINDS.index(CONTEXT)] = 0.0
    return concepts, kinds


def node_features(kinds: list[str], concepts: list[int], tables) -> np.ndarray:
    concept_table, kind_table = tables
    feats = np.zeros((len(kinds), concept_table.shape[1]))
    for i, (k, c) in enumerate(zip(kinds, concepts)):
        if k == CONTEXT:
            continue
        feats[i] = concept_table[c] + kind_table[NODE_KINDS.index(k)]
    return feats


# --------------------------------------------------------------- generation


def _choice_graph(rng, config: GenConfig, q_star: int, q_alt: int, answer: int,
                  chain: tuple[int, ...], motif_edges: int, is_gold: bool, tables):
    n = int(rng.integers(config.min_nodes, config.max_nodes + 1))
    L = config.path_length
    n_rel = config.relation_count
    # Logical roles before shuffling: 0 ctx, 1 q*, 2 q', 3..L+1 mids, L+2 answer, rest other.
    perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
    ctx, qs, qa = 0, int(perm[1]), int(perm[2])
    mids = [int(perm[3 + i]) for i in range(L - 1)]
    ans = int(perm[L + 2])
    others = [int(perm[i]) for i in range(L + 3, n)]

    kinds = [OTHER] * n
    kinds[ctx] = CONTEXT
    kinds[qs] = kinds[qa] = QUESTION
    kinds[ans] = ANSWER
    concepts = [int(c) for c in rng.integers(0, config.n_concepts, size=n)]
    concepts[ctx] = -1
    concepts[qs], concepts[qa], concepts[ans] = q_star, q_alt, answer

    edges: list[tuple[int, int, int]] = [
        (ctx, qs, CONTEXT_RELATION), (ctx, qa, CONTEXT_RELATION), (ctx, ans, CONTEXT_RELATION)
    ]
    path = [qs] + mids + [ans]
    edges += [(path[i], path[i + 1], chain[i]) for i in range(L)]
    pairs = {(s, t) for s, t, _ in edges}

    # Distractor tree: others hang off non-answer nodes, edges point outward.
    attach = [qs, qa] + mids
    for o in others:
        parent = attach[int(rng.integers(len(attach)))]
        rel = int(rng.integers(1, n_rel))
        edges.append((parent, o, rel))
        pairs.add((parent, o))
        attach.append(o)

    # Extra distractor edges never enter the answer, a mid, or the context node.
    sources = [qs, qa] + mids + others
    targets = [qa] + others
    n_extra = int(rng.binomial(len(others) + 1, config.distractor_edge_rate))
    for _ in range(n_extra):
        s = sources[int(rng.integers(len(sources)))]
        t = targets[int(rng.integers(len(targets)))]
        if s == t or (s, t) in pairs or (t, s) in pairs:
            continue
        edges.append((s, t, int(rng.integers(1, n_rel))))
        pairs.add((s, t))

    # Confounding motif: edges leaving the answer concept.
    candidates = [qa] + others
    chosen = rng.choice(len(candidates), size=motif_edges, replace=False)
    for i in sorted(int(c) for c in chosen):
        edges.append((ans, candidates[i], int(rng.integers(1, n_rel))))

    graph = RelationalSubgraph(
        num_nodes=n,
        node_kinds=kinds,
        node_concepts=concepts,
        edges=edges,
        relation_count=n_rel,
        features=node_features(kinds, concepts, tables),
    )
    return graph, (path if is_gold else [])


def _generate_instance(config: GenConfig, split_code: int, index: int, tables) -> McqInstance:
    rng = np.random.default_rng([config.seed, split_code, index])
    C = config.n_choices
    qtype = int(rng.integers(config.n_types))
    per_type = config.n_concepts // config.n_types
    q_star = qtype + config.n_types * int(rng.integers(per_type))
    q_alt = int(rng.integers(config.n_concepts))
    while q_alt == q_star:
        q_alt = int(rng.integers(config.n_concepts))
    pool = [c for c in range(config.n_concepts) if c not in (q_star, q_alt)]
    answers = [pool[int(i)] for i in rng.choice(len(pool), size=C, replace=False)]
    gold = int(rng.integers(C))
    # Each choice carries a different type's chain; the gold one matches the question.
    wrong_types = [t for t in range(config.n_types) if t != qtype]
    order = rng.permutation(len(wrong_types))
    choice_types = []
    it = iter(order)
    for i in range(C):
        choice_types.append(qtype if i == gold else wrong_types[int(next(it))])

    shortcut = rng.random() < config.confounder_strength
    subgraphs, paths = [], []
    for i in range(C):
        lo, hi = SHORTCUT_MOTIF if (shortcut and i == gold) else BASE_MOTIF
        motif = int(rng.integers(lo, hi + 1))
        g, p = _choice_graph(rng, config, q_star, q_alt, answers[i],
                             chain_for_type(choice_types[i], config), motif, i == gold, tables)
        subgraphs.append(g)
        paths.append(p)

    n_fill = int(rng.integers(1, 4))
    fillers = [int(t) for t in rng.integers(config.first_filler_token, config.vocab_size, size=n_fill)]
    question = [type_token(qtype), concept_token(q_star, config), concept_token(q_alt, config)] + fillers
    choices = [[concept_token(a, config)] for a in answers]
    return McqInstance(question, choices, subgraphs, gold, paths)


def generate_corpus(config: GenConfig) -> Corpus:
    config.validate()
    tables = feature_tables(config)
    sizes = (config.n_train, config.n_dev, config.n_test)
    splits = [
        [_generate_instance(config, code, i, tables) for i in range(size)]
        for code, size in enumerate(sizes)
    ]
    return Corpus(config, *splits)


# ------------------------------------------------------------ serialization


def _instance_to_json(inst: McqInstance) -> dict:
    return {
        "question_tokens": inst.question_tokens,
        "choices": inst.choices,
        "gold_index": inst.gold_index,
        "planted_path": inst.planted_path,
        "subgraphs": [
            {
                "num_nodes": g.num_nodes,
                "node_kinds": g.node_kinds,
                "node_concepts": g.node_concepts,
                "edges": [list(e) for e in g.edges],
                "relation_count": g.relation_count,
            }
            for g in inst.subgraphs
        ],
    }


def _instance_from_json(obj: dict, tables) -> McqInstance:
    subgraphs = []
    for g in obj["subgraphs"]:
        kinds = list(g["node_kinds"])
        concepts = [int(c) for c in g["node_concepts"]]
        if len(kinds) != g["num_nodes"] or len(concepts) != g["num_nodes"]:
            raise ValueError("node_kinds/node_concepts length disagrees with num_nodes")
        if any(k not in NODE_KINDS for k in kinds):
            raise ValueError("unknown node kind")
        for s, t, r in g["edges"]:
            if not (0 <= s < g["num_nodes"] and 0 <= t < g["num_nodes"] and 0 <= r < g["relation_count"]):
                raise ValueError(f"edge {(s, t, r)} out of range")
        subgraphs.append(
            RelationalSubgraph(
                num_nodes=int(g["num_nodes"]),
                node_kinds=kinds,
                node_concepts=concepts,
                edges=[(int(s), int(t), int(r)) for s, t, r in g["edges"]],
                relation_count=int(g["relation_count"]),
                features=node_features(kinds, concepts, tables),
            )
        )
    return McqInstance(
        question_tokens=[int(t) for t in obj["question_tokens"]],
        choices=[[int(t) for t in c] for c in obj["choices"]],
        subgraphs=subgraphs,
        gold_index=int(obj["gold_index"]),
        planted_path=[[int(v) for v in p] for p in obj["planted_path"]],
    )


def save_corpus(path, instances: list[McqInstance], config: GenConfig, split: str = "") -> None:
    """Write one split as JSON Lines: a header, then one instance per line."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "split": split,
        "n_instances": len(instances),
        "config": dataclasses.asdict(config),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_instance_to_json(inst), sort_keys=True) for inst in instances]
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path) -> tuple[list[McqInstance], GenConfig]:
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusParseError(path, 1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusParseError(path, 1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or "schema_version" not in header:
        raise CorpusParseError(path, 1, "header lacks schema_version")
    if header["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema_version {header['schema_version']} (expected {SCHEMA_VERSION})"
        )
    try:
        config = GenConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise CorpusParseError(path, 1, f"bad config: {exc}") from None
    tables = feature_tables(config)
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            instances.append(_instance_from_json(json.loads(line), tables))
        except json.JSONDecodeError as exc:
            raise CorpusParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusParseError(path, lineno, f"malformed instance: {exc}") from None
    if len(instances) != header.get("n_instances"):
        raise CorpusParseError(
            path, len(lines) + 1,
            f"expected {header.get('n_instances')} instances, found {len(instances)} (truncated?)",
        )
    return instances, config
