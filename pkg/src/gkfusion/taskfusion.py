"""Task-specific graphs, fusion with the general-knowledge store, and
joint entity/relation extraction heads.

Mentions whose normalized surface matches a store entity are represented
by that (frozen) store node; everything else becomes a task node with a
trainable feature vector. Edges are same-sentence co-occurrence, kept
only when at least one endpoint is a task node, so the store side never
gains internal edges. A two-layer graph convolution over the union feeds
an entity-type head and a pair-feature relation head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer, check_magic
from .errors import (
    DimensionError,
    FormatError,
    InvalidArgument,
    TrainingDivergedError,
)
from .gkstore import GKStore, normalize_surface
from .numerics import FFNN, Adam, derive_seed, softmax_cross_entropy
from .relweights import _read_jsonl

NO_RELATION = "NO_RELATION"


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    type: str


@dataclass
class TaskDocument:
    doc_id: str
    text: str
    mentions: list[Mention]
    relations: list[tuple[int, int, str]]

    def mention_surface(self, idx: int) -> str:
        m = self.mentions[idx]
        return self.text[m.start : m.end]

    def validate(self) -> None:
        n = len(self.text)
        for m in self.mentions:
            if not (0 <= m.start < m.end <= n):
                raise FormatError(f"doc {self.doc_id!r}: span ({m.start}, {m.end}) outside text of length {n}")
        seen = set()
        for head, tail, rtype in self.relations:
            for idx in (head, tail):
                if not (0 <= idx < len(self.mentions)):
                    raise FormatError(f"doc {self.doc_id!r}: relation mention index {idx} out of range")
            key = (head, tail, rtype)
            if key in seen:
                raise FormatError(f"doc {self.doc_id!r}: duplicate relation {key}")
            seen.add(key)


def load_task_docs(path: str | Path) -> list[TaskDocument]:
    docs: list[TaskDocument] = []
    seen_ids = set()
    for lineno, obj in _read_jsonl(path):
        for key in ("id", "text", "mentions", "relations"):
            if key not in obj:
                raise FormatError(f"{path}:{lineno}: document rows need {key!r}")
        mentions = []
        for m in obj["mentions"]:
            if not isinstance(m, dict) or any(k not in m for k in ("start", "end", "type")):
                raise FormatError(f"{path}:{lineno}: mentions need start/end/type")
            mentions.append(Mention(start=int(m["start"]), end=int(m["end"]), type=str(m["type"])))
        relations = []
        for r in obj["relations"]:
            if not isinstance(r, dict) or any(k not in r for k in ("head", "tail", "type")):
                raise FormatError(f"{path}:{lineno}: relations need head/tail/type")
            relations.append((int(r["head"]), int(r["tail"]), str(r["type"])))
        doc = TaskDocument(doc_id=str(obj["id"]), text=str(obj["text"]), mentions=mentions, relations=relations)
        if doc.doc_id in seen_ids:
            raise FormatError(f"{path}:{lineno}: duplicate document id {doc.doc_id!r}")
        seen_ids.add(doc.doc_id)
        try:
            doc.validate()
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        docs.append(doc)
    return docs


def save_task_docs(docs: list[TaskDocument], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(
                json.dumps(
                    {
                        "id": doc.doc_id,
                        "text": doc.text,
                        "mentions": [{"start": m.start, "end": m.end, "type": m.type} for m in doc.mentions],
                        "relations": [{"head": h, "tail": t, "type": rt} for h, t, rt in doc.relations],
                    }
                )
                + "\n"
            )


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences; terminators are runs of .!? and the
    unterminated tail counts as a sentence."""
    spans: list[tuple[int, int]] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in ".!?":
            while i + 1 < n and text[i + 1] in ".!?":
                i += 1
            spans.append((start, i + 1))
            i += 1
            while i < n and text[i].isspace():
                i += 1
            start = i
        else:
            i += 1
    if start < n and text[start:].strip():
        spans.append((start, n))
    return spans


def mention_sentence_ids(doc: TaskDocument) -> list[int]:
    spans = sentence_spans(doc.text)
    out = []
    for m in doc.mentions:
        sent = -1
        for si, (a, b) in enumerate(spans):
            if a <= m.start < b:
                sent = si
                break
        out.append(sent)
    return out


def candidate_pairs(doc: TaskDocument) -> list[tuple[int, int]]:
    """Ordered same-sentence mention index pairs, the relation-candidate
    universe for both training negatives and evaluation."""
    sent_of = mention_sentence_ids(doc)
    by_sentence: dict[int, list[int]] = {}
    for idx, sid in enumerate(sent_of):
        by_sentence.setdefault(sid, []).append(idx)
    pairs = []
    for sid in sorted(by_sentence):
        members = by_sentence[sid]
        for i in members:
            for j in members:
                if i != j:
                    pairs.append((i, j))
    return pairs


# ---------------------------------------------------------------------------
# Graph construction


@dataclass
class TaskGraph:
    sk_surfaces: list[str]
    sk_features: np.ndarray
    sk_edges: list[tuple[int, int]]
    gk_ids: list[str]
    gk_surfaces: list[str]
    links: list[tuple[int, int, float]]
    counters: dict = field(default_factory=dict)


def build_sk_graph(
    docs: list[TaskDocument],
    gk: GKStore | None,
    provider,
    link_k: int = 0,
    link_tau: float = 0.7,
) -> TaskGraph:
    """One task node per distinct normalized surface that does not match a
    store entity; same-sentence co-occurrence edges; matched mentions
    become links to store nodes instead (store-internal pairs dropped).

    Every store entity becomes a graph node, matched by documents or not:
    unmatched store nodes ride along isolated (self-loop only) so that
    mentions first seen at prediction time still resolve against the
    store's vocabulary."""
    surface_to_gk = gk.surface_index() if gk is not None else {}
    sk_index: dict[str, int] = {}
    gk_index: dict[str, int] = {}
    gk_ids: list[str] = []
    gk_surfaces: list[str] = []
    if gk is not None:
        for node in gk.nodes.values():
            norm = normalize_surface(node.entity.surface)
            if surface_to_gk.get(norm) == node.entity.id and norm not in gk_index:
                gk_index[norm] = len(gk_ids)
                gk_ids.append(node.entity.id)
                gk_surfaces.append(norm)
    edges: set[tuple[int, int]] = set()
    links: dict[tuple[int, int], float] = {}
    dropped_gk_pairs = 0
    mention_count = 0
    matched_gk: set[int] = set()

    def resolve(surface: str) -> tuple[str, int]:
        norm = normalize_surface(surface)
        pos = gk_index.get(norm)
        if pos is not None:
            matched_gk.add(pos)
            return "gk", pos
        if norm not in sk_index:
            sk_index[norm] = len(sk_index)
        return "sk", sk_index[norm]

    for doc in docs:
        sent_of = mention_sentence_ids(doc)
        by_sentence: dict[int, list[int]] = {}
        for idx, sid in enumerate(sent_of):
            by_sentence.setdefault(sid, []).append(idx)
        mention_count += len(doc.mentions)
        resolved = [resolve(doc.mention_surface(i)) for i in range(len(doc.mentions))]
        for members in by_sentence.values():
            for a_pos in range(len(members)):
                for b_pos in range(a_pos + 1, len(members)):
                    kind_a, idx_a = resolved[members[a_pos]]
                    kind_b, idx_b = resolved[members[b_pos]]
                    if kind_a == "sk" and kind_b == "sk":
                        if idx_a != idx_b:
                            edges.add((min(idx_a, idx_b), max(idx_a, idx_b)))
                    elif kind_a == "gk" and kind_b == "gk":
                        dropped_gk_pairs += 1
                    else:
                        sk_idx, gk_pos = (idx_a, idx_b) if kind_a == "sk" else (idx_b, idx_a)
                        links[(sk_idx, gk_pos)] = 1.0

    sk_surfaces = list(sk_index.keys())
    features = [np.asarray(provider.embed(surf), dtype=np.float64) for surf in sk_surfaces]
    sk_features = np.stack(features) if features else np.zeros((0, getattr(provider, "dim", 0)))

    if link_k > 0 and gk is not None and sk_surfaces:
        mat = np.stack([gk.nodes[i].initial_vec for i in gk_ids])
        if mat.shape[1] != sk_features.shape[1]:
            raise DimensionError("cosine linking needs provider dim == store initial dim")
        gk_norms = np.linalg.norm(mat, axis=1)
        for sk_idx, feat in enumerate(sk_features):
            fn = np.linalg.norm(feat)
            if fn == 0:
                continue
            sims = mat @ feat / np.where(gk_norms * fn == 0, 1.0, gk_norms * fn)
            top = np.argsort(-sims, kind="stable")[:link_k]
            for gi in top:
                if sims[gi] < link_tau:
                    continue
                key = (sk_idx, int(gi))
                links[key] = max(links.get(key, 0.0), float(sims[gi]))

    return TaskGraph(
        sk_surfaces=sk_surfaces,
        sk_features=sk_features,
        sk_edges=sorted(edges),
        gk_ids=gk_ids,
        gk_surfaces=gk_surfaces,
        links=sorted((a, b, s) for (a, b), s in links.items()),
        counters={
            "mentions": mention_count,
            "sk_nodes": len(sk_surfaces),
            "gk_nodes": len(gk_ids),
            "gk_matched_surfaces": len(matched_gk),
            "sk_edges": len(edges),
            "links": len(links),
            "dropped_gk_internal_pairs": dropped_gk_pairs,
        },
    )


def normalized_adjacency(n: int, edges: list[tuple[int, int]]) -> np.ndarray:
    """Symmetric D^{-1/2} (A + I) D^{-1/2} over undirected edges."""
    a_hat = np.eye(n)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidArgument(f"edge ({i}, {j}) outside node range {n}")
        a_hat[i, j] = 1.0
        a_hat[j, i] = 1.0
    deg = a_hat.sum(axis=1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return a_hat * np.outer(d_inv_sqrt, d_inv_sqrt)


@dataclass
class FusionGraph:
    n_sk: int
    n_gk: int
    edges: list[tuple[int, int]]
    s_matrix: np.ndarray
    sk_features: np.ndarray
    gk_features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_sk + self.n_gk

    def gk_internal_edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, j in self.edges if i >= self.n_sk and j >= self.n_sk]


def build_fusion_graph(task_graph: TaskGraph, gk: GKStore | None) -> FusionGraph:
    n_sk = len(task_graph.sk_surfaces)
    n_gk = len(task_graph.gk_ids)
    edges = list(task_graph.sk_edges)
    edges.extend((sk, n_sk + gk_pos) for sk, gk_pos, _score in task_graph.links)
    edges = sorted(set(edges))
    if n_gk:
        if gk is None:
            raise InvalidArgument("task graph references store nodes but no store was given")
        gk_features = np.stack([gk.nodes[i].final_vec for i in task_graph.gk_ids])
    else:
        gk_features = np.zeros((0, gk.final_dim if gk is not None else 0))
    return FusionGraph(
        n_sk=n_sk,
        n_gk=n_gk,
        edges=edges,
        s_matrix=normalized_adjacency(n_sk + n_gk, edges),
        sk_features=task_graph.sk_features,
        gk_features=gk_features,
    )


def gcn_forward(
    s_matrix: np.ndarray,
    features: np.ndarray,
    weights: list[np.ndarray],
    activations: list[str] | None = None,
) -> np.ndarray:
    """H_{l+1} = act(S (H_l W_l)); default two layers relu then identity."""
    if activations is None:
        activations = ["relu"] * (len(weights) - 1) + ["identity"]
    if len(activations) != len(weights):
        raise InvalidArgument("one activation per layer")
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != s_matrix.shape[0]:
        raise DimensionError("feature matrix must be (n_nodes, dim)")
    for w, act in zip(weights, activations):
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer input dim {h.shape[1]} != weight rows {w.shape[0]}")
        z = s_matrix @ (h @ w)
        if act == "relu":
            h = np.maximum(z, 0.0)
        elif act == "tanh":
            h = np.tanh(z)
        elif act == "identity":
            h = z
        else:
            raise InvalidArgument(f"unknown activation {act!r}")
    return h


# ---------------------------------------------------------------------------
# Model


@dataclass
class TaskTrainConfig:
    gcn_hidden: int = 128
    gcn_out: int = 64
    head_hidden: int = 128
    epochs: int = 50
    lr: float = 0.02
    neg_ratio: int = 3
    link_k: int = 0
    link_tau: float = 0.7
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "gcn_hidden": self.gcn_hidden,
            "gcn_out": self.gcn_out,
            "head_hidden": self.head_hidden,
            "epochs": self.epochs,
            "lr": self.lr,
            "neg_ratio": self.neg_ratio,
            "link_k": self.link_k,
            "link_tau": self.link_tau,
            "seed": self.seed,
        }


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class TaskModel:
    """Fusion GCN plus entity-type and relation heads over a fixed graph.

    Heads consume the concatenation of a node's input features and its
    convolved representation. The skip keeps nodes distinguishable when
    neighborhood mixing is symmetric (an isolated co-occurrence pair gets
    identical convolved rows for both members)."""

    def __init__(
        self,
        config: TaskTrainConfig,
        ent_labels: list[str],
        rel_labels: list[str],
        graph: FusionGraph,
        sk_surfaces: list[str],
        gk_ids: list[str],
        gk_surfaces: list[str],
    ):
        if NO_RELATION not in rel_labels:
            raise InvalidArgument(f"relation labels must include {NO_RELATION}")
        self.config = config
        self.ent_labels = ent_labels
        self.rel_labels = rel_labels
        self.graph = graph
        self.sk_surfaces = sk_surfaces
        self.gk_ids = gk_ids
        self.gk_surfaces = gk_surfaces
        self._sk_pos = {s: i for i, s in enumerate(sk_surfaces)}
        self._gk_pos = {s: i for i, s in enumerate(gk_surfaces)}
        if graph.n_sk:
            # task features set the convolution width; store vectors are
            # projected down to match
            d_in = graph.sk_features.shape[1]
        else:
            # store-only graph: keep the store width, no bottleneck
            d_in = graph.gk_features.shape[1]
        self.d_in = int(d_in)
        self.rep_dim = self.d_in + config.gcn_out
        rng = np.random.default_rng(derive_seed(config.seed, "task-model"))
        self.x_sk = graph.sk_features.copy()
        self.w_proj = _glorot(rng, graph.gk_features.shape[1], self.d_in) if graph.n_gk else None
        self.gcn_w = [
            _glorot(rng, self.d_in, config.gcn_hidden),
            _glorot(rng, config.gcn_hidden, config.gcn_out),
        ]
        self.ent_head = FFNN(
            [self.rep_dim, config.head_hidden, len(ent_labels)],
            ["relu", "identity"],
            seed=derive_seed(config.seed, "entity-head"),
        )
        self.rel_head = FFNN(
            [3 * self.rep_dim, config.head_hidden, len(rel_labels)],
            ["relu", "identity"],
            seed=derive_seed(config.seed, "relation-head"),
        )

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        params = [self.x_sk]
        if self.w_proj is not None:
            params.append(self.w_proj)
        params.extend(self.gcn_w)
        params.extend(self.ent_head.parameters())
        params.extend(self.rel_head.parameters())
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        pos = 0
        self.x_sk = params[pos]
        pos += 1
        if self.w_proj is not None:
            self.w_proj = params[pos]
            pos += 1
        self.gcn_w = [params[pos], params[pos + 1]]
        pos += 2
        n_ent = len(self.ent_head.parameters())
        self.ent_head.set_parameters(params[pos : pos + n_ent])
        pos += n_ent
        self.rel_head.set_parameters(params[pos:])

    # -- forward --------------------------------------------------------

    def node_input(self) -> np.ndarray:
        if self.graph.n_gk:
            projected = self.graph.gk_features @ self.w_proj
            if self.graph.n_sk:
                return np.vstack([self.x_sk, projected])
            return projected
        return self.x_sk

    def node_reps(self) -> np.ndarray:
        x = self.node_input()
        return np.hstack([x, gcn_forward(self.graph.s_matrix, x, self.gcn_w)])

    def resolve_surface(self, surface: str) -> int | None:
        """Global node index for a normalized mention surface, if known."""
        norm = normalize_surface(surface)
        sk = self._sk_pos.get(norm)
        if sk is not None:
            return sk
        gk = self._gk_pos.get(norm)
        if gk is not None:
            return self.graph.n_sk + gk
        return None

    def pair_features(self, reps: np.ndarray, idx_i: np.ndarray, idx_j: np.ndarray) -> np.ndarray:
        hi = reps[idx_i]
        hj = reps[idx_j]
        return np.hstack([hi, hj, hi * hj])


@dataclass
class TaskTrainResult:
    model: TaskModel
    losses: list[float]
    dev_history: list[dict]
    best_epoch: int
    counters: dict


def _collect_instances(docs: list[TaskDocument], model: TaskModel):
    """Entity instances (node, label) and relation candidates per doc."""
    ent_rows: list[tuple[int, int]] = []
    ent_type_index = {t: i for i, t in enumerate(model.ent_labels)}
    rel_index = {t: i for i, t in enumerate(model.rel_labels)}
    gold_rows: list[tuple[int, int, int]] = []
    negative_rows: list[tuple[int, int]] = []
    skipped_cross_sentence = 0
    unknown = 0
    for doc in docs:
        nodes: list[int | None] = [model.resolve_surface(doc.mention_surface(i)) for i in range(len(doc.mentions))]
        for m_idx, m in enumerate(doc.mentions):
            node = nodes[m_idx]
            if node is None or m.type not in ent_type_index:
                unknown += 1
                continue
            ent_rows.append((node, ent_type_index[m.type]))
        cands = candidate_pairs(doc)
        cand_set = set(cands)
        gold_pairs = set()
        for head, tail, rtype in doc.relations:
            gold_pairs.add((head, tail))
            if (head, tail) not in cand_set:
                skipped_cross_sentence += 1
                continue
            ni, nj = nodes[head], nodes[tail]
            if ni is None or nj is None or rtype not in rel_index:
                unknown += 1
                continue
            gold_rows.append((ni, nj, rel_index[rtype]))
        for i, j in cands:
            if (i, j) in gold_pairs:
                continue
            ni, nj = nodes[i], nodes[j]
            if ni is None or nj is None:
                continue
            negative_rows.append((ni, nj))
    return ent_rows, gold_rows, negative_rows, {"skipped_cross_sentence": skipped_cross_sentence, "unknown": unknown}


def train_task(
    train_docs: list[TaskDocument],
    gk: GKStore | None,
    provider,
    config: TaskTrainConfig,
    dev_docs: list[TaskDocument] | None = None,
) -> TaskTrainResult:
    """Adam on entity + relation cross-entropy over a fixed fusion graph.

    Store node features stay frozen; if dev documents are given, the
    parameters with the best dev relation F1 are kept."""
    if gk is not None and not gk.frozen:
        raise InvalidArgument("task training requires a frozen GK store")
    task_graph = build_sk_graph(train_docs, gk, provider, link_k=config.link_k, link_tau=config.link_tau)
    graph = build_fusion_graph(task_graph, gk)
    ent_labels = sorted({m.type for doc in train_docs for m in doc.mentions})
    gold_rel_types = sorted({rt for doc in train_docs for _h, _t, rt in doc.relations})
    if NO_RELATION in gold_rel_types:
        raise InvalidArgument(f"{NO_RELATION!r} is reserved and cannot be a gold relation type")
    rel_labels = gold_rel_types + [NO_RELATION]
    if not ent_labels:
        raise InvalidArgument("training documents contain no mentions")
    model = TaskModel(
        config=config,
        ent_labels=ent_labels,
        rel_labels=rel_labels,
        graph=graph,
        sk_surfaces=task_graph.sk_surfaces,
        gk_ids=task_graph.gk_ids,
        gk_surfaces=task_graph.gk_surfaces,
    )
    ent_rows, gold_rows, negative_rows, inst_counters = _collect_instances(train_docs, model)
    rng = np.random.default_rng(derive_seed(config.seed, "negative-sampling"))
    n_neg = min(len(negative_rows), config.neg_ratio * max(1, len(gold_rows)))
    if negative_rows and n_neg:
        chosen = rng.choice(len(negative_rows), size=n_neg, replace=False)
        sampled_negatives = [negative_rows[i] for i in sorted(chosen)]
    else:
        sampled_negatives = []
    no_rel_label = model.rel_labels.index(NO_RELATION)

    ent_idx = np.array([r[0] for r in ent_rows], dtype=np.intp)
    ent_lab = np.array([r[1] for r in ent_rows], dtype=np.intp)
    rel_i = np.array([r[0] for r in gold_rows] + [i for i, _j in sampled_negatives], dtype=np.intp)
    rel_j = np.array([r[1] for r in gold_rows] + [j for _i, j in sampled_negatives], dtype=np.intp)
    rel_lab = np.array([r[2] for r in gold_rows] + [no_rel_label] * len(sampled_negatives), dtype=np.intp)

    optimizer = Adam(lr=config.lr)
    losses: list[float] = []
    dev_history: list[dict] = []
    best_epoch = -1
    best_f1 = -1.0
    best_params: list[np.ndarray] | None = None
    s = graph.s_matrix
    gk_feature_snapshot = graph.gk_features.copy()

    rep_dim = model.rep_dim
    for epoch in range(config.epochs):
        x = model.node_input()
        m0 = x @ model.gcn_w[0]
        z0 = s @ m0
        h1 = np.maximum(z0, 0.0)
        m1 = h1 @ model.gcn_w[1]
        h2 = s @ m1
        reps = np.hstack([x, h2])

        loss = 0.0
        d_reps = np.zeros_like(reps)
        ent_grads = [np.zeros_like(p) for p in model.ent_head.parameters()]
        rel_grads = [np.zeros_like(p) for p in model.rel_head.parameters()]
        if len(ent_idx):
            logits, cache = model.ent_head.forward_cached(reps[ent_idx])
            ce, d_logits = softmax_cross_entropy(logits, ent_lab)
            loss += ce
            ent_grads, d_ent_in = model.ent_head.backward(cache, d_logits)
            np.add.at(d_reps, ent_idx, d_ent_in)
        if len(rel_i):
            feats = model.pair_features(reps, rel_i, rel_j)
            logits, cache = model.rel_head.forward_cached(feats)
            ce, d_logits = softmax_cross_entropy(logits, rel_lab)
            loss += ce
            rel_grads, d_feats = model.rel_head.backward(cache, d_logits)
            d_hi = d_feats[:, :rep_dim]
            d_hj = d_feats[:, rep_dim : 2 * rep_dim]
            d_prod = d_feats[:, 2 * rep_dim :]
            np.add.at(d_reps, rel_i, d_hi + d_prod * reps[rel_j])
            np.add.at(d_reps, rel_j, d_hj + d_prod * reps[rel_i])
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch)
        losses.append(loss)

        d_x_skip = d_reps[:, : model.d_in]
        d_h2 = d_reps[:, model.d_in :]
        d_m1 = s @ d_h2
        d_w1 = h1.T @ d_m1
        d_h1 = d_m1 @ model.gcn_w[1].T
        d_z0 = d_h1 * (z0 > 0.0)
        d_m0 = s @ d_z0
        d_w0 = x.T @ d_m0
        d_x = d_m0 @ model.gcn_w[0].T + d_x_skip
        grads = []
        if graph.n_sk:
            grads.append(d_x[: graph.n_sk])
        else:
            grads.append(np.zeros_like(model.x_sk))
        if model.w_proj is not None:
            grads.append(graph.gk_features.T @ d_x[graph.n_sk :])
        grads.extend([d_w0, d_w1])
        grads.extend(ent_grads)
        grads.extend(rel_grads)
        model.set_parameters(optimizer.step(model.parameters(), grads))

        if dev_docs is not None:
            report = evaluate(model, dev_docs)
            dev_history.append(
                {"epoch": epoch, "relation_f1": report["relation"]["f1"], "entity_f1": report["entity"]["f1"]}
            )
            if report["relation"]["f1"] > best_f1:
                best_f1 = report["relation"]["f1"]
                best_epoch = epoch
                best_params = [p.copy() for p in model.parameters()]

    if best_params is not None:
        model.set_parameters(best_params)
    if not np.array_equal(gk_feature_snapshot, graph.gk_features):
        raise InvalidArgument("frozen store features were mutated during training")
    counters = dict(task_graph.counters)
    counters.update(inst_counters)
    counters.update(
        {
            "entity_instances": len(ent_rows),
            "gold_relation_instances": len(gold_rows),
            "negative_instances": len(sampled_negatives),
        }
    )
    return TaskTrainResult(
        model=model,
        losses=losses,
        dev_history=dev_history,
        best_epoch=best_epoch if best_params is not None else config.epochs - 1,
        counters=counters,
    )


# ---------------------------------------------------------------------------
# Evaluation


def _prf(tp: int, fp: int, fn: int) -> dict:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"p": p, "r": r, "f1": f1}


def evaluate(model: TaskModel, docs: list[TaskDocument]) -> dict:
    """Micro P/R/F1 for mention typing and for relation extraction over
    same-sentence candidate pairs, with per-label breakdowns."""
    reps = model.node_reps()
    ent_tp = ent_wrong = 0
    per_type: dict[str, dict] = {t: {"tp": 0, "fp": 0, "fn": 0} for t in model.ent_labels}
    rel_counts: dict[str, dict] = {t: {"tp": 0, "fp": 0, "fn": 0} for t in model.rel_labels if t != NO_RELATION}
    rel_tp = rel_fp = rel_fn = 0
    unknown_mentions = 0
    unresolved_pairs = 0
    n_candidates = 0
    n_gold = 0
    no_rel_idx = model.rel_labels.index(NO_RELATION)

    for doc in docs:
        nodes = [model.resolve_surface(doc.mention_surface(i)) for i in range(len(doc.mentions))]
        known = [n for n in nodes if n is not None]
        if known:
            logits = model.ent_head.forward(reps[np.array(known, dtype=np.intp)])
            pred_iter = iter(np.argmax(logits, axis=1))
        for m_idx, m in enumerate(doc.mentions):
            if nodes[m_idx] is None:
                unknown_mentions += 1
                predicted = model.ent_labels[0]
            else:
                predicted = model.ent_labels[int(next(pred_iter))]
            gold_type = m.type
            if predicted == gold_type:
                ent_tp += 1
                if gold_type in per_type:
                    per_type[gold_type]["tp"] += 1
            else:
                ent_wrong += 1
                if predicted in per_type:
                    per_type[predicted]["fp"] += 1
                if gold_type in per_type:
                    per_type[gold_type]["fn"] += 1

        cands = candidate_pairs(doc)
        n_candidates += len(cands)
        gold_map: dict[tuple[int, int], set[str]] = {}
        for head, tail, rtype in doc.relations:
            gold_map.setdefault((head, tail), set()).add(rtype)
        n_gold += sum(len(v) for v in gold_map.values())
        resolved_cands = [(i, j) for i, j in cands if nodes[i] is not None and nodes[j] is not None]
        unresolved_pairs += len(cands) - len(resolved_cands)
        predicted_map: dict[tuple[int, int], str] = {}
        if resolved_cands:
            idx_i = np.array([nodes[i] for i, _j in resolved_cands], dtype=np.intp)
            idx_j = np.array([nodes[j] for _i, j in resolved_cands], dtype=np.intp)
            logits = model.rel_head.forward(model.pair_features(reps, idx_i, idx_j))
            choices = np.argmax(logits, axis=1)
            for (i, j), choice in zip(resolved_cands, choices):
                if int(choice) != no_rel_idx:
                    predicted_map[(i, j)] = model.rel_labels[int(choice)]
        for (i, j), label in predicted_map.items():
            if label in gold_map.get((i, j), set()):
                rel_tp += 1
                rel_counts[label]["tp"] += 1
            else:
                rel_fp += 1
                if label in rel_counts:
                    rel_counts[label]["fp"] += 1
        for (i, j), labels in gold_map.items():
            for label in labels:
                if predicted_map.get((i, j)) != label:
                    rel_fn += 1
                    if label in rel_counts:
                        rel_counts[label]["fn"] += 1

    entity_report = _prf(ent_tp, ent_wrong, ent_wrong)
    entity_report["per_type"] = {
        t: {**_prf(c["tp"], c["fp"], c["fn"]), "support": c["tp"] + c["fn"]} for t, c in per_type.items()
    }
    relation_report = _prf(rel_tp, rel_fp, rel_fn)
    relation_report["per_type"] = {
        t: {**_prf(c["tp"], c["fp"], c["fn"]), "support": c["tp"] + c["fn"]} for t, c in rel_counts.items()
    }
    return {
        "entity": entity_report,
        "relation": relation_report,
        "counts": {
            "documents": len(docs),
            "mentions": sum(len(d.mentions) for d in docs),
            "gold_relations": n_gold,
            "candidates": n_candidates,
            "unknown_mentions": unknown_mentions,
            "unresolved_pair_candidates": unresolved_pairs,
        },
    }


# ---------------------------------------------------------------------------
# Model serialization (KGXM)

KGXM_MAGIC = b"KGXM"
KGXM_VERSION = 1


def model_to_bytes(model: TaskModel) -> bytes:
    named = [("x_sk", model.x_sk)]
    if model.w_proj is not None:
        named.append(("w_proj", model.w_proj))
    named.append(("gcn_w0", model.gcn_w[0]))
    named.append(("gcn_w1", model.gcn_w[1]))
    for i, p in enumerate(model.ent_head.parameters()):
        named.append((f"ent_{i}", p))
    for i, p in enumerate(model.rel_head.parameters()):
        named.append((f"rel_{i}", p))
    named.append(("gk_features", model.graph.gk_features))
    meta = {
        "config": model.config.to_json(),
        "ent_labels": model.ent_labels,
        "rel_labels": model.rel_labels,
        "sk_surfaces": model.sk_surfaces,
        "gk_ids": model.gk_ids,
        "gk_surfaces": model.gk_surfaces,
        "edges": [[i, j] for i, j in model.graph.edges],
        "n_sk": model.graph.n_sk,
        "n_gk": model.graph.n_gk,
        "d_in": model.d_in,
        "params": [[name, list(p.shape)] for name, p in named],
    }
    w = Writer()
    w.raw(KGXM_MAGIC)
    w.u16(KGXM_VERSION)
    w.json_block(meta)
    for name, p in named:
        w.string(name)
        w.raw(np.asarray(p, dtype="<f4").tobytes())
    return w.getvalue()


def model_from_bytes(data: bytes) -> TaskModel:
    r = Reader(data)
    check_magic(r, KGXM_MAGIC, KGXM_VERSION)
    meta = r.json_block()
    for key in ("config", "ent_labels", "rel_labels", "sk_surfaces", "gk_ids", "edges", "params"):
        if key not in meta:
            raise FormatError(f"model metadata missing {key!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in meta["params"]:
        got = r.string()
        if got != name:
            raise FormatError(f"parameter order mismatch: expected {name!r}, found {got!r}")
        numel = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * numel)
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    r.expect_end()
    config = TaskTrainConfig(**meta["config"])
    n_sk = int(meta["n_sk"])
    n_gk = int(meta["n_gk"])
    edges = [tuple(e) for e in meta["edges"]]
    graph = FusionGraph(
        n_sk=n_sk,
        n_gk=n_gk,
        edges=edges,
        s_matrix=normalized_adjacency(n_sk + n_gk, edges),
        sk_features=arrays["x_sk"],
        gk_features=arrays["gk_features"],
    )
    model = TaskModel(
        config=config,
        ent_labels=list(meta["ent_labels"]),
        rel_labels=list(meta["rel_labels"]),
        graph=graph,
        sk_surfaces=list(meta["sk_surfaces"]),
        gk_ids=list(meta["gk_ids"]),
        gk_surfaces=list(meta.get("gk_surfaces", [])),
    )
    params = [arrays["x_sk"]]
    if "w_proj" in arrays:
        params.append(arrays["w_proj"])
    params.extend([arrays["gcn_w0"], arrays["gcn_w1"]])
    params.extend(arrays[f"ent_{i}"] for i in range(len(model.ent_head.parameters())))
    params.extend(arrays[f"rel_{i}"] for i in range(len(model.rel_head.parameters())))
    model.set_parameters(params)
    return model


def model_save(model: TaskModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_load(path: str | Path) -> TaskModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(data)
