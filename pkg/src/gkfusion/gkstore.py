"""Train the relational encoder and build the reusable General-Knowledge
store.

The encoder f is a small FFNN over initial entity embeddings, trained so
each subject's output lands near the weight-averaged outputs of its
related objects, per (subject, relation) group:

    loss = sum over groups ||f(s) - sum_j w_j f(o_j)||^2
         + lambda * sum over entities ||f(e) - P(initial_e)||^2

The normalized group weights sum to one, so a constant f zeroes the first
term; the anchor term (P a fixed seeded random projection) breaks that
collapse while keeping per-entity identity. Each stored node carries the
exact concatenation initial ++ f(initial); a frozen store is immutable
and meant to be reused across downstream tasks.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import Reader, Writer, check_magic
from .embeddings import FileEmbeddingStore, StoreMetadata, store_from_bytes, store_to_bytes
from .errors import FormatError, InvalidArgument, MissingEmbeddingError, TrainingDivergedError
from .numerics import FFNN, Adam, derive_seed
from .relweights import Entity, NormalizedWeights, RelationType, WeightedTriple, normalize_weights

log = logging.getLogger(__name__)

KGXS_MAGIC = b"KGXS"
KGXS_VERSION = 1

COLLAPSE_VARIANCE_THRESHOLD = 1e-6


@dataclass
class GKTrainConfig:
    hidden: int = 128
    out_dim: int = 64
    activation: str = "relu"
    lam: float = 0.1
    epochs: int = 1000
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.out_dim < 1:
            raise InvalidArgument("out_dim must be >= 1")
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.lam < 0:
            raise InvalidArgument("lambda must be >= 0")

    def to_json(self) -> dict:
        return {
            "hidden": self.hidden,
            "out_dim": self.out_dim,
            "activation": self.activation,
            "lambda": self.lam,
            "epochs": self.epochs,
            "lr": self.lr,
            "seed": self.seed,
        }

    def hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class GKNode:
    entity: Entity
    initial_vec: np.ndarray
    relational_vec: np.ndarray
    final_vec: np.ndarray


class GKStore:
    """Frozen map of entities to concatenated (initial ++ relational)
    embeddings, plus the relation schema and training provenance."""

    def __init__(
        self,
        nodes: dict[str, GKNode],
        schema: list[RelationType],
        provenance: dict,
        frozen: bool = True,
    ):
        if not nodes:
            raise InvalidArgument("a GK store needs at least one node")
        dims = {(n.initial_vec.shape[0], n.relational_vec.shape[0]) for n in nodes.values()}
        if len(dims) != 1:
            raise FormatError(f"nodes disagree on dims: {dims}")
        self.nodes = nodes
        self.schema = schema
        self.provenance = provenance
        self.frozen = frozen
        self.initial_dim, self.relational_dim = next(iter(dims))
        if frozen:
            for node in nodes.values():
                node.initial_vec.flags.writeable = False
                node.relational_vec.flags.writeable = False
                node.final_vec.flags.writeable = False

    @property
    def final_dim(self) -> int:
        return self.initial_dim + self.relational_dim

    def ids(self) -> list[str]:
        return list(self.nodes.keys())

    def surface_index(self) -> dict[str, str]:
        """normalized surface -> entity id (first writer wins)."""
        index: dict[str, str] = {}
        for node in self.nodes.values():
            index.setdefault(normalize_surface(node.entity.surface), node.entity.id)
        return index

    def cuid_index(self) -> dict[str, str]:
        index: dict[str, str] = {}
        for node in self.nodes.values():
            if node.entity.cuid:
                index.setdefault(node.entity.cuid, node.entity.id)
        return index


def normalize_surface(surface: str) -> str:
    """Whitespace-collapsed, lowercased mention key."""
    return " ".join(surface.split()).lower()


def anchor_projection(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Fixed random projection used by the anchor regularizer."""
    rng = np.random.default_rng(derive_seed(seed, "anchor-projection"))
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def _entity_order(groups: list[NormalizedWeights]) -> list[str]:
    """Distinct entities: union of subjects and objects, sorted."""
    ids = set()
    for g in groups:
        ids.add(g.subject)
        ids.update(g.entries.keys())
    return sorted(ids)


def gk_loss(
    f: FFNN,
    groups: list[NormalizedWeights],
    initial: dict[str, np.ndarray],
    lam: float = 0.0,
    projection: np.ndarray | None = None,
) -> float:
    return gk_loss_and_grad(f, groups, initial, lam, projection)[0]


def gk_loss_and_grad(
    f: FFNN,
    groups: list[NormalizedWeights],
    initial: dict[str, np.ndarray],
    lam: float = 0.0,
    projection: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Loss plus analytic gradients w.r.t. the encoder parameters."""
    order = _entity_order(groups)
    for ent_id in order:
        if ent_id not in initial:
            raise MissingEmbeddingError(ent_id)
    index = {ent_id: i for i, ent_id in enumerate(order)}
    x = np.stack([initial[ent_id] for ent_id in order])
    outputs, cache = f.forward_cached(x)
    grad_outputs = np.zeros_like(outputs)
    loss = 0.0
    for g in groups:
        s_idx = index[g.subject]
        obj_idx = np.array([index[o] for o in g.entries], dtype=np.intp)
        w = np.array(list(g.entries.values()))
        residual = outputs[s_idx] - w @ outputs[obj_idx]
        loss += float(residual @ residual)
        grad_outputs[s_idx] += 2.0 * residual
        np.subtract.at(grad_outputs, obj_idx, 2.0 * np.outer(w, residual))
    if lam > 0.0:
        if projection is None:
            raise InvalidArgument("anchor projection required when lambda > 0")
        anchors = x @ projection
        diff = outputs - anchors
        loss += lam * float(np.sum(diff * diff))
        grad_outputs += 2.0 * lam * diff
    grads, _ = f.backward(cache, grad_outputs)
    return loss, grads


@dataclass
class GKTrainResult:
    store: "GKStore"
    losses: list[float]
    collapse_warning: bool
    dropped_zero_mass: int


def train_gk(
    weighted: list[WeightedTriple],
    provider,
    entities: dict[str, Entity],
    schema: list[RelationType],
    config: GKTrainConfig,
    source: str = "",
) -> GKTrainResult:
    """Full-batch Adam on the group loss; returns a frozen store.

    The entity universe is the union of subjects and objects in the
    weighted triples. Initial embeddings come from the provider keyed by
    entity id (file stores) or surface (toy embedder).
    """
    groups, dropped = normalize_weights(weighted)
    if not groups:
        raise InvalidArgument("no usable weight groups (all dropped or empty input)")
    order = _entity_order(groups)
    initial: dict[str, np.ndarray] = {}
    for ent_id in order:
        if ent_id not in entities:
            raise MissingEmbeddingError(ent_id)
        ent = entities[ent_id]
        initial[ent_id] = np.asarray(provider.embed_key(ent.id, ent.surface), dtype=np.float64)
    in_dim = initial[order[0]].shape[0]
    f = FFNN(
        dims=[in_dim, config.hidden, config.out_dim],
        activations=[config.activation, "identity"],
        seed=derive_seed(config.seed, "gk-encoder"),
    )
    projection = anchor_projection(in_dim, config.out_dim, config.seed) if config.lam > 0 else None
    optimizer = Adam(lr=config.lr)
    losses: list[float] = []
    for epoch in range(config.epochs):
        loss, grads = gk_loss_and_grad(f, groups, initial, config.lam, projection)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch)
        losses.append(loss)
        f.set_parameters(optimizer.step(f.parameters(), grads))
    outputs = f.forward(np.stack([initial[e] for e in order]))
    variance = float(np.mean(np.var(outputs, axis=0)))
    collapse = variance < COLLAPSE_VARIANCE_THRESHOLD
    if collapse:
        log.warning("encoder outputs collapsed (variance %.3g < %.1g)", variance, COLLAPSE_VARIANCE_THRESHOLD)
    nodes: dict[str, GKNode] = {}
    for ent_id in order:
        init_vec = initial[ent_id].copy()  # freezing must not alias provider arrays
        rel_vec = f.forward(init_vec)
        nodes[ent_id] = GKNode(
            entity=entities[ent_id],
            initial_vec=init_vec,
            relational_vec=rel_vec,
            final_vec=np.concatenate([init_vec, rel_vec]),
        )
    provenance = {
        "source": source,
        "config": config.to_json(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "collapse_warning": collapse,
        "output_variance": variance,
        "loss_first": losses[0],
        "loss_final": losses[-1],
        "groups": len(groups),
        "dropped_zero_mass_groups": dropped,
    }
    store = GKStore(nodes=nodes, schema=schema, provenance=provenance, frozen=True)
    return GKTrainResult(store=store, losses=losses, collapse_warning=collapse, dropped_zero_mass=dropped)


# ---------------------------------------------------------------------------
# KGXS serialization: metadata JSON + two embedded KGXE blocks.


def gk_to_bytes(store: GKStore) -> bytes:
    order = store.ids()
    meta = {
        "entities": [
            {"id": n.entity.id, "surface": n.entity.surface, "cuid": n.entity.cuid}
            for n in (store.nodes[i] for i in order)
        ],
        "schema": [{"id": r.id, "verbalization": r.verbalization} for r in store.schema],
        "provenance": store.provenance,
        "frozen": store.frozen,
        "dims": {"initial": store.initial_dim, "relational": store.relational_dim},
    }
    initial_block = store_to_bytes(
        FileEmbeddingStore(
            dim=store.initial_dim,
            entries={i: store.nodes[i].initial_vec for i in order},
            metadata=StoreMetadata(source="gk-initial"),
        )
    )
    relational_block = store_to_bytes(
        FileEmbeddingStore(
            dim=store.relational_dim,
            entries={i: store.nodes[i].relational_vec for i in order},
            metadata=StoreMetadata(source="gk-relational"),
        )
    )
    w = Writer()
    w.raw(KGXS_MAGIC)
    w.u16(KGXS_VERSION)
    w.json_block(meta)
    w.block(initial_block)
    w.block(relational_block)
    return w.getvalue()


def gk_from_bytes(data: bytes) -> GKStore:
    r = Reader(data)
    check_magic(r, KGXS_MAGIC, KGXS_VERSION)
    meta = r.json_block()
    for key in ("entities", "schema", "provenance", "frozen", "dims"):
        if key not in meta:
            raise FormatError(f"store metadata missing {key!r}")
    initial = store_from_bytes(r.block())
    relational = store_from_bytes(r.block())
    r.expect_end()
    if set(initial.ids()) != set(relational.ids()):
        raise FormatError("initial/relational blocks disagree on entity ids")
    nodes: dict[str, GKNode] = {}
    for row in meta["entities"]:
        if not isinstance(row, dict) or "id" not in row or "surface" not in row:
            raise FormatError("entity metadata rows need 'id' and 'surface'")
        ent = Entity(id=str(row["id"]), surface=str(row["surface"]), cuid=row.get("cuid"))
        if ent.id not in initial:
            raise FormatError(f"entity {ent.id!r} listed in metadata but missing from vectors")
        init_vec = initial.lookup(ent.id)
        rel_vec = relational.lookup(ent.id)
        nodes[ent.id] = GKNode(
            entity=ent,
            initial_vec=init_vec,
            relational_vec=rel_vec,
            final_vec=np.concatenate([init_vec, rel_vec]),
        )
    if set(nodes) != set(initial.ids()):
        raise FormatError("metadata entity list does not cover all vector records")
    schema = [RelationType(id=str(s["id"]), verbalization=str(s["verbalization"])) for s in meta["schema"]]
    return GKStore(nodes=nodes, schema=schema, provenance=meta["provenance"], frozen=bool(meta["frozen"]))


def gk_save(store: GKStore, path: str | Path) -> None:
    Path(path).write_bytes(gk_to_bytes(store))


def gk_load(path: str | Path) -> GKStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read GK store {path}: {exc}") from exc
    return gk_from_bytes(data)
