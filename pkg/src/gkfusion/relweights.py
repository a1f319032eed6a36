"""Relation-match weights from masked-sentence vector arithmetic.

For a candidate triple (s, r, o) four sentences are scored:

    A = "s [MASK] o"      relation masked
    B = "s r [MASK]"      object masked
    C = "[MASK] r o"      subject masked
    D = "s r o"           unmasked

The provider embeds all four; the derived vector v_E = v_B + v_C - v_A
completes the parallelogram over A, B, C, and the weight is
cosine(v_D, v_E). Per subject-object pair, the relation with the highest
weight is the prediction; only pairs predicted correctly feed the
general-knowledge trainer, with their weights clamped to [0, 1] and
normalized per (subject, relation) group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, PredictionError, ZeroNormError
from .numerics import cosine

# Restricted UMLS-style default schema: five grouped relation properties.
UMLS_RELATION_VERBALIZATIONS = (
    "drug used for treatment",
    "physiologic effect",
    "has symptoms",
    "clinically associated",
    "drug agent",
)


@dataclass(frozen=True)
class Entity:
    id: str
    surface: str
    cuid: str | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("entity id must be non-empty")


@dataclass(frozen=True)
class RelationType:
    id: str
    verbalization: str

    def __post_init__(self):
        if not self.id:
            raise InvalidArgument("relation id must be non-empty")
        if not self.verbalization.strip():
            raise InvalidArgument(f"relation {self.id!r} needs a verbalization")


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str
    gold: bool = True


@dataclass
class SentenceQuad:
    """Embeddings of sentences A-D plus the derived parallelogram vertex."""

    v_a: np.ndarray
    v_b: np.ndarray
    v_c: np.ndarray
    v_d: np.ndarray
    v_e: np.ndarray = field(init=False)

    def __post_init__(self):
        dims = {v.shape for v in (self.v_a, self.v_b, self.v_c, self.v_d)}
        if len(dims) != 1:
            raise InvalidArgument(f"sentence embeddings disagree on dim: {dims}")
        self.v_e = self.v_b + self.v_c - self.v_a


@dataclass
class WeightedTriple:
    triple: Triple
    weight: float
    quad: SentenceQuad | None = None


@dataclass
class NormalizedWeights:
    subject: str
    relation: str
    entries: dict[str, float]


def build_masked_sentences(s: Entity, r: RelationType, o: Entity) -> tuple[str, str, str, str]:
    """Sentences A-D for one candidate triple, single-space joins."""
    if not s.surface.strip() or not o.surface.strip():
        raise InvalidArgument("entity surfaces must be non-empty")
    verb = r.verbalization
    a = f"{s.surface} [MASK] {o.surface}"
    b = f"{s.surface} {verb} [MASK]"
    c = f"[MASK] {verb} {o.surface}"
    d = f"{s.surface} {verb} {o.surface}"
    return a, b, c, d


def triple_weight(provider, s: Entity, r: RelationType, o: Entity) -> WeightedTriple:
    """Score one candidate triple; raises ZeroNormError on degenerate quads."""
    sent_a, sent_b, sent_c, sent_d = build_masked_sentences(s, r, o)
    quad = SentenceQuad(
        v_a=provider.embed(sent_a),
        v_b=provider.embed(sent_b),
        v_c=provider.embed(sent_c),
        v_d=provider.embed(sent_d),
    )
    weight = cosine(quad.v_d, quad.v_e)
    return WeightedTriple(triple=Triple(s.id, r.id, o.id, gold=False), weight=weight, quad=quad)


def predict_relation(provider, s: Entity, o: Entity, schema: list[RelationType]) -> tuple[str, list[WeightedTriple]]:
    """Score every schema relation for (s, o); argmax wins, schema order
    breaks ties. Relations whose quads are degenerate are skipped."""
    if not schema:
        raise InvalidArgument("schema must be non-empty")
    scored: list[WeightedTriple] = []
    for r in schema:
        try:
            scored.append(triple_weight(provider, s, r, o))
        except ZeroNormError:
            continue
    if not scored:
        raise PredictionError(f"all relations degenerate for pair ({s.id}, {o.id})")
    best = max(scored, key=lambda wt: wt.weight)  # max keeps the first on ties
    return best.triple.relation, scored


@dataclass
class PairPrediction:
    subject: str
    object: str
    gold_relations: frozenset[str]
    predicted: str
    weight: float
    all_scores: list[WeightedTriple]

    @property
    def correct(self) -> bool:
        return self.predicted in self.gold_relations


def filter_correct(predictions: list[PairPrediction]) -> tuple[list[WeightedTriple], dict]:
    """Keep the predicted triple of each pair whose prediction matches gold.

    Pairs without any gold relation are skipped and counted, not errors.
    """
    kept: list[WeightedTriple] = []
    no_gold = 0
    for pred in predictions:
        if not pred.gold_relations:
            no_gold += 1
            continue
        if pred.correct:
            kept.append(WeightedTriple(Triple(pred.subject, pred.predicted, pred.object), pred.weight))
    stats = {"total": len(predictions), "correct": len(kept), "no_gold": no_gold}
    return kept, stats


def normalize_weights(weighted: list[WeightedTriple]) -> tuple[list[NormalizedWeights], int]:
    """Group by (subject, relation), clamp negatives to zero, normalize.

    Groups whose clamped mass is zero are dropped; returns (groups,
    dropped-group count). Entry order inside a group follows input order.
    """
    grouped: dict[tuple[str, str], list[WeightedTriple]] = {}
    for wt in weighted:
        grouped.setdefault((wt.triple.subject, wt.triple.relation), []).append(wt)
    out: list[NormalizedWeights] = []
    dropped = 0
    for (subj, rel), members in grouped.items():
        clamped = {wt.triple.object: max(wt.weight, 0.0) for wt in members}
        mass = sum(clamped.values())
        if mass <= 0.0:
            dropped += 1
            continue
        out.append(NormalizedWeights(subject=subj, relation=rel, entries={o: w / mass for o, w in clamped.items()}))
    return out, dropped


# ---------------------------------------------------------------------------
# Vocabulary and triple file I/O (JSONL)


def _read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            rows.append((lineno, obj))
    return rows


def load_entities(path: str | Path) -> dict[str, Entity]:
    entities: dict[str, Entity] = {}
    for lineno, obj in _read_jsonl(path):
        if "id" not in obj or "surface" not in obj:
            raise FormatError(f"{path}:{lineno}: entity rows need 'id' and 'surface'")
        ent = Entity(id=str(obj["id"]), surface=str(obj["surface"]), cuid=obj.get("cuid"))
        if ent.id in entities:
            raise FormatError(f"{path}:{lineno}: duplicate entity id {ent.id!r}")
        entities[ent.id] = ent
    return entities


def load_relations(path: str | Path) -> list[RelationType]:
    relations: list[RelationType] = []
    seen = set()
    for lineno, obj in _read_jsonl(path):
        if "id" not in obj or "verbalization" not in obj:
            raise FormatError(f"{path}:{lineno}: relation rows need 'id' and 'verbalization'")
        rel = RelationType(id=str(obj["id"]), verbalization=str(obj["verbalization"]))
        if rel.id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate relation id {rel.id!r}")
        seen.add(rel.id)
        relations.append(rel)
    return relations


def load_triples(path: str | Path, entities: dict[str, Entity], relations: list[RelationType]) -> list[Triple]:
    rel_ids = {r.id for r in relations}
    triples: list[Triple] = []
    for lineno, obj in _read_jsonl(path):
        missing = [k for k in ("s", "r", "o") if k not in obj]
        if missing:
            raise FormatError(f"{path}:{lineno}: triple rows need 's', 'r', 'o' (missing {missing})")
        s, r, o = str(obj["s"]), str(obj["r"]), str(obj["o"])
        for ent_id in (s, o):
            if ent_id not in entities:
                raise FormatError(f"{path}:{lineno}: unknown entity id {ent_id!r}")
        if r not in rel_ids:
            raise FormatError(f"{path}:{lineno}: unknown relation id {r!r}")
        triples.append(Triple(subject=s, relation=r, object=o))
    return triples


@dataclass
class WeightRun:
    """Outcome of scoring a triple file: per-pair rows plus counters."""

    predictions: list[PairPrediction]
    pairs: int
    correct: int
    dropped_zero_norm: int

    @property
    def ratio(self) -> float:
        return self.correct / self.pairs if self.pairs else 0.0


def score_pairs(
    provider,
    triples: list[Triple],
    entities: dict[str, Entity],
    schema: list[RelationType],
    cross_product: bool = False,
) -> WeightRun:
    """Predict a relation for each distinct (subject, object) pair.

    By default pairs come from the triple file; cross-product mode scores
    every ordered entity pair instead (gold relations attached where the
    triple file has them).
    """
    gold: dict[tuple[str, str], set[str]] = {}
    for t in triples:
        gold.setdefault((t.subject, t.object), set()).add(t.relation)
    if cross_product:
        ids = sorted(entities)
        pair_keys = [(a, b) for a in ids for b in ids if a != b]
    else:
        seen: set[tuple[str, str]] = set()
        pair_keys = []
        for t in triples:
            key = (t.subject, t.object)
            if key not in seen:
                seen.add(key)
                pair_keys.append(key)
    predictions: list[PairPrediction] = []
    dropped = 0
    correct = 0
    for s_id, o_id in pair_keys:
        s = entities[s_id]
        o = entities[o_id]
        try:
            predicted, scored = predict_relation(provider, s, o, schema)
        except PredictionError:
            dropped += 1
            continue
        best = next(wt for wt in scored if wt.triple.relation == predicted)
        pred = PairPrediction(
            subject=s_id,
            object=o_id,
            gold_relations=frozenset(gold.get((s_id, o_id), set())),
            predicted=predicted,
            weight=best.weight,
            all_scores=scored,
        )
        if pred.correct:
            correct += 1
        predictions.append(pred)
    return WeightRun(predictions=predictions, pairs=len(predictions), correct=correct, dropped_zero_norm=dropped)


def weights_jsonl_text(run: WeightRun, emit_all: bool = False) -> str:
    """Weight rows as JSONL text. Default: one row per pair (the predicted
    relation); ``emit_all`` renders every scored relation per pair."""
    lines = []
    for pred in run.predictions:
        rows = pred.all_scores if emit_all else [wt for wt in pred.all_scores if wt.triple.relation == pred.predicted]
        for wt in rows:
            lines.append(
                json.dumps(
                    {
                        "s": pred.subject,
                        "r": wt.triple.relation,
                        "o": pred.object,
                        "weight": wt.weight,
                        "predicted": wt.triple.relation == pred.predicted,
                        "correct": wt.triple.relation == pred.predicted and pred.correct,
                    }
                )
            )
    return "\n".join(lines) + ("\n" if lines else "")


def write_weights_jsonl(run: WeightRun, path: str | Path, emit_all: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(weights_jsonl_text(run, emit_all=emit_all))


def load_weights_jsonl(path: str | Path, correct_only: bool = True) -> list[WeightedTriple]:
    """Read weight rows back; by default keeps predicted-and-correct rows,
    which is the training diet for the general-knowledge encoder."""
    out: list[WeightedTriple] = []
    for lineno, obj in _read_jsonl(path):
        needed = ("s", "r", "o", "weight")
        if any(k not in obj for k in needed):
            raise FormatError(f"{path}:{lineno}: weight rows need s/r/o/weight")
        if correct_only and not obj.get("correct", False):
            continue
        out.append(
            WeightedTriple(
                triple=Triple(str(obj["s"]), str(obj["r"]), str(obj["o"])),
                weight=float(obj["weight"]),
            )
        )
    return out
