"""Synthetic task generator for desk-scale end-to-end runs.

Entities fall into ordered categories arranged on a cycle; a fact
(s, r, o) exists when o's category is one or two steps ahead of s's, and
the relation is determined by the object's category. Neither endpoint's
training-document history alone determines a relation label, and no
category pair occurs in both directions, so reversed candidate pairs are
always negative.

Each category also has a hub entity. Every member relates to its hub
under every relation; these hub facts form the triple file (taxonomy
style background knowledge) and are never verbalized in documents. A
knowledge pipeline trained on the triples pulls each member's embedding
toward its hub, making the category readable from the store. Entity
types expose the category, so type supervision on training mentions
teaches a read-out of that geometry.

A fraction of members is held out of the training documents entirely;
development documents mention them alongside seen entities. Their types
and relations are recoverable from the knowledge store's geometry, but a
documents-only model has never seen their surfaces and holds no node for
them. Label noise flips the relation (verbalization and gold label) of
training sentences only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .numerics import derive_seed
from .relweights import Entity, RelationType, Triple
from .taskfusion import Mention, TaskDocument, save_task_docs

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syllables))


def _distinct_words(rng: np.random.Generator, count: int, syllables: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        w = _pseudo_word(rng, syllables)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class SynthTask:
    entities: list[Entity]
    relations: list[RelationType]
    triples: list[Triple]
    train_docs: list[TaskDocument]
    dev_docs: list[TaskDocument]
    entity_types: dict[str, str]
    meta: dict = field(default_factory=dict)


def _category_pairs(n_categories: int, n_relations: int) -> list[tuple[int, int, int]]:
    """Ordered (subject category, object category, relation index) rows.

    Offsets +1/+2 around the category cycle keep the table free of
    reversed duplicates when there are at least five categories. The
    relation is a function of the object category alone, so it is
    readable from an object's embedding; subjects still see two distinct
    outgoing relations, which keeps single-endpoint memorization
    ambiguous.
    """
    offsets = (1, 2) if n_categories >= 5 else (1,)
    pairs = []
    seen = set()
    for i in range(n_categories):
        for off in offsets:
            j = (i + off) % n_categories
            if j == i or (j, i) in seen or (i, j) in seen:
                continue
            seen.add((i, j))
            pairs.append((i, j, j % n_relations))
    return pairs


def gen_synthetic(
    num_entities: int,
    num_relations: int,
    num_docs: int,
    noise: float,
    seed: int,
    dev_fraction: float = 0.2,
    holdout_fraction: float = 0.3,
    max_sentences_per_doc: int = 3,
    train_facts_per_group: int = 2,
    doc_seed: int | None = None,
) -> SynthTask:
    """``doc_seed`` varies the document split (rendering, holdout, noise)
    over a fixed knowledge structure, so several document-level tasks can
    share one triple file and one trained store."""
    if num_entities < 2:
        raise InvalidArgument("need at least two entities")
    if num_relations < 1:
        raise InvalidArgument("need at least one relation")
    if num_docs < 1:
        raise InvalidArgument("need at least one document")
    if not (0.0 <= noise < 1.0):
        raise InvalidArgument("noise must be in [0, 1)")
    structure_rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    rng = np.random.default_rng(derive_seed(seed if doc_seed is None else doc_seed, "synthetic-docs"))
    taken: set[str] = set()

    n_categories = min(num_relations + 2, max(2, num_entities // 3))
    use_hubs = num_entities >= 4 * n_categories
    n_members = num_entities - (n_categories if use_hubs else 0)
    surfaces = _distinct_words(structure_rng, num_entities, 3, taken)
    entities = [Entity(id=f"e{i}", surface=surfaces[i]) for i in range(num_entities)]
    members = entities[:n_members]
    hubs = entities[n_members:]
    category_of = {e.id: i % n_categories for i, e in enumerate(members)}
    for j, hub in enumerate(hubs):
        category_of[hub.id] = j
    # entity types are the categories: typing doubles as a supervised
    # read-out of the store geometry for surfaces unseen in training docs
    entity_types = {e.id: f"type{category_of[e.id]}" for e in entities}
    verbs = [w + "izes" for w in _distinct_words(structure_rng, num_relations, 2, taken)]
    relations = [RelationType(id=f"r{k}", verbalization=verbs[k]) for k in range(num_relations)]

    by_category: dict[int, list[Entity]] = {c: [] for c in range(n_categories)}
    for e in members:
        by_category[category_of[e.id]].append(e)
    doc_facts_pool: list[Triple] = []
    for ci, cj, rel in _category_pairs(n_categories, num_relations):
        for a in by_category[ci]:
            for b in by_category[cj]:
                if a.id != b.id:
                    doc_facts_pool.append(Triple(subject=a.id, relation=relations[rel].id, object=b.id))
    # hub facts: every member relates to its category hub under every
    # relation. When hubs exist they ARE the triple file: the knowledge
    # source carries taxonomy-style background links while documents carry
    # member-to-member sentences, so category structure reaches a model
    # only through the trained store. Without hubs (tiny vocabularies) the
    # document facts double as the triple file.
    hub_facts: list[Triple] = []
    if use_hubs:
        for e in members:
            hub = hubs[category_of[e.id]]
            for r in relations:
                hub_facts.append(Triple(subject=e.id, relation=r.id, object=hub.id))
    facts = hub_facts if use_hubs else doc_facts_pool

    # hold a fraction of members out of the training documents entirely;
    # the store still covers them through the triple file
    n_holdout = int(np.floor(holdout_fraction * len(members)))
    held_out: set[str] = set()
    if n_holdout and num_docs >= 5:
        picked = rng.permutation(len(members))[:n_holdout]
        held_out = {members[i].id for i in picked}
    heldout_facts = [t for t in doc_facts_pool if t.subject in held_out or t.object in held_out]
    # training documents evidence only a small sample per (subject,
    # relation) group of the fully-seen facts
    by_group: dict[tuple[str, str], list[Triple]] = {}
    for t in doc_facts_pool:
        if t.subject not in held_out and t.object not in held_out:
            by_group.setdefault((t.subject, t.relation), []).append(t)
    train_facts = []
    for key in sorted(by_group):
        group = by_group[key]
        if train_facts_per_group and len(group) > train_facts_per_group:
            picked = rng.permutation(len(group))[:train_facts_per_group]
            train_facts.extend(group[i] for i in sorted(picked))
        else:
            train_facts.extend(group)

    n_dev = int(np.floor(num_docs * dev_fraction))
    n_train = num_docs - n_dev

    ent_by_id = {e.id: e for e in entities}
    rel_by_id = {r.id: r for r in relations}

    def render(doc_id: str, doc_facts: list[Triple], flip_mask: list[bool]) -> TaskDocument:
        parts: list[str] = []
        mentions: list[Mention] = []
        rel_edges: list[tuple[int, int, str]] = []
        offset = 0
        for fact, flipped in zip(doc_facts, flip_mask):
            rel_id = fact.relation
            if flipped:
                others = [r.id for r in relations if r.id != fact.relation]
                rel_id = others[int(rng.integers(len(others)))]
            s_surf = ent_by_id[fact.subject].surface
            o_surf = ent_by_id[fact.object].surface
            verb = rel_by_id[rel_id].verbalization
            sentence = f"{s_surf} {verb} {o_surf}."
            s_start = offset
            o_start = offset + len(s_surf) + 1 + len(verb) + 1
            head = len(mentions)
            mentions.append(Mention(start=s_start, end=s_start + len(s_surf), type=entity_types[fact.subject]))
            mentions.append(Mention(start=o_start, end=o_start + len(o_surf), type=entity_types[fact.object]))
            rel_edges.append((head, head + 1, rel_id))
            parts.append(sentence)
            offset += len(sentence) + 1
        return TaskDocument(doc_id=doc_id, text=" ".join(parts), mentions=mentions, relations=rel_edges)

    class _FactQueue:
        """Cycles a fact pool in seeded shuffled order, reshuffling per pass;
        never repeats a fact within one take() call."""

        def __init__(self, pool: list[Triple], lead: list[Triple] | None = None):
            self.pool = pool
            self.buffer: list[Triple] = list(lead or [])
            self._fill()

        def _fill(self) -> None:
            if self.pool:
                order = rng.permutation(len(self.pool))
                self.buffer.extend(self.pool[i] for i in order)

        def take(self, k: int) -> list[Triple]:
            out: list[Triple] = []
            keys: set[tuple[str, str, str]] = set()
            attempts = 0
            while len(out) < k and self.buffer and attempts < 4 * k + 8:
                attempts += 1
                fact = self.buffer.pop(0)
                if not self.buffer:
                    self._fill()
                key = (fact.subject, fact.relation, fact.object)
                if key in keys:
                    continue
                keys.add(key)
                out.append(fact)
            return out

    # lead the train queue with one fact per member so every document-facing
    # surface is seen at least once (hubs never appear in documents)
    covering: list[Triple] = []
    covered: set[str] = set()
    for fact in train_facts:
        if fact.subject not in covered or fact.object not in covered:
            covering.append(fact)
            covered.add(fact.subject)
            covered.add(fact.object)
    train_queue = _FactQueue([t for t in train_facts if t not in covering], lead=covering)

    train_docs: list[TaskDocument] = []
    rendered_train: list[Triple] = []
    flipped_count = 0
    total_train_sentences = 0
    for d in range(n_train):
        k = int(rng.integers(1, max_sentences_per_doc + 1))
        doc_facts = train_queue.take(k)
        if not doc_facts:
            break
        flips = [bool(rng.random() < noise) and num_relations > 1 for _ in doc_facts]
        flipped_count += sum(flips)
        total_train_sentences += len(doc_facts)
        rendered_train.extend(doc_facts)
        train_docs.append(render(f"train-{d}", doc_facts, flips))

    dev_docs: list[TaskDocument] = []
    if n_dev:
        # dev pool: held-out facts balanced 1:1 against facts the training
        # split actually rendered (clean labels, no noise)
        seen_keys = sorted({(t.subject, t.relation, t.object) for t in rendered_train})
        seen_facts = [Triple(*key) for key in seen_keys]
        seen_shuffled = [seen_facts[i] for i in rng.permutation(len(seen_facts))] if seen_facts else []
        if heldout_facts:
            dev_pool = heldout_facts + seen_shuffled[: len(heldout_facts)]
        else:
            dev_pool = seen_shuffled
        dev_queue = _FactQueue(dev_pool)
        for d in range(n_dev):
            k = int(rng.integers(1, max_sentences_per_doc + 1))
            doc_facts = dev_queue.take(k)
            if not doc_facts:
                break
            dev_docs.append(render(f"dev-{d}", doc_facts, [False] * len(doc_facts)))

    train_surfaces = set()
    for doc in train_docs:
        for i in range(len(doc.mentions)):
            train_surfaces.add(doc.mention_surface(i))
    uncovered = sorted(
        e.surface for e in members if e.id not in held_out and e.surface not in train_surfaces
    )

    meta = {
        "num_entities": num_entities,
        "num_relations": num_relations,
        "num_docs": num_docs,
        "noise": noise,
        "seed": seed,
        "categories": n_categories,
        "hubs": len(hubs),
        "facts": len(facts),
        "document_fact_pool": len(doc_facts_pool),
        "held_out_entities": len(held_out),
        "held_out_facts": len(heldout_facts),
        "train_docs": len(train_docs),
        "dev_docs": len(dev_docs),
        "train_sentences": total_train_sentences,
        "flipped_sentences": flipped_count,
        "doc_seed": seed if doc_seed is None else doc_seed,
        "uncovered_entities": uncovered,
    }
    return SynthTask(
        entities=entities,
        relations=relations,
        triples=facts,
        train_docs=train_docs,
        dev_docs=dev_docs,
        entity_types=entity_types,
        meta=meta,
    )


def write_synth_task(task: SynthTask, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "entities": out / "entities.jsonl",
        "relations": out / "relations.jsonl",
        "triples": out / "triples.jsonl",
        "train_docs": out / "train_docs.jsonl",
        "dev_docs": out / "dev_docs.jsonl",
        "meta": out / "meta.json",
    }
    with open(paths["entities"], "w", encoding="utf-8") as fh:
        for e in task.entities:
            row = {"id": e.id, "surface": e.surface}
            if e.cuid:
                row["cuid"] = e.cuid
            fh.write(json.dumps(row) + "\n")
    with open(paths["relations"], "w", encoding="utf-8") as fh:
        for r in task.relations:
            fh.write(json.dumps({"id": r.id, "verbalization": r.verbalization}) + "\n")
    with open(paths["triples"], "w", encoding="utf-8") as fh:
        for t in task.triples:
            fh.write(json.dumps({"s": t.subject, "r": t.relation, "o": t.object}) + "\n")
    save_task_docs(task.train_docs, paths["train_docs"])
    save_task_docs(task.dev_docs, paths["dev_docs"])
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(task.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
