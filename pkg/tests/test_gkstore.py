"""Relational-encoder loss/gradients, training behavior, and KGXS files."""

import numpy as np
import pytest

from gkfusion.embeddings import ToyAdditiveEmbedder
from gkfusion.errors import FormatError, InvalidArgument, MissingEmbeddingError
from gkfusion.gkstore import (
    GKTrainConfig,
    anchor_projection,
    gk_from_bytes,
    gk_load,
    gk_loss,
    gk_loss_and_grad,
    gk_save,
    gk_to_bytes,
    normalize_surface,
    train_gk,
)
from gkfusion.numerics import FFNN, grad_check
from gkfusion.relweights import Entity, NormalizedWeights, RelationType, Triple, WeightedTriple

SCHEMA = [RelationType("r0", "verb zero"), RelationType("r1", "verb one")]


def constant_net(in_dim, out_vec):
    """FFNN mapping every input to the same constant vector."""
    net = FFNN([in_dim, len(out_vec)], ["identity"], seed=0)
    net.set_parameters([np.zeros((in_dim, len(out_vec))), np.asarray(out_vec, dtype=np.float64)])
    return net


class TestGkLoss:
    def test_constant_encoder_zero_loss(self):
        # normalized weights sum to one, so f == const collapses every term
        groups = [
            NormalizedWeights("s1", "r0", {"o1": 0.25, "o2": 0.75}),
            NormalizedWeights("s2", "r1", {"o1": 1.0}),
        ]
        initial = {k: np.arange(3, dtype=np.float64) + i for i, k in enumerate(["s1", "s2", "o1", "o2"])}
        net = constant_net(3, [2.0, -1.0])
        assert gk_loss(net, groups, initial, lam=0.0) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_two_entity_loss(self):
        # f(s)=(1,0), f(o)=(0,1), single group weight 1: ||(1,-1)||^2 = 2
        groups = [NormalizedWeights("s", "r0", {"o": 1.0})]
        initial = {"s": np.array([1.0, 0.0]), "o": np.array([0.0, 1.0])}
        net = FFNN([2, 2], ["identity"], seed=0)
        net.set_parameters([np.eye(2), np.zeros(2)])
        assert gk_loss(net, groups, initial, lam=0.0) == pytest.approx(2.0, abs=1e-12)

    def test_symmetric_cancellation(self):
        # weights 0.5/0.5 over (1,0) and (-1,0) average to f(s)=(0,0)
        groups = [NormalizedWeights("s", "r0", {"o1": 0.5, "o2": 0.5})]
        initial = {"s": np.array([0.0, 0.0]), "o1": np.array([1.0, 0.0]), "o2": np.array([-1.0, 0.0])}
        net = FFNN([2, 2], ["identity"], seed=0)
        net.set_parameters([np.eye(2), np.zeros(2)])
        assert gk_loss(net, groups, initial, lam=0.0) == pytest.approx(0.0, abs=1e-12)

    def test_missing_embedding(self):
        groups = [NormalizedWeights("s", "r0", {"o": 1.0})]
        net = FFNN([2, 2], ["identity"], seed=0)
        with pytest.raises(MissingEmbeddingError):
            gk_loss(net, groups, {"s": np.zeros(2)}, lam=0.0)

    def test_anchor_requires_projection(self):
        groups = [NormalizedWeights("s", "r0", {"o": 1.0})]
        initial = {"s": np.zeros(2), "o": np.zeros(2)}
        net = FFNN([2, 2], ["identity"], seed=0)
        with pytest.raises(InvalidArgument):
            gk_loss(net, groups, initial, lam=0.1, projection=None)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        ids = ["s1", "s2", "o1", "o2", "o3"]
        initial = {k: rng.normal(size=4) for k in ids}
        groups = [
            NormalizedWeights("s1", "r0", {"o1": 0.3, "o2": 0.7}),
            NormalizedWeights("s2", "r0", {"o3": 1.0}),
            NormalizedWeights("s2", "r1", {"o1": 0.5, "s1": 0.5}),
        ]
        net = FFNN([4, 6, 3], ["tanh", "identity"], seed=11)
        proj = anchor_projection(4, 3, seed=2)

        def loss_and_grad(n):
            return gk_loss_and_grad(n, groups, initial, lam=0.1, projection=proj)

        assert grad_check(net, loss_and_grad, h=1e-5) < 1e-4


def toy_weighted_triples():
    """3-entity toy graph: s -> o1 under r0, s -> o2 under r1."""
    return [
        WeightedTriple(Triple("s", "r0", "o1"), 1.0),
        WeightedTriple(Triple("s", "r1", "o2"), 1.0),
    ]


def toy_entities():
    return {k: Entity(k, f"surface {k}") for k in ("s", "o1", "o2")}


class TestTrainGk:
    def test_loss_improves(self):
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=16, out_dim=4, lam=0.1, epochs=200, seed=7)
        result = train_gk(toy_weighted_triples(), toy, toy_entities(), SCHEMA, config)
        assert result.losses[-1] < result.losses[0]
        assert not result.collapse_warning

    def test_deterministic_store_bytes(self):
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=16, out_dim=4, lam=0.1, epochs=50, seed=7)
        a = train_gk(toy_weighted_triples(), toy, toy_entities(), SCHEMA, config)
        b = train_gk(toy_weighted_triples(), ToyAdditiveEmbedder(dim=8, seed=3), toy_entities(), SCHEMA, config)
        assert gk_to_bytes(a.store) == gk_to_bytes(b.store)

    def test_collapse_detected_without_anchor(self):
        # simplest symmetric fixture: two entities pointing at each other
        weighted = [
            WeightedTriple(Triple("a", "r0", "b"), 1.0),
            WeightedTriple(Triple("b", "r0", "a"), 1.0),
        ]
        entities = {"a": Entity("a", "alpha"), "b": Entity("b", "beta")}
        toy = ToyAdditiveEmbedder(dim=8, seed=1)
        config = GKTrainConfig(hidden=16, out_dim=4, lam=0.0, epochs=800, lr=0.02, seed=3)
        result = train_gk(weighted, toy, entities, SCHEMA, config)
        assert result.collapse_warning
        assert result.store.provenance["collapse_warning"] is True

    def test_anchor_prevents_collapse(self):
        weighted = [
            WeightedTriple(Triple("a", "r0", "b"), 1.0),
            WeightedTriple(Triple("b", "r0", "a"), 1.0),
        ]
        entities = {"a": Entity("a", "alpha"), "b": Entity("b", "beta")}
        toy = ToyAdditiveEmbedder(dim=8, seed=1)
        config = GKTrainConfig(hidden=16, out_dim=4, lam=0.1, epochs=800, lr=0.02, seed=3)
        result = train_gk(weighted, toy, entities, SCHEMA, config)
        assert not result.collapse_warning

    def test_universe_is_union_of_subjects_and_objects(self):
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=8, out_dim=4, epochs=5, seed=1)
        result = train_gk(toy_weighted_triples(), toy, toy_entities(), SCHEMA, config)
        assert sorted(result.store.ids()) == ["o1", "o2", "s"]

    def test_zero_mass_groups_dropped_and_counted(self):
        weighted = toy_weighted_triples() + [WeightedTriple(Triple("o1", "r0", "o2"), -0.5)]
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=8, out_dim=4, epochs=5, seed=1)
        result = train_gk(weighted, toy, toy_entities(), SCHEMA, config)
        assert result.dropped_zero_mass == 1


class TestGKNodeInvariants:
    def make_store(self):
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=16, out_dim=4, epochs=20, seed=7)
        return train_gk(toy_weighted_triples(), toy, toy_entities(), SCHEMA, config).store

    def test_concatenation_exact(self):
        store = self.make_store()
        for node in store.nodes.values():
            d0 = node.initial_vec.shape[0]
            assert np.array_equal(node.final_vec[:d0], node.initial_vec)
            assert np.array_equal(node.final_vec[d0:], node.relational_vec)

    def test_dims_consistent(self):
        store = self.make_store()
        assert store.final_dim == store.initial_dim + store.relational_dim
        for node in store.nodes.values():
            assert node.final_vec.shape == (store.final_dim,)

    def test_surface_index_normalizes(self):
        store = self.make_store()
        index = store.surface_index()
        assert index[normalize_surface("Surface  S")] == "s"


class TestKgxsFormat:
    def make_store(self):
        toy = ToyAdditiveEmbedder(dim=8, seed=3)
        config = GKTrainConfig(hidden=16, out_dim=4, epochs=10, seed=7)
        return train_gk(toy_weighted_triples(), toy, toy_entities(), SCHEMA, config).store

    def test_round_trip(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "gk.kgxs"
        gk_save(store, path)
        loaded = gk_load(path)
        assert loaded.frozen
        assert sorted(loaded.ids()) == sorted(store.ids())
        assert [r.id for r in loaded.schema] == [r.id for r in store.schema]
        assert loaded.provenance["config_hash"] == store.provenance["config_hash"]
        for ent_id in store.ids():
            a = store.nodes[ent_id]
            b = loaded.nodes[ent_id]
            assert np.array_equal(
                np.asarray(a.final_vec, dtype=np.float32), np.asarray(b.final_vec, dtype=np.float32)
            )

    def test_round_trip_bytes_stable(self):
        store = self.make_store()
        raw = gk_to_bytes(store)
        assert gk_to_bytes(gk_from_bytes(raw)) == raw

    def test_bad_magic(self):
        raw = bytearray(gk_to_bytes(self.make_store()))
        raw[:4] = b"NOPE"
        with pytest.raises(FormatError):
            gk_from_bytes(bytes(raw))

    def test_corrupt_metadata_block(self):
        raw = bytearray(gk_to_bytes(self.make_store()))
        # metadata JSON starts after magic+version+length; smash its first brace
        raw[10] = ord("X")
        with pytest.raises(FormatError):
            gk_from_bytes(bytes(raw))

    def test_truncation_fuzz(self):
        raw = gk_to_bytes(self.make_store())
        for cut in range(0, len(raw) - 1, max(1, len(raw) // 80)):
            with pytest.raises(FormatError):
                gk_from_bytes(raw[:cut])

    def test_loaded_vectors_read_only(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "gk.kgxs"
        gk_save(store, path)
        loaded = gk_load(path)
        node = next(iter(loaded.nodes.values()))
        with pytest.raises(ValueError):
            node.final_vec[0] = 99.0
