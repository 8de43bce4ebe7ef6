"""Gas-fingerprint matcher against a quadratic scan, and the no-transfer arm."""

import csv

import numpy as np
import pytest

from mixlink import pipeline
from mixlink.baselines import (FINGERPRINT_MODULUS, HeuristicMatch,
                               denomination_match, gas_fingerprint,
                               gas_fingerprint_match, match_recall,
                               no_transfer_model, no_transfer_train,
                               write_matches)
from mixlink.config import (EvalConfig, FinetuneConfig, ModelConfig,
                            PretrainConfig, RunConfig)
from mixlink.data import (Account, SynthConfig, TransactionGraph, TxEdge,
                          generate_synthetic_corpus)
from mixlink.errors import SchemaError

# --- oracle ------------------------------------------------------------------


def brute_fingerprint_pairs(graph):
    """All-pairs transaction scan; the implementation must agree exactly."""
    found = {}
    for e1 in graph.edges:
        if graph.accounts[e1.from_id].role != "deposit":
            continue
        fp1 = e1.gas_price % FINGERPRINT_MODULUS
        if fp1 == 0:
            continue
        for e2 in graph.edges:
            if graph.accounts[e2.to_id].role != "withdrawal":
                continue
            if e2.gas_price % FINGERPRINT_MODULUS == fp1:
                key = (e1.from_id, e2.to_id)
                found[key] = min(found.get(key, fp1), fp1)
    return found


def build_graph(roles, edges):
    accounts = [Account(aid, role, np.zeros(3)) for aid, role in roles.items()]
    return TransactionGraph(accounts, [TxEdge(*e) for e in edges])


# --- gas fingerprints ----------------------------------------------------------


def test_matching_low_digits_link_a_pair():
    graph = build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 1000, 21_000_000_123_456_789),
         ("pool", "w", 0.997, 2000, 99_000_000_123_456_789)])
    matches = gas_fingerprint_match(graph)
    assert len(matches) == 1
    m = matches[0]
    assert (m.deposit_id, m.withdrawal_id) == ("d", "w")
    assert m.rule == "gas_fingerprint"
    assert m.evidence == 123_456_789


def test_round_gas_prices_are_skipped():
    graph = build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 1000, 1_000_000_000),
         ("pool", "w", 0.997, 2000, 2_000_000_000)])
    assert gas_fingerprint_match(graph) == []


def test_pair_matched_twice_reports_smallest_fingerprint():
    graph = build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 1000, 5),
         ("d", "pool", 1.0, 1100, 9),
         ("pool", "w", 0.997, 2000, 1_000_000_005),
         ("pool", "w", 0.997, 2100, 2_000_000_009)])
    matches = gas_fingerprint_match(graph)
    assert len(matches) == 1
    assert matches[0].evidence == 5


@pytest.fixture(scope="module")
def planted_corpus():
    cfg = SynthConfig(n_users=15, n_decoys=10, n_source=40, d_s=12)
    return pipeline.Corpus(*generate_synthetic_corpus(cfg, seed=5))


def test_matches_equal_quadratic_scan_on_planted_corpus(planted_corpus):
    graph = planted_corpus.graph
    matches = gas_fingerprint_match(graph)
    got = {(m.deposit_id, m.withdrawal_id): int(m.evidence) for m in matches}
    assert got == brute_fingerprint_pairs(graph)
    assert len(got) == len(matches)  # one entry per pair


def test_recall_equals_the_scan_recall_exactly(planted_corpus):
    positives = [p for p in planted_corpus.pairs if p.label == 1]
    matches = gas_fingerprint_match(planted_corpus.graph)
    brute = set(brute_fingerprint_pairs(planted_corpus.graph))
    brute_recall = sum(1 for p in positives if p.key in brute) / len(positives)
    assert match_recall(matches, positives) == brute_recall
    assert brute_recall > 0  # the corpus plants fingerprint echoes


def test_scan_order_does_not_matter(planted_corpus):
    graph = planted_corpus.graph
    reordered = TransactionGraph(
        list(reversed(list(graph.accounts.values()))),
        list(reversed(graph.edges)))
    assert gas_fingerprint_match(reordered) == gas_fingerprint_match(graph)


def test_every_evidence_recomputes_from_transactions(planted_corpus):
    graph = planted_corpus.graph
    for m in gas_fingerprint_match(graph):
        dep_fps = {gas_fingerprint(e.gas_price)
                   for e in graph.incident_edges(m.deposit_id)
                   if e.from_id == m.deposit_id}
        wdr_fps = {gas_fingerprint(e.gas_price)
                   for e in graph.incident_edges(m.withdrawal_id)
                   if e.to_id == m.withdrawal_id}
        assert m.evidence in dep_fps
        assert m.evidence in wdr_fps


@pytest.mark.parametrize("kwargs", [
    dict(rule="psychic"),
    dict(rule="gas_fingerprint", evidence=0.0),
    dict(rule="gas_fingerprint", evidence=1.5),
    dict(rule="gas_fingerprint", evidence=float(FINGERPRINT_MODULUS)),
    dict(rule="denomination", evidence=0.0),
    dict(withdrawal_id="d"),
])
def test_match_type_validation(kwargs):
    base = dict(deposit_id="d", withdrawal_id="w", rule="gas_fingerprint",
                evidence=7.0)
    with pytest.raises(SchemaError):
        HeuristicMatch(**{**base, **kwargs})


# --- denomination stub ---------------------------------------------------------


def test_denomination_window_and_tolerance():
    graph = build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal", "v": "withdrawal"},
        [("d", "pool", 1.0, 1_000, 7),
         ("pool", "w", 0.997, 2_000, 11),      # in window, within 0.5%
         ("pool", "v", 0.900, 2_000, 13)])     # amount too far off
    matches = denomination_match(graph)
    assert [(m.deposit_id, m.withdrawal_id) for m in matches] == [("d", "w")]
    assert matches[0].rule == "denomination"
    assert matches[0].evidence == 1.0
    # withdrawal before the deposit, or too late, never matches
    assert denomination_match(build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 5_000, 7), ("pool", "w", 1.0, 4_000, 11)])) == []
    assert denomination_match(build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 0, 7), ("pool", "w", 1.0, 90_000, 11)])) == []


def test_denomination_zero_tolerance_needs_exact_amounts():
    graph = build_graph(
        {"d": "deposit", "pool": "normal", "w": "withdrawal"},
        [("d", "pool", 1.0, 0, 7), ("pool", "w", 0.997, 10, 11)])
    assert denomination_match(graph, tolerance=0.0) == []
    with pytest.raises(ValueError):
        denomination_match(graph, window=-1)


def test_write_matches_csv(tmp_path):
    matches = [HeuristicMatch("d", "w", "gas_fingerprint", 123.0),
               HeuristicMatch("d", "v", "denomination", 1.0)]
    path = tmp_path / "matches.csv"
    write_matches(str(path), matches)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["deposit", "withdrawal", "rule", "evidence"]
    assert rows[1] == ["d", "w", "gas_fingerprint", "123"]
    assert rows[2] == ["d", "v", "denomination", "1.0"]


# --- no-transfer arm -------------------------------------------------------------

CFG = RunConfig(
    seed=11,
    synth=SynthConfig(n_users=12, n_decoys=6, n_source=120, d_s=12),
    model=ModelConfig(d_s=12, d_t=12, d_c=4, cap=32, encoder="mlp",
                      gen_hidden=(16,), head_hidden=(16,),
                      assoc_hidden=(32, 32)),
    pretrain=PretrainConfig(epochs=3, batch_size=32, lr=1e-3),
    finetune=FinetuneConfig(epochs=40, lr=0.02, weight_decay=0.0),
    eval=EvalConfig(n_trials=4, n_folds=4, imbalance_budget=24),
)


@pytest.fixture(scope="module")
def corpus():
    return pipeline.synthesize(CFG)


def test_paired_arms_differ_only_in_generator_provenance(corpus):
    transferred, _ = pipeline.pretrain(CFG, corpus)
    untransferred = no_transfer_model(CFG, corpus)
    # identical seed-pinned ingredients everywhere upstream of F
    for name, tensor in transferred.gnn.as_dict().items():
        assert np.array_equal(tensor, untransferred.gnn.as_dict()[name])
    for name, tensor in transferred.encoder.params().items():
        assert np.array_equal(tensor, untransferred.encoder.params()[name])
    # the transferred generator actually moved
    moved = [not np.array_equal(t, untransferred.generator.params()[n])
             for n, t in transferred.generator.params().items()]
    assert any(moved)
    # same random init reproduced on a rebuild
    again = no_transfer_model(CFG, corpus)
    for name, tensor in again.generator.params().items():
        assert np.array_equal(tensor, untransferred.generator.params()[name])


def test_no_transfer_train_completes_at_n_equals_one(corpus):
    positives = [p for p in corpus.pairs if p.label == 1]
    negatives = [p for p in corpus.pairs if p.label == 0]
    clf, model = no_transfer_train(corpus, CFG, [positives[0], negatives[0]],
                                   clf_seed=3, ft_seed=4)
    probs = clf.predict_proba(
        model.features(model.pair_joint(corpus.graph, positives[1].deposit_id,
                                        positives[1].withdrawal_id)))
    assert probs.shape == (1,)
    assert 0.0 <= probs[0] <= 1.0
