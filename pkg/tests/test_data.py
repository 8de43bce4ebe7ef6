"""Loader contracts, synthetic-corpus properties, corpus transforms."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixlink import data
from mixlink.errors import CapacityError, IntegrityError, ParseError, SchemaError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def make_positives(n, prefix=("d", "w")):
    return [data.PairSample(f"{prefix[0]}{i}", f"{prefix[1]}{i}", 1) for i in range(n)]


# --- source loading ---------------------------------------------------------


def test_load_source_roundtrips_rows(tmp_path):
    d_s = 148
    header = ",".join(f"f_{j}" for j in range(d_s)) + ",label"
    rows = [",".join(str(float(i + j)) for j in range(d_s)) + f",{i % 2}"
            for i in range(3)]
    path = write(tmp_path / "source.csv", header + "\n" + "\n".join(rows) + "\n")
    samples = data.load_source_dataset(path, d_s)
    assert len(samples) == 3
    assert all(s.features.shape == (d_s,) for s in samples)
    assert [s.label for s in samples] == [0, 1, 0]
    assert samples[1].features[0] == 1.0


def test_load_source_rejects_non_numeric_feature(tmp_path):
    path = write(tmp_path / "s.csv", "f_0,f_1,label\n1.0,2.0,0\n1.0,oops,1\n")
    with pytest.raises(ParseError) as err:
        data.load_source_dataset(path, 2)
    assert err.value.line == 3


def test_load_source_dimension_mismatch(tmp_path):
    path = write(tmp_path / "s.csv", "f_0,f_1,label\n1.0,2.0,0\n")
    with pytest.raises(SchemaError):
        data.load_source_dataset(path, 5)


def test_load_source_merges_class_names_to_binary(tmp_path):
    rows = [
        "1.0,benign", "2.0,Phishing", "3.0,gambling", "4.0,Darknet Markets",
        "5.0,blacklisted_addresses", "6.0,money-laundering", "7.0,Ponzi schemes",
        "8.0,exchange",
    ]
    path = write(tmp_path / "s.csv", "f_0,class\n" + "\n".join(rows) + "\n")
    samples = data.load_source_dataset(path, 1)
    assert [s.label for s in samples] == [0, 1, 1, 1, 1, 1, 1, 0]


def test_load_source_rejects_out_of_range_label(tmp_path):
    path = write(tmp_path / "s.csv", "f_0,label\n1.0,2\n")
    with pytest.raises(ParseError):
        data.load_source_dataset(path, 1)


def test_load_source_missing_file():
    with pytest.raises(ParseError):
        data.load_source_dataset("/nonexistent/source.csv", 3)


# --- graph and pair loading -------------------------------------------------


def graph_files(tmp_path, pairs_text="deposit,withdrawal,label\na,c,1\n"):
    write(tmp_path / "accounts.csv",
          "id,role,f_0,f_1\n"
          "a,deposit,1.0,0.0\n"
          "b,normal,0.5,0.5\n"
          "c,withdrawal,0.0,1.0\n"
          "d,normal,0.2,0.8\n")
    write(tmp_path / "edges.csv",
          "from,to,amount,timestamp,gas_price\n"
          "a,b,1.0,100,21000000000\n"
          "b,c,0.997,200,22000000000\n"
          "b,d,0.0,300,1000000000\n")
    pairs_path = write(tmp_path / "pairs.csv", pairs_text)
    return str(tmp_path), pairs_path


def test_load_target_graph_builds_adjacency(tmp_path):
    graph_dir, pairs_path = graph_files(tmp_path)
    graph, pairs = data.load_target_graph_and_pairs(graph_dir, pairs_path)
    assert set(graph.accounts) == {"a", "b", "c", "d"}
    assert graph.neighbors("b") == ("a", "c", "d")
    assert graph.neighbors("a") == ("b",)
    assert graph.feature_dim == 2
    assert len(pairs) == 1 and pairs[0].key == ("a", "c")


def test_load_target_rejects_dangling_pair(tmp_path):
    graph_dir, pairs_path = graph_files(
        tmp_path, "deposit,withdrawal,label\na,0xdead,1\n")
    with pytest.raises(IntegrityError):
        data.load_target_graph_and_pairs(graph_dir, pairs_path)


def test_graph_rejects_self_loop():
    accounts = [data.Account("a", "normal", np.zeros(2))]
    with pytest.raises(IntegrityError):
        data.TransactionGraph(accounts, [data.TxEdge("a", "a", 1.0, 0, 0)])


def test_graph_rejects_duplicate_ids():
    accounts = [data.Account("a", "normal", np.zeros(2)),
                data.Account("a", "deposit", np.ones(2))]
    with pytest.raises(IntegrityError):
        data.TransactionGraph(accounts, [])


def test_graph_rejects_unknown_edge_endpoint():
    accounts = [data.Account("a", "normal", np.zeros(2))]
    with pytest.raises(IntegrityError):
        data.TransactionGraph(accounts, [data.TxEdge("a", "ghost", 1.0, 0, 0)])


def test_pair_sample_rejects_identical_endpoints():
    with pytest.raises(IntegrityError):
        data.PairSample("x", "x", 1)


# --- synthetic corpus -------------------------------------------------------


def test_synthetic_corpus_is_deterministic(tmp_path):
    cfg = data.SynthConfig(n_users=50, n_decoys=200)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        source, graph, pairs = data.generate_synthetic_corpus(cfg, seed=7)
        data.write_corpus(str(out), source, graph, pairs)
    for name in ("source.csv", "accounts.csv", "edges.csv", "pairs.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


def test_synthetic_corpus_single_user_single_pair():
    cfg = data.SynthConfig(n_users=1, n_decoys=0)
    _, _, pairs = data.generate_synthetic_corpus(cfg, seed=3)
    assert len(pairs) == 1
    assert pairs[0].label == 1 and pairs[0].provenance == "ground_truth"


def test_synthetic_pairs_resolve_and_ground_truth_is_planted():
    cfg = data.SynthConfig(n_users=12, n_decoys=20)
    _, graph, pairs = data.generate_synthetic_corpus(cfg, seed=5)
    for p in pairs:
        assert graph.has_account(p.deposit_id)
        assert graph.has_account(p.withdrawal_id)
    planted = {p.key for p in pairs if p.provenance == "ground_truth"}
    assert planted == {(f"dep{i:04d}", f"wdr{i:04d}") for i in range(12)}
    assert sum(p.label == 0 for p in pairs) == 12


def test_synthetic_planted_pairs_more_similar_than_shuffled():
    """Cosine-similarity oracle computed directly over the emitted corpus."""
    cfg = data.SynthConfig(n_users=40, n_decoys=60)
    _, graph, pairs = data.generate_synthetic_corpus(cfg, seed=11)

    def cosine(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    def mean_cos(subset):
        vals = [cosine(graph.accounts[p.deposit_id].features,
                       graph.accounts[p.withdrawal_id].features) for p in subset]
        return float(np.mean(vals))

    pos = mean_cos([p for p in pairs if p.label == 1])
    neg = mean_cos([p for p in pairs if p.label == 0])
    assert pos > neg


def test_synthetic_source_shape_and_balance():
    cfg = data.SynthConfig(n_users=2, n_decoys=0, n_source=400, d_s=20,
                           malicious_frac=0.25)
    source, _, _ = data.generate_synthetic_corpus(cfg, seed=1)
    assert source.features.shape == (400, 20)
    assert source.labels.sum() == 100


def test_synth_config_validation():
    with pytest.raises(SchemaError):
        data.SynthConfig(n_users=0)
    with pytest.raises(SchemaError):
        data.SynthConfig(d_s=7)
    with pytest.raises(SchemaError):
        data.SynthConfig(pools=())


# --- round trip -------------------------------------------------------------


def test_corpus_round_trip_is_structurally_exact(tmp_path):
    cfg = data.SynthConfig(n_users=8, n_decoys=10)
    source, graph, pairs = data.generate_synthetic_corpus(cfg, seed=9)
    data.write_corpus(str(tmp_path), source, graph, pairs)
    source2, graph2, pairs2 = data.load_corpus(str(tmp_path))
    assert np.array_equal(source.features, source2.features)
    assert np.array_equal(source.labels, source2.labels)
    assert list(graph.accounts) == list(graph2.accounts)
    for aid in graph.accounts:
        assert graph.accounts[aid].role == graph2.accounts[aid].role
        assert np.array_equal(graph.accounts[aid].features,
                              graph2.accounts[aid].features)
    assert graph.edges == graph2.edges
    assert pairs == pairs2


# --- shuffled negatives -----------------------------------------------------


def test_negatives_match_published_corpus_arithmetic():
    positives = make_positives(103)
    negatives = data.make_unassociated_negatives(positives, 1, seed=4)
    assert len(negatives) == 103
    assert len(positives) + len(negatives) == 206


def test_negatives_two_positive_enumeration():
    positives = [data.PairSample("a", "b", 1), data.PairSample("c", "d", 1)]
    negatives = data.make_unassociated_negatives(positives, 1, seed=0)
    assert {n.key for n in negatives} <= {("a", "d"), ("c", "b")}
    assert len(negatives) == 2


def test_negatives_never_reproduce_positives():
    positives = make_positives(20)
    negatives = data.make_unassociated_negatives(positives, 3, seed=2)
    pos_keys = {p.key for p in positives}
    assert all(n.key not in pos_keys for n in negatives)
    assert all(n.label == 0 and n.provenance == "shuffled_negative"
               for n in negatives)
    assert len({n.key for n in negatives}) == len(negatives)


def test_negatives_capacity_error():
    positives = make_positives(3)  # only 6 distinct shuffles exist
    with pytest.raises(CapacityError):
        data.make_unassociated_negatives(positives, 3, seed=0)


@settings(deadline=None, max_examples=25)
@given(n=st.integers(2, 12), ratio=st.integers(1, 3), seed=st.integers(0, 2**32))
def test_negatives_property_distinct_and_disjoint(n, ratio, seed):
    positives = make_positives(n)
    if ratio * n > n * (n - 1):
        with pytest.raises(CapacityError):
            data.make_unassociated_negatives(positives, ratio, seed)
        return
    negatives = data.make_unassociated_negatives(positives, ratio, seed)
    keys = [x.key for x in negatives]
    assert len(set(keys)) == len(keys) == ratio * n
    assert not set(keys) & {p.key for p in positives}
    again = data.make_unassociated_negatives(positives, ratio, seed)
    assert negatives == again


# --- label noise ------------------------------------------------------------


def test_noise_eta_zero_is_identity():
    pairs = make_positives(5)
    assert data.inject_label_noise(pairs, 0.0, seed=1) == pairs


def test_noise_injection_count():
    pairs = make_positives(100)
    noisy = data.inject_label_noise(pairs, 0.2, seed=1)
    assert len(noisy) == 120
    assert noisy[:100] == pairs


def test_noise_pseudo_positives_are_false_matches():
    pairs = make_positives(10) + data.make_unassociated_negatives(
        make_positives(10), 1, seed=5)
    noisy = data.inject_label_noise(pairs, 0.5, seed=6)
    injected = [p for p in noisy if p.provenance == "injected_noise"]
    assert len(injected) == 5
    truth = {p.key for p in pairs if p.provenance == "ground_truth"}
    for p in injected:
        assert p.label == 1
        assert p.key not in truth


def test_noise_rejects_out_of_range_eta():
    with pytest.raises(ValueError):
        data.inject_label_noise(make_positives(4), 0.6, seed=0)
    with pytest.raises(ValueError):
        data.inject_label_noise(make_positives(4), -0.1, seed=0)


@settings(deadline=None, max_examples=25)
@given(p=st.integers(2, 40), eta=st.floats(0.0, 0.5), seed=st.integers(0, 2**32))
def test_noise_size_law(p, eta, seed):
    pairs = make_positives(p)
    noisy = data.inject_label_noise(pairs, eta, seed)
    assert len(noisy) == p + int(np.ceil(eta * p))
    assert noisy[:p] == pairs  # originals untouched, in order


# --- few-shot subsampling ---------------------------------------------------


def balanced_corpus(n_pos):
    positives = make_positives(n_pos)
    return positives + data.make_unassociated_negatives(positives, 1, seed=13)


def test_few_shot_n1_train_size():
    train, test = data.subsample_few_shot(balanced_corpus(10), 1, trial_seed=0)
    assert len(train) == 2
    assert sum(p.label for p in train) == 1
    assert len(test) == 18


def test_few_shot_deterministic():
    corpus = balanced_corpus(12)
    a = data.subsample_few_shot(corpus, 3, trial_seed=42)
    b = data.subsample_few_shot(corpus, 3, trial_seed=42)
    assert a == b


def test_few_shot_trials_differ_on_large_corpus():
    corpus = balanced_corpus(103)
    seen = []
    for trial in range(10):
        train, _ = data.subsample_few_shot(corpus, 3, trial_seed=trial)
        seen.append(frozenset(p.key for p in train if p.label == 1))
    assert len(set(seen)) == 10


def test_few_shot_partition_is_exact():
    corpus = balanced_corpus(8)
    train, test = data.subsample_few_shot(corpus, 2, trial_seed=5)
    assert sorted((train + test), key=lambda p: p.key) == sorted(
        corpus, key=lambda p: p.key)
    assert not {p.key for p in train} & {p.key for p in test}


def test_few_shot_capacity_error():
    with pytest.raises(CapacityError):
        data.subsample_few_shot(balanced_corpus(3), 4, trial_seed=0)


# --- imbalance construction -------------------------------------------------


def test_imbalance_arithmetic():
    out = data.make_imbalanced(balanced_corpus(10), "1:5", seed=1)
    assert len(out) == 60
    assert sum(p.label == 0 for p in out) == 50


def test_imbalance_one_to_one_is_identity_size():
    corpus = balanced_corpus(10)
    out = data.make_imbalanced(corpus, "1:1", seed=1)
    assert len(out) == len(corpus)
    assert out == corpus


def test_imbalance_large_no_collisions():
    corpus = make_positives(103)
    out = data.make_imbalanced(corpus, "1:25", seed=2)
    negatives = [p for p in out if p.label == 0]
    assert len(negatives) == 2575
    keys = [n.key for n in negatives]
    assert len(set(keys)) == len(keys)
    assert not set(keys) & {p.key for p in corpus}


def test_imbalance_cannot_thin():
    corpus = data.make_imbalanced(balanced_corpus(6), "1:5", seed=0)
    with pytest.raises(CapacityError):
        data.make_imbalanced(corpus, "1:2", seed=0)


def test_ratio_parsing():
    assert data.parse_ratio("1:25") == 25
    assert data.parse_ratio(5) == 5
    assert data.parse_ratio("10") == 10
    with pytest.raises(ValueError):
        data.parse_ratio("2:5")
    with pytest.raises(ValueError):
        data.parse_ratio("1:0")
