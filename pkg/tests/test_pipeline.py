"""Corpus plumbing, pretraining orchestration, and the embedding cache."""

import dataclasses

import numpy as np
import pytest

from mixlink import pipeline
from mixlink.association import _frozen_digest
from mixlink.config import (EvalConfig, FinetuneConfig, ModelConfig,
                            PretrainConfig, RunConfig)
from mixlink.data import SynthConfig
from mixlink.errors import SchemaError

# small enough that a pretraining run takes well under a second
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


@pytest.fixture(scope="module")
def trained(corpus):
    return pipeline.pretrain(CFG, corpus)


def test_synthesize_rejects_width_mismatch():
    bad = dataclasses.replace(CFG, synth=dataclasses.replace(CFG.synth, d_s=16))
    with pytest.raises(SchemaError):
        pipeline.synthesize(bad)


def test_check_widths_catches_graph_mismatch(corpus):
    bad = dataclasses.replace(
        CFG, model=dataclasses.replace(CFG.model, d_t=13))
    with pytest.raises(SchemaError):
        pipeline.check_widths(bad, corpus)


def test_pretrain_fits_adapter_and_logs_each_epoch(trained):
    model, log = trained
    assert model.adapter is not None
    assert model.adapter.d_p == CFG.model.d_p
    assert [r.epoch for r in log.epochs] == list(range(CFG.pretrain.epochs))


def test_pretrain_is_deterministic(corpus, trained):
    again, _ = pipeline.pretrain(CFG, corpus)
    assert _frozen_digest(again) == _frozen_digest(trained[0])


def test_cache_covers_every_pair_endpoint(corpus, trained):
    model, _ = trained
    cache = pipeline.account_cache(model, corpus.graph, corpus.pairs)
    wanted = {p.deposit_id for p in corpus.pairs}
    wanted |= {p.withdrawal_id for p in corpus.pairs}
    assert set(cache) == wanted
    assert all(v.shape == (CFG.model.d_c,) for v in cache.values())


def test_joint_matrix_matches_the_serving_path_exactly(corpus, trained):
    # one definition of a pair's vector: cache route == predict_pair route
    model, _ = trained
    cache = pipeline.account_cache(model, corpus.graph, corpus.pairs)
    joints, labels = pipeline.joint_matrix(cache, corpus.pairs)
    assert joints.shape == (len(corpus.pairs), CFG.model.d_p)
    for i, p in enumerate(corpus.pairs[:5]):
        direct = model.pair_joint(corpus.graph, p.deposit_id, p.withdrawal_id)
        assert np.array_equal(joints[i], direct)
        assert labels[i] == p.label


def test_embedding_rows_partition_and_widths(corpus, trained):
    model, _ = trained
    rows = pipeline.embedding_rows(model, corpus, max_source=10)
    src = [r for r in rows if r[1] == "source"]
    tgt = [r for r in rows if r[1] == "target"]
    assert len(src) == 10
    assert len(tgt) == len(corpus.pairs)
    assert all(r[3].shape == (CFG.model.d_p,) for r in rows)
    assert {r[2] for r in rows} <= {0, 1}


def test_corpus_dir_round_trip(tmp_path, corpus):
    pipeline.write_dir(str(tmp_path), corpus)
    back = pipeline.load_dir(str(tmp_path))
    assert np.array_equal(back.source.features, corpus.source.features)
    assert np.array_equal(back.source.labels, corpus.source.labels)
    assert back.pairs == corpus.pairs
    assert sorted(back.graph.accounts) == sorted(corpus.graph.accounts)
