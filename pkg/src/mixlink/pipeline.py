"""End-to-end orchestration: corpus in, pretrained model and embeddings out.

Everything downstream of the corpus is deterministic in the run config's
master seed. Pair embeddings always route through the same fuse() call the
predictor uses, so there is exactly one definition of a pair's joint vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data
from .config import RunConfig
from .data import PairSample, SourceDataset, TransactionGraph
from .errors import SchemaError
from .mixfusion import fuse
from .nn import SgdConfig
from .seeding import derive_seed
from .transfer import (TrainLog, TransferModel, fit_adapter_pca, get_strategy,
                       init_transfer_model)


@dataclass
class Corpus:
    source: SourceDataset
    graph: TransactionGraph
    pairs: list[PairSample]


def synthesize(cfg: RunConfig) -> Corpus:
    if cfg.synth.d_s != cfg.model.d_s:
        raise SchemaError(f"synth.d_s {cfg.synth.d_s} != model.d_s {cfg.model.d_s}")
    corpus_seed = cfg.seed if cfg.synth.seed is None else cfg.synth.seed
    source, graph, pairs = data.generate_synthetic_corpus(cfg.synth, corpus_seed)
    return Corpus(source, graph, pairs)


def load_dir(path: str) -> Corpus:
    source, graph, pairs = data.load_corpus(path)
    return Corpus(source, graph, pairs)


def write_dir(path: str, corpus: Corpus) -> None:
    data.write_corpus(path, corpus.source, corpus.graph, corpus.pairs)


def check_widths(cfg: RunConfig, corpus: Corpus) -> None:
    """The model's declared widths must match what the corpus provides."""
    if corpus.source.dim != cfg.model.d_s:
        raise SchemaError(
            f"source width {corpus.source.dim} != model.d_s {cfg.model.d_s}")
    if corpus.graph.feature_dim != cfg.model.d_t:
        raise SchemaError(
            f"graph feature width {corpus.graph.feature_dim} != "
            f"model.d_t {cfg.model.d_t}")


def build_model(cfg: RunConfig) -> TransferModel:
    m = cfg.model
    return init_transfer_model(
        d_s=m.d_s, d_c=m.d_c, seed=cfg.seed,
        encoder_architecture=m.encoder,
        gen_hidden=m.gen_hidden, clf_hidden=m.head_hidden, lam=m.lam,
        sgd=SgdConfig(lr=cfg.pretrain.lr, momentum=cfg.pretrain.momentum,
                      weight_decay=cfg.pretrain.weight_decay),
        gnn_layers=m.gnn_layers, d_t=m.d_t, k=m.k, cap=m.cap)


def account_cache(model: TransferModel, graph: TransactionGraph,
                  pairs: list[PairSample]) -> dict[str, np.ndarray]:
    """Subgraph embeddings for every account any pair references.

    Candidate pairs recombine a fixed deposit/withdrawal population, so
    caching per account makes the joint vector of any recombination cheap.
    """
    ids = sorted({p.deposit_id for p in pairs} | {p.withdrawal_id for p in pairs})
    return {aid: model.account_embedding(graph, aid) for aid in ids}


def joint_matrix(cache: dict[str, np.ndarray],
                 pairs: list[PairSample]) -> tuple[np.ndarray, np.ndarray]:
    """(n, d_P) joint vectors and the label vector for a pair list."""
    rows = [fuse(cache[p.deposit_id], cache[p.withdrawal_id]).values
            for p in pairs]
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    return np.stack(rows), labels


def pretrain(cfg: RunConfig, corpus: Corpus) -> tuple[TransferModel, TrainLog]:
    """Calibrate E, fit the adapter, then run the configured strategy."""
    check_widths(cfg, corpus)
    model = build_model(cfg)
    model.encoder.calibrate(corpus.source.features)
    model.adapter = fit_adapter_pca(model.encoder, corpus.source, cfg.model.d_p)
    raw = account_cache(model, corpus.graph, corpus.pairs)  # identity stats so far
    model.calibrate_embeddings(np.stack([raw[a] for a in sorted(raw)]))
    cache = {a: model.standardize_embedding(h) for a, h in raw.items()}
    joints, _ = joint_matrix(cache, corpus.pairs)  # labels unused: target is unlabeled here
    # both calibrations happen before strategy dispatch so every strategy,
    # including "none", sees the same standardized geometry
    projected = model.adapter.transform(model.encoder.encode(corpus.source.features))
    model.calibrate(np.vstack([projected, joints]))
    strategy = get_strategy(cfg.pretrain.strategy)
    model, log = strategy(
        model, corpus.source, joints,
        epochs=cfg.pretrain.epochs,
        seed=derive_seed(cfg.seed, "pretrain"),
        batch_size=cfg.pretrain.batch_size,
        classifier_steps=cfg.pretrain.classifier_steps,
        generator_steps=cfg.pretrain.generator_steps,
        with_source_ce=cfg.pretrain.with_source_ce,
        train_adapter=cfg.pretrain.train_adapter)
    return model, log


def embedding_rows(model: TransferModel, corpus: Corpus,
                   max_source: int | None = None
                   ) -> list[tuple[str, str, int, np.ndarray]]:
    """(sample_id, domain, label, projected vector) for every sample.

    Source rows carry the adapter projection T(E(u)); target rows carry the
    fused pair vector. Both live in R^{d_P}, the generator's input space.
    """
    if model.adapter is None:
        raise ValueError("adapter not fitted")
    rows: list[tuple[str, str, int, np.ndarray]] = []
    feats = corpus.source.features
    n_src = len(feats) if max_source is None else min(max_source, len(feats))
    projected = model.adapter.transform(model.encoder.encode(feats[:n_src]))
    for i in range(n_src):
        rows.append((f"src{i:05d}", "source", int(corpus.source.labels[i]),
                     projected[i]))
    cache = account_cache(model, corpus.graph, corpus.pairs)
    joints, labels = joint_matrix(cache, corpus.pairs)
    for i, p in enumerate(corpus.pairs):
        rows.append((f"{p.deposit_id}~{p.withdrawal_id}", "target",
                     int(labels[i]), joints[i]))
    return rows
