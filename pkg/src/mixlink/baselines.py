"""Heuristic comparators and the no-transfer baseline arm.

The gas-fingerprint matcher links deposit-side and withdrawal-side
transactions whose gas prices share the same nonzero last nine decimal
digits. The denomination matcher is a reduced stub: it pairs transactions
of approximately equal amount inside a time window, the tolerance covering
relayer fees. The no-transfer arm reuses the full pipeline with the
generator left at its random initialization, so comparisons against the
transferred model differ in exactly one ingredient.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

from . import pipeline
from .association import AssociationClassifier, finetune
from .config import RunConfig
from .data import PairSample, TransactionGraph
from .errors import SchemaError
from .nn import SgdConfig
from .pipeline import Corpus
from .transfer import TransferModel

RULES = ("gas_fingerprint", "denomination")
FINGERPRINT_MODULUS = 10 ** 9


@dataclass(frozen=True)
class HeuristicMatch:
    deposit_id: str
    withdrawal_id: str
    rule: str
    evidence: float

    def __post_init__(self):
        if self.rule not in RULES:
            raise SchemaError(f"unknown rule {self.rule!r}")
        if self.deposit_id == self.withdrawal_id:
            raise SchemaError("match endpoints must differ")
        if self.rule == "gas_fingerprint":
            fp = self.evidence
            if fp != int(fp) or not 0 < fp < FINGERPRINT_MODULUS:
                raise SchemaError(
                    f"gas fingerprint evidence must be a nonzero value below "
                    f"{FINGERPRINT_MODULUS}, got {self.evidence!r}")
        elif self.evidence <= 0:
            raise SchemaError("denomination evidence must be positive")


def gas_fingerprint(gas_price: int) -> int:
    """Last nine decimal digits of a wei-denominated gas price."""
    return gas_price % FINGERPRINT_MODULUS


def _transactions(graph: TransactionGraph):
    """(deposit-side, withdrawal-side) transaction lists by account role.

    A deposit account acts through its outgoing transfers, a withdrawal
    account through its incoming ones.
    """
    deposit_txs = [e for e in graph.edges
                   if graph.accounts[e.from_id].role == "deposit"]
    withdrawal_txs = [e for e in graph.edges
                      if graph.accounts[e.to_id].role == "withdrawal"]
    return deposit_txs, withdrawal_txs


def gas_fingerprint_match(graph: TransactionGraph) -> list[HeuristicMatch]:
    """Pairs whose transactions share a nonzero gas-price fingerprint.

    Any one matching transaction pair links the accounts; a pair matched by
    several fingerprints reports the smallest. Zero fingerprints are
    skipped: round gas prices are defaults, not signatures.
    """
    deposit_txs, withdrawal_txs = _transactions(graph)
    by_fp: dict[int, set[str]] = {}
    for e in deposit_txs:
        fp = gas_fingerprint(e.gas_price)
        if fp:
            by_fp.setdefault(fp, set()).add(e.from_id)
    best: dict[tuple[str, str], int] = {}
    for e in withdrawal_txs:
        fp = gas_fingerprint(e.gas_price)
        if not fp:
            continue
        for dep in by_fp.get(fp, ()):
            key = (dep, e.to_id)
            if key not in best or fp < best[key]:
                best[key] = fp
    return [HeuristicMatch(dep, wdr, "gas_fingerprint", float(fp))
            for (dep, wdr), fp in sorted(best.items())]


def denomination_match(graph: TransactionGraph, window: int = 86_400,
                       tolerance: float = 0.005) -> list[HeuristicMatch]:
    """Reduced stub: near-equal amounts within a time window.

    A withdrawal transaction matches a deposit transaction when it happens
    inside ``window`` seconds after it and its amount is within
    ``tolerance`` (relative) of the deposited amount. The slack absorbs
    relayer fees. This is a deliberately partial rendering of
    cross-contract denomination linking.
    """
    if window < 0 or not 0 <= tolerance < 1:
        raise ValueError("window must be >= 0 and tolerance in [0, 1)")
    deposit_txs, withdrawal_txs = _transactions(graph)
    best: dict[tuple[str, str], float] = {}
    for d in deposit_txs:
        if d.amount <= 0:
            continue
        for w in withdrawal_txs:
            if w.amount <= 0 or d.from_id == w.to_id:
                continue
            in_window = 0 <= w.timestamp - d.timestamp <= window
            if in_window and abs(w.amount - d.amount) <= tolerance * d.amount:
                key = (d.from_id, w.to_id)
                if key not in best or d.amount < best[key]:
                    best[key] = d.amount
    return [HeuristicMatch(dep, wdr, "denomination", amount)
            for (dep, wdr), amount in sorted(best.items())]


def match_recall(matches: list[HeuristicMatch],
                 positives: list[PairSample]) -> float:
    """Fraction of planted pairs any match recovers."""
    if not positives:
        raise ValueError("no positives to score against")
    found = {(m.deposit_id, m.withdrawal_id) for m in matches}
    hit = sum(1 for p in positives if p.key in found)
    return hit / len(positives)


def write_matches(path: str, matches: list[HeuristicMatch]) -> None:
    """CSV export: deposit,withdrawal,rule,evidence."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["deposit", "withdrawal", "rule", "evidence"])
        for m in matches:
            evidence = (str(int(m.evidence)) if m.rule == "gas_fingerprint"
                        else repr(m.evidence))
            writer.writerow([m.deposit_id, m.withdrawal_id, m.rule, evidence])


def no_transfer_model(cfg: RunConfig, corpus: Corpus) -> TransferModel:
    """The pipeline's model with pretraining strategy forced to 'none'.

    Encoder calibration and the PCA adapter fit still run (they are
    deterministic data fits, not transfer training); the generator keeps
    its seed-pinned random initialization.
    """
    pretrain_cfg = dataclasses.replace(cfg.pretrain, strategy="none")
    model, _ = pipeline.pretrain(dataclasses.replace(cfg, pretrain=pretrain_cfg),
                                 corpus)
    return model


def no_transfer_train(corpus: Corpus, cfg: RunConfig,
                      train_pairs: list[PairSample], clf_seed: int,
                      ft_seed: int,
                      model: TransferModel | None = None
                      ) -> tuple[AssociationClassifier, TransferModel]:
    """Finetune the association classifier on an untransferred generator.

    Every setting other than generator provenance matches the full
    pipeline, so runs under identical seeds are directly comparable.
    """
    if model is None:
        model = no_transfer_model(cfg, corpus)
    cache = pipeline.account_cache(model, corpus.graph, train_pairs)
    joints, labels = pipeline.joint_matrix(cache, train_pairs)
    clf = AssociationClassifier(model.d_p, seed=clf_seed,
                                architecture=cfg.model.assoc_architecture,
                                hidden=cfg.model.assoc_hidden)
    ft = cfg.finetune
    finetune(clf, model, (joints, labels), epochs=ft.epochs, seed=ft_seed,
             sgd=SgdConfig(lr=ft.lr, momentum=ft.momentum,
                           weight_decay=ft.weight_decay),
             batch_size=ft.batch_size)
    return clf, model
