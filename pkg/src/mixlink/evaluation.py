"""Metrics, the three evaluation protocols, the MMD probe, embedding export.

Every protocol derives all of its randomness from the run config's master
seed, so rerunning with the same config reproduces the report bit for bit.
Trial-level seeds never depend on the swept quantity (noise rate, imbalance
ratio), which keeps runs paired: sweeping the knob changes the data, not
the draw.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import pipeline
from .association import AssociationClassifier, finetune
from .config import RunConfig, config_digest, flat_items
from .data import (PairSample, inject_label_noise, make_imbalanced,
                   parse_ratio, subsample_few_shot)
from .errors import BandwidthError, CapacityError, IntegrityError, SchemaError
from .nn import SgdConfig
from .pipeline import Corpus
from .seeding import derive_seed, rng_for
from .transfer import TransferModel

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


# --- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    """Confusion counts plus the derived rates; positive class is 1."""

    n: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    def __post_init__(self):
        if self.tp + self.fp + self.tn + self.fn != self.n:
            raise ValueError("confusion counts do not sum to n")
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")


def compute_metrics(predictions, labels) -> Metrics:
    """Confusion-matrix metrics; f1 is 0 when precision and recall both are."""
    preds = np.asarray(predictions).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if preds.shape != y.shape:
        raise ValueError(f"length mismatch: {preds.shape[0]} predictions vs "
                         f"{y.shape[0]} labels")
    if preds.size == 0:
        raise ValueError("need at least one sample")
    for arr, what in ((preds, "predictions"), (y, "labels")):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{what} must be 0/1")
    tp = int(np.sum((preds == 1) & (y == 1)))
    fp = int(np.sum((preds == 1) & (y == 0)))
    tn = int(np.sum((preds == 0) & (y == 0)))
    fn = int(np.sum((preds == 0) & (y == 1)))
    n = preds.size
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return Metrics(n=n, tp=tp, fp=fp, tn=tn, fn=fn,
                   accuracy=(tp + tn) / n, precision=precision,
                   recall=recall, f1=f1)


@dataclass(frozen=True)
class EvalReport:
    """One protocol run: per-trial metrics plus the config that produced them."""

    protocol: str
    setting: str
    trials: tuple[Metrics, ...]
    config: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.trials:
            raise ValueError("a report needs at least one trial")

    def values(self, metric: str) -> np.ndarray:
        if metric not in METRIC_NAMES:
            raise ValueError(f"unknown metric {metric!r}")
        return np.array([getattr(m, metric) for m in self.trials])

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        """Sample (n-1) standard deviation; 0 for a single trial."""
        vals = self.values(metric)
        return float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name in METRIC_NAMES:
            out[f"{name}_mean"] = self.mean(name)
            out[f"{name}_std"] = self.std(name)
        return out


def degradation_rate(f1_clean: float, f1_eta: float) -> float:
    """Relative F1 loss (f1_clean - f1_eta) / f1_clean."""
    if f1_clean <= 0.0:
        raise ZeroDivisionError(
            f"degradation rate needs a positive clean F1, got {f1_clean}")
    return (f1_clean - f1_eta) / f1_clean


# --- shared trial machinery ---------------------------------------------------


def _snapshot(cfg: RunConfig) -> tuple[tuple[str, str], ...]:
    return (("config.digest", config_digest(cfg)), *flat_items(cfg))


def _pretrained(cfg: RunConfig, corpus: Corpus,
                model: TransferModel | None) -> TransferModel:
    if model is not None:
        return model
    return pipeline.pretrain(cfg, corpus)[0]


def _trial_metrics(model: TransferModel, cfg: RunConfig,
                   x_train: np.ndarray, y_train: np.ndarray,
                   x_test: np.ndarray, y_test: np.ndarray,
                   clf_seed: int, ft_seed: int) -> Metrics:
    """Fresh classifier, finetune on the frozen model, score the held-out set."""
    clf = AssociationClassifier(model.d_p, seed=clf_seed,
                                architecture=cfg.model.assoc_architecture,
                                hidden=cfg.model.assoc_hidden)
    ft = cfg.finetune
    finetune(clf, model, (x_train, y_train), epochs=ft.epochs, seed=ft_seed,
             sgd=SgdConfig(lr=ft.lr, momentum=ft.momentum,
                           weight_decay=ft.weight_decay),
             batch_size=ft.batch_size)
    probs = clf.predict_proba(model.features(x_test))
    return compute_metrics((probs >= ft.threshold).astype(int), y_test)


def stratified_fold_indices(labels, n_folds: int, seed: int) -> list[np.ndarray]:
    """Disjoint test-index arrays with both classes present in every fold."""
    y = np.asarray(labels).astype(np.int64).ravel()
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < n_folds:
            raise CapacityError(
                f"class {cls} has {len(idx)} samples, fewer than "
                f"{n_folds} folds")
        perm = idx[rng_for(seed, "folds", cls).permutation(len(idx))]
        for f, chunk in enumerate(np.array_split(perm, n_folds)):
            folds[f].extend(int(i) for i in chunk)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


# --- protocols ------------------------------------------------------------------


def run_few_shot(corpus: Corpus, cfg: RunConfig, n: int | str | None = None,
                 model: TransferModel | None = None) -> EvalReport:
    """Balanced N-shot resampling, one finetune per trial, held-out scoring.

    ``n`` may be ``"ALL"``: every trial then trains on the full labeled set
    and only the classifier seed varies across the 10 trials.
    """
    n = cfg.eval.few_shot_n if n is None else n
    if isinstance(n, str) and n != "ALL":
        raise ValueError(f"n must be an int or 'ALL', got {n!r}")
    model = _pretrained(cfg, corpus, model)
    cache = pipeline.account_cache(model, corpus.graph, corpus.pairs)
    trials = []
    for t in range(cfg.eval.n_trials):
        if n == "ALL":
            train_pairs: list[PairSample] = corpus.pairs
            test_pairs = corpus.pairs
        else:
            train_pairs, test_pairs = subsample_few_shot(
                corpus.pairs, n, derive_seed(cfg.seed, "few-shot-split", str(n), t))
        x_tr, y_tr = pipeline.joint_matrix(cache, train_pairs)
        x_te, y_te = pipeline.joint_matrix(cache, test_pairs)
        trials.append(_trial_metrics(
            model, cfg, x_tr, y_tr, x_te, y_te,
            clf_seed=derive_seed(cfg.seed, "few-shot-clf", str(n), t),
            ft_seed=derive_seed(cfg.seed, "few-shot-ft", str(n), t)))
    return EvalReport("few_shot", f"N={n}", tuple(trials), _snapshot(cfg))


def run_noise(corpus: Corpus, cfg: RunConfig,
              etas: tuple[float, ...] | None = None,
              model: TransferModel | None = None) -> dict[float, EvalReport]:
    """Cross-validated robustness to pseudo-associated label noise.

    Fold assignment, injection draws, and classifier seeds depend only on
    the fold index, never on eta, so eta=0 reproduces the clean baseline
    exactly and the sweep stays paired. Injection touches training folds
    only; held-out folds are checked against contamination by provenance.
    """
    etas = cfg.eval.noise_rates if etas is None else tuple(etas)
    if any(p.provenance == "injected_noise" for p in corpus.pairs):
        raise IntegrityError("noise protocol requires a corpus without "
                             "pre-injected pairs")
    model = _pretrained(cfg, corpus, model)
    cache = pipeline.account_cache(model, corpus.graph, corpus.pairs)
    labels = [p.label for p in corpus.pairs]
    folds = stratified_fold_indices(labels, cfg.eval.n_folds,
                                    derive_seed(cfg.seed, "noise-folds"))
    reports: dict[float, EvalReport] = {}
    for eta in etas:
        trials = []
        for f, test_idx in enumerate(folds):
            in_test = np.zeros(len(corpus.pairs), dtype=bool)
            in_test[test_idx] = True
            train_pairs = [p for i, p in enumerate(corpus.pairs) if not in_test[i]]
            test_pairs = [corpus.pairs[i] for i in test_idx]
            noisy = inject_label_noise(train_pairs, eta,
                                       derive_seed(cfg.seed, "noise-inject", f))
            if any(p.provenance == "injected_noise" for p in test_pairs):
                raise IntegrityError(f"fold {f}: injected pair leaked into "
                                     "the held-out fold")
            x_tr, y_tr = pipeline.joint_matrix(cache, noisy)
            x_te, y_te = pipeline.joint_matrix(cache, test_pairs)
            trials.append(_trial_metrics(
                model, cfg, x_tr, y_tr, x_te, y_te,
                clf_seed=derive_seed(cfg.seed, "noise-clf", f),
                ft_seed=derive_seed(cfg.seed, "noise-ft", f)))
        reports[float(eta)] = EvalReport("noise", f"eta={eta:g}",
                                         tuple(trials), _snapshot(cfg))
    return reports


def _budget_indices(train_idx: np.ndarray, labels: np.ndarray, budget: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Cap the training fold at ``budget`` pairs, preserving the class mix."""
    if budget == 0 or len(train_idx) <= budget:
        return np.sort(train_idx)
    pos = train_idx[labels[train_idx] == 1]
    neg = train_idx[labels[train_idx] == 0]
    n_pos = round(budget * len(pos) / len(train_idx))
    n_pos = min(max(n_pos, 1), len(pos), budget - 1)
    n_neg = min(budget - n_pos, len(neg))
    picked = np.concatenate([rng.choice(pos, size=n_pos, replace=False),
                             rng.choice(neg, size=n_neg, replace=False)])
    return np.sort(picked)


def run_imbalance(corpus: Corpus, cfg: RunConfig,
                  ratios: tuple[int | str, ...] | None = None,
                  model: TransferModel | None = None) -> dict[int, EvalReport]:
    """Cross-validated sensitivity to the negative-to-positive ratio.

    Negatives are topped up per ratio from one shared draw stream (so the
    1:5 extras are a prefix of the 1:25 extras), then each training fold is
    capped at the configured budget. Seeds depend only on the fold index,
    keeping runs paired across ratios; 1:1 on a balanced corpus adds
    nothing and reproduces the plain cross-validated baseline.
    """
    ratios = cfg.eval.imbalance_ratios if ratios is None else tuple(ratios)
    model = _pretrained(cfg, corpus, model)
    cache = pipeline.account_cache(model, corpus.graph, corpus.pairs)
    reports: dict[int, EvalReport] = {}
    for ratio in ratios:
        k = parse_ratio(ratio)
        pairs = make_imbalanced(corpus.pairs, k,
                                derive_seed(cfg.seed, "imbalance-extra"))
        labels = np.array([p.label for p in pairs], dtype=np.int64)
        folds = stratified_fold_indices(labels, cfg.eval.n_folds,
                                        derive_seed(cfg.seed, "imbalance-folds"))
        trials = []
        for f, test_idx in enumerate(folds):
            in_test = np.zeros(len(pairs), dtype=bool)
            in_test[test_idx] = True
            train_idx = np.flatnonzero(~in_test)
            train_idx = _budget_indices(
                train_idx, labels, cfg.eval.imbalance_budget,
                rng_for(cfg.seed, "imbalance-budget", f))
            x_tr, y_tr = pipeline.joint_matrix(cache, [pairs[i] for i in train_idx])
            x_te, y_te = pipeline.joint_matrix(cache, [pairs[i] for i in test_idx])
            trials.append(_trial_metrics(
                model, cfg, x_tr, y_tr, x_te, y_te,
                clf_seed=derive_seed(cfg.seed, "imbalance-clf", f),
                ft_seed=derive_seed(cfg.seed, "imbalance-ft", f)))
        reports[k] = EvalReport("imbalance", f"1:{k}", tuple(trials),
                                _snapshot(cfg))
    return reports


# --- maximum mean discrepancy ---------------------------------------------------


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :]
         - 2.0 * x @ y.T)
    return np.maximum(d, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample."""
    z = np.vstack([x, y])
    iu = np.triu_indices(z.shape[0], k=1)
    med = float(np.median(np.sqrt(_pairwise_sq_dists(z, z)[iu])))
    if not np.isfinite(med) or med <= 0.0:
        raise BandwidthError(
            f"median pairwise distance is {med}; supply a bandwidth explicitly")
    return med


def mmd(x, y, kernel: str = "rbf",
        bandwidth: float | str = "median") -> float:
    """Kernel two-sample distance between X and Y rows.

    Uses the unbiased squared-MMD estimator (diagonal-excluded within-set
    kernel sums), clipped at zero before the square root. The RBF kernel is
    exp(-||a - b||^2 / (2 h^2)) with h the median pairwise distance unless
    given.
    """
    if kernel != "rbf":
        raise ValueError(f"unsupported kernel {kernel!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("samples must be 2-D (rows are observations)")
    if x.shape[1] != y.shape[1]:
        raise SchemaError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 samples on each side")
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        h = median_bandwidth(x, y)
    else:
        h = float(bandwidth)
        if not np.isfinite(h) or h <= 0.0:
            raise BandwidthError(f"bandwidth must be positive, got {h}")
    scale = 2.0 * h * h
    kxx = np.exp(-_pairwise_sq_dists(x, x) / scale)
    kyy = np.exp(-_pairwise_sq_dists(y, y) / scale)
    kxy = np.exp(-_pairwise_sq_dists(x, y) / scale)
    # swapping x and y transposes kxy; summing in sorted order keeps
    # mmd(x, y) == mmd(y, x) bit for bit
    cross = float(np.sort(kxy, axis=None).sum()) / (m * n)
    sq = (float(kxx.sum() - np.trace(kxx)) / (m * (m - 1))
          + float(kyy.sum() - np.trace(kyy)) / (n * (n - 1))
          - 2.0 * cross)
    return float(np.sqrt(max(sq, 0.0)))


# --- serialization ----------------------------------------------------------------


def export_embeddings(model: TransferModel, samples, path: str) -> None:
    """CSV of generator outputs: sample_id,domain,label,e_0..e_{d_P-1}.

    ``samples`` rows are (sample_id, domain, label, vector) with vectors in
    the generator's d_P-wide input space (adapter outputs for the source
    domain, fused pair vectors for the target domain).
    """
    rows = list(samples)
    if not rows:
        raise ValueError("nothing to export")
    for sid, domain, _, _ in rows:
        if domain not in ("source", "target"):
            raise SchemaError(f"sample {sid!r}: unknown domain {domain!r}")
    mat = np.stack([np.asarray(vec, dtype=np.float64).ravel()
                    for _, _, _, vec in rows])
    out = model.features(mat)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "domain", "label",
                         *(f"e_{j}" for j in range(out.shape[1]))])
        for (sid, domain, label, _), vec in zip(rows, out):
            writer.writerow([sid, domain, str(int(label)),
                             *(repr(float(v)) for v in vec)])


def report_text(report: EvalReport) -> str:
    """Human-readable summary: means, spreads, per-trial lines, config."""
    lines = [
        f"protocol: {report.protocol}",
        f"setting: {report.setting}",
        f"trials: {len(report.trials)}",
    ]
    for name in METRIC_NAMES:
        lines.append(f"{name}: {report.mean(name):.6f} "
                     f"+/- {report.std(name):.6f}")
    lines.append("per_trial:")
    for i, m in enumerate(report.trials):
        lines.append(
            f"  trial={i} n={m.n} tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn} "
            f"accuracy={m.accuracy:.6f} precision={m.precision:.6f} "
            f"recall={m.recall:.6f} f1={m.f1:.6f}")
    lines.append("config:")
    for key, value in report.config:
        lines.append(f"  {key} = {value}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """Flat per-trial table for plotting tools."""
    digest = dict(report.config).get("config.digest", "")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["protocol", "setting", "trial", "n", "tp", "fp", "tn",
                     "fn", "accuracy", "precision", "recall", "f1",
                     "config_digest"])
    for i, m in enumerate(report.trials):
        writer.writerow([report.protocol, report.setting, i, m.n, m.tp, m.fp,
                         m.tn, m.fn, repr(m.accuracy), repr(m.precision),
                         repr(m.recall), repr(m.f1), digest])
    return buf.getvalue()


def write_report(report: EvalReport, directory: str, stem: str) -> tuple[str, str]:
    txt_path = os.path.join(directory, f"{stem}.txt")
    csv_path = os.path.join(directory, f"{stem}.csv")
    with open(txt_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_text(report))
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(report))
    return txt_path, csv_path
