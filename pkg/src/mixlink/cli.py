"""Command-line orchestration with seeded, file-complete runs.

Every command derives all randomness from ``--seed`` (or the config's
seed), writes only under its ``--out`` directory, and records the config
digest in a run manifest. Exit codes: 0 ok, 2 usage, 3 data error,
4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import baselines, evaluation, pipeline
from .checkpoint import load_checkpoint, save_checkpoint, write_train_log
from .config import RunConfig, config_digest, load_config, save_config
from .errors import (BandwidthError, CapacityError, ClassCoverageError,
                     DivergenceError, IntegrityError, MixlinkError,
                     ParseError, RankError, SchemaError)
from .evaluation import degradation_rate, mmd, run_few_shot, run_imbalance, run_noise
from .pipeline import Corpus
from .transfer import Encoder, fit_adapter_pca

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

_DATA_ERRORS = (ParseError, SchemaError, IntegrityError, CapacityError,
                RankError, ClassCoverageError, BandwidthError,
                FileNotFoundError, NotADirectoryError)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _corpus_for(cfg: RunConfig, args) -> Corpus:
    if getattr(args, "corpus", None):
        return pipeline.load_dir(args.corpus)
    return pipeline.synthesize(cfg)


def _write_manifest(out_dir: str, command: str, entries: dict[str, str],
                    artifacts: list[str]) -> None:
    lines = [f"command: {command}"]
    lines += [f"{key}: {value}" for key, value in entries.items()]
    lines += [f"artifact: {a}" for a in sorted(artifacts)]
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    corpus = pipeline.synthesize(cfg)
    os.makedirs(args.out, exist_ok=True)
    pipeline.write_dir(args.out, corpus)
    save_config(os.path.join(args.out, "run_config.txt"), cfg)
    _write_manifest(args.out, "synth",
                    {"config_digest": config_digest(cfg),
                     "seed": str(cfg.seed)},
                    ["source.csv", "accounts.csv", "edges.csv", "pairs.csv",
                     "run_config.txt"])
    print(f"wrote corpus: {len(corpus.source)} source rows, "
          f"{len(corpus.graph.accounts)} accounts, {len(corpus.pairs)} pairs")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    corpus = _corpus_for(cfg, args)
    model, log = pipeline.pretrain(cfg, corpus)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(ckpt_dir, model, cfg)
    write_train_log(os.path.join(args.out, "train_log.csv"), log)
    _write_manifest(args.out, "pretrain",
                    {"config_digest": config_digest(cfg),
                     "seed": str(cfg.seed),
                     "epochs": str(len(log.epochs))},
                    ["checkpoint", "train_log.csv"])
    if log.epochs:
        last = log.last()
        print(f"pretrained {len(log.epochs)} epochs; final discrepancy "
              f"{last.target_discrepancy:.6f}, source CE {last.source_ce:.6f}")
    else:
        print("pretraining strategy made no updates")
    return EXIT_OK


def _noise_point(eta: float, corpus: Corpus, cfg: RunConfig, model) -> tuple:
    report = run_noise(corpus, cfg, etas=(eta,), model=model)[eta]
    return eta, report


def _imbalance_point(ratio: int, corpus: Corpus, cfg: RunConfig, model) -> tuple:
    report = run_imbalance(corpus, cfg, ratios=(ratio,), model=model)[ratio]
    return ratio, report


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_finetune_eval(args) -> int:
    cfg = _load_cfg(args)
    model, ckpt_cfg = load_checkpoint(args.checkpoint)
    corpus = _corpus_for(cfg, args)
    pipeline.check_widths(cfg, corpus)
    os.makedirs(args.out, exist_ok=True)
    protocol = args.protocol or cfg.eval.protocol
    artifacts: list[str] = []
    summaries: list[str] = []

    if protocol == "few_shot":
        n: int | str = args.n if args.n is not None else cfg.eval.few_shot_n
        report = run_few_shot(corpus, cfg, n=n, model=model)
        paths = evaluation.write_report(report, args.out, f"few_shot_N{n}")
        artifacts += [os.path.basename(p) for p in paths]
        summaries.append(_summary_line(report))
    elif protocol == "noise":
        points = _pmap(functools.partial(_noise_point, corpus=corpus, cfg=cfg,
                                         model=model),
                       list(cfg.eval.noise_rates), args.jobs)
        reference = _noise_reference(args.noise_reference, corpus, cfg, model,
                                     dict(points))
        rows = []
        for eta, report in points:
            paths = evaluation.write_report(report, args.out,
                                            f"noise_eta{eta:g}")
            artifacts += [os.path.basename(p) for p in paths]
            summaries.append(_summary_line(report))
            rows.append((eta, report.mean("f1"), report.std("f1"),
                         degradation_rate(reference, report.mean("f1"))))
        deg_path = os.path.join(args.out, "degradation.csv")
        with open(deg_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eta", "f1_mean", "f1_std", "f1_reference",
                             "degradation_rate", "config_digest"])
            for eta, f1m, f1s, rate in rows:
                writer.writerow([repr(eta), repr(f1m), repr(f1s),
                                 repr(reference), repr(rate),
                                 config_digest(cfg)])
        artifacts.append("degradation.csv")
    elif protocol == "imbalance":
        points = _pmap(functools.partial(_imbalance_point, corpus=corpus,
                                         cfg=cfg, model=model),
                       [int(r) for r in cfg.eval.imbalance_ratios], args.jobs)
        for ratio, report in points:
            paths = evaluation.write_report(report, args.out,
                                            f"imbalance_1to{ratio}")
            artifacts += [os.path.basename(p) for p in paths]
            summaries.append(_summary_line(report))
    else:  # pragma: no cover - argparse choices guard this
        raise SchemaError(f"unknown protocol {protocol!r}")

    _write_manifest(args.out, "finetune-eval",
                    {"config_digest": config_digest(cfg),
                     "checkpoint_digest": config_digest(ckpt_cfg),
                     "seed": str(cfg.seed),
                     "protocol": protocol},
                    artifacts)
    for line in summaries:
        print(line)
    return EXIT_OK


def _summary_line(report) -> str:
    return (f"{report.protocol} {report.setting}: "
            f"f1 {report.mean('f1'):.4f} +/- {report.std('f1'):.4f}, "
            f"accuracy {report.mean('accuracy'):.4f}, "
            f"recall {report.mean('recall'):.4f}")


def _noise_reference(kind: str, corpus: Corpus, cfg: RunConfig, model,
                     reports) -> float:
    """Clean F1 the degradation rates divide by."""
    if kind == "full":
        return run_few_shot(corpus, cfg, n="ALL", model=model).mean("f1")
    # eta5: the 5%-noise row doubles as the reference
    eta = 0.05
    if eta not in reports:
        reports.update(dict([_noise_point(eta, corpus, cfg, model)]))
    return reports[eta].mean("f1")


def _load_matrix(path: str) -> np.ndarray:
    """Numeric CSV, with or without a header row."""
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ParseError(path, lineno, "non-numeric value") from None
    if not rows:
        raise ParseError(path, 1, "no numeric rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise SchemaError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64)


def _pca_reduce(x: np.ndarray, d: int) -> np.ndarray:
    """Project rows onto the top-d principal directions."""
    adapter = fit_adapter_pca(Encoder("identity", x.shape[1], seed=0), x, d)
    return adapter.transform(x)


def cmd_mmd(args) -> int:
    x = _load_matrix(args.x_path)
    y = _load_matrix(args.y_path)
    if x.shape[1] != y.shape[1]:
        if not args.pca_align:
            raise SchemaError(
                f"dimension mismatch {x.shape[1]} vs {y.shape[1]}; "
                "pass --pca-align to project the wider set down")
        if x.shape[1] > y.shape[1]:
            x = _pca_reduce(x, y.shape[1])
        else:
            y = _pca_reduce(y, x.shape[1])
    value = mmd(x, y, kernel=args.kernel, bandwidth=args.bandwidth)
    print(f"{value:.6g}")
    return EXIT_OK


def cmd_baseline_gf(args) -> int:
    corpus = pipeline.load_dir(args.corpus)
    matches = baselines.gas_fingerprint_match(corpus.graph)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "gf_matches.csv")
    baselines.write_matches(out_path, matches)
    positives = [p for p in corpus.pairs if p.label == 1]
    recall = baselines.match_recall(matches, positives) if positives else 0.0
    _write_manifest(args.out, "baseline-gf",
                    {"corpus": args.corpus, "matches": str(len(matches)),
                     "recall": repr(recall)},
                    ["gf_matches.csv"])
    print(f"gas-fingerprint matches: {len(matches)}, "
          f"recall over {len(positives)} planted pairs: {recall:.4f}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    cfg = _load_cfg(args)
    model, _ = load_checkpoint(args.checkpoint)
    corpus = _corpus_for(cfg, args)
    pipeline.check_widths(cfg, corpus)
    os.makedirs(args.out, exist_ok=True)
    rows = pipeline.embedding_rows(model, corpus, max_source=args.max_source)
    out_path = os.path.join(args.out, "embeddings.csv")
    evaluation.export_embeddings(model, rows, out_path)
    _write_manifest(args.out, "export-embeddings",
                    {"config_digest": config_digest(cfg),
                     "seed": str(cfg.seed),
                     "rows": str(len(rows))},
                    ["embeddings.csv"])
    print(f"wrote {len(rows)} embedding rows")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixlink",
        description="Cross-task transfer for mixing-pair association: "
                    "synthesis, pretraining, evaluation, baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True,
                           help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
        p.add_argument("--out", required=True,
                       help="run directory; all outputs land here")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="fit adapter and run transfer "
                                        "pretraining; writes a checkpoint")
    add_common(p)
    p.add_argument("--corpus", help="corpus directory (default: synthesize)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-eval", help="run an evaluation protocol "
                                             "from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus directory (default: synthesize)")
    p.add_argument("--protocol", choices=("few_shot", "noise", "imbalance"),
                   default=None, help="default: the config's eval.protocol")
    p.add_argument("--n", default=None, type=_n_arg,
                   help="few-shot size (integer or ALL)")
    p.add_argument("--noise-reference", choices=("full", "eta5"),
                   default="full",
                   help="clean F1 the degradation rate divides by")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes for independent sweep points")
    p.set_defaults(func=cmd_finetune_eval)

    p = sub.add_parser("mmd", help="kernel two-sample distance between "
                                   "two numeric CSVs")
    p.add_argument("x_path")
    p.add_argument("y_path")
    p.add_argument("--kernel", choices=("rbf",), default="rbf")
    p.add_argument("--bandwidth", default="median", type=_bandwidth_arg,
                   help="'median' or a positive number")
    p.add_argument("--pca-align", action="store_true",
                   help="PCA-project the wider set to the narrower width")
    p.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for interface uniformity")
    p.set_defaults(func=cmd_mmd)

    p = sub.add_parser("baseline-gf", help="gas-fingerprint heuristic "
                                           "over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for interface uniformity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline_gf)

    p = sub.add_parser("export-embeddings", help="CSV of generator outputs "
                                                 "for both domains")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus directory (default: synthesize)")
    p.add_argument("--max-source", type=int, default=None,
                   help="cap on exported source rows")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _n_arg(text: str):
    if text == "ALL":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected an integer or ALL, got {text!r}") from None


def _bandwidth_arg(text: str):
    if text == "median":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'median' or a number, got {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MixlinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
