"""Run configuration: nested dataclasses with a lossless text form.

The file format is one `section.key = value` assignment per line, values
written as Python literals. Writing then parsing reproduces the exact
dataclass tree, so a config digest identifies a run unambiguously.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .data import SynthConfig
from .errors import ParseError, SchemaError


@dataclass(frozen=True)
class ModelConfig:
    """Widths and architectures for every learned component.

    ``d_s``/``d_t`` are the source-table and graph-feature widths the model
    expects; they are checked against the corpus before training. ``d_p`` is
    always ``2 * d_c``: the joint representation concatenates two subgraph
    embeddings, and the adapter projects source encodings into that width.
    """

    d_s: int = 20
    d_t: int = 12
    d_c: int = 8
    gnn_layers: int = 2
    k: int = 2
    cap: int = 256
    encoder: str = "transformer"
    gen_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (64,)
    lam: float = 1.0
    assoc_architecture: str = "mlp"
    assoc_hidden: tuple[int, ...] = (1024, 1024, 1024, 1024)

    def __post_init__(self):
        if self.d_c < 1 or self.d_t < 1 or self.d_s < 1:
            raise SchemaError("widths must be >= 1")
        if 2 * self.d_c > self.d_s:
            raise SchemaError(
                f"d_p = 2*d_c = {2 * self.d_c} must not exceed d_s = {self.d_s}")
        if self.gnn_layers < 1 or self.k < 1 or self.cap < 1:
            raise SchemaError("gnn_layers, k and cap must be >= 1")
        if self.lam < 0:
            raise SchemaError("lam must be >= 0")

    @property
    def d_p(self) -> int:
        return 2 * self.d_c


@dataclass(frozen=True)
class PretrainConfig:
    """Adversarial pretraining schedule and optimizer rates."""

    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    strategy: str = "mcd"
    classifier_steps: int = 1
    generator_steps: int = 1
    with_source_ce: bool = True
    train_adapter: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise SchemaError("epochs must be >= 0 and batch_size >= 1")
        _check_rates(self.lr, self.momentum, self.weight_decay)
        if self.classifier_steps < 0 or self.generator_steps < 0:
            raise SchemaError("step counts must be >= 0")


@dataclass(frozen=True)
class FinetuneConfig:
    """Per-trial classifier training; ``batch_size=None`` means full batch."""

    epochs: int = 300
    batch_size: int | None = None
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise SchemaError("finetune epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1 or None")
        _check_rates(self.lr, self.momentum, self.weight_decay)
        if not 0.0 < self.threshold < 1.0:
            raise SchemaError(f"threshold {self.threshold} outside (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    """Protocol selection and its parameters."""

    protocol: str = "few_shot"
    few_shot_n: int | str = 10
    n_trials: int = 10
    n_folds: int = 10
    noise_rates: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5)
    imbalance_ratios: tuple[int, ...] = (1, 5, 10, 15, 25)
    imbalance_budget: int = 200

    def __post_init__(self):
        if self.n_trials < 1:
            raise SchemaError("n_trials must be >= 1")
        if self.n_folds < 2:
            raise SchemaError("n_folds must be >= 2")
        if isinstance(self.few_shot_n, str) and self.few_shot_n != "ALL":
            raise SchemaError(f"few_shot_n must be an int or 'ALL', "
                              f"got {self.few_shot_n!r}")
        if isinstance(self.few_shot_n, int) and self.few_shot_n < 1:
            raise SchemaError("few_shot_n must be >= 1")
        if any(not 0.0 <= r <= 0.5 for r in self.noise_rates):
            raise SchemaError("noise rates must lie in [0, 0.5]")
        if any(r < 1 for r in self.imbalance_ratios):
            raise SchemaError("imbalance ratios must be >= 1")
        # budget 0 disables the cap; a positive budget must fit both classes
        if self.imbalance_budget != 0 and self.imbalance_budget < 2:
            raise SchemaError("imbalance_budget must be 0 (no cap) or >= 2")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _check_rates(lr: float, momentum: float, weight_decay: float) -> None:
    if lr <= 0:
        raise SchemaError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise SchemaError(f"momentum {momentum} outside [0, 1)")
    if weight_decay < 0:
        raise SchemaError(f"weight decay {weight_decay} must be >= 0")


_SECTIONS: tuple[tuple[str, type | None], ...] = (
    ("run", None),  # scalar RunConfig fields
    ("synth", SynthConfig),
    ("model", ModelConfig),
    ("pretrain", PretrainConfig),
    ("finetune", FinetuneConfig),
    ("eval", EvalConfig),
)


def flat_items(cfg: RunConfig) -> list[tuple[str, str]]:
    """Dotted keys and literal values, in canonical order."""
    items: list[tuple[str, str]] = [("run.seed", repr(cfg.seed))]
    for section, cls in _SECTIONS:
        if cls is None:
            continue
        obj = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            items.append((f"{section}.{f.name}", repr(getattr(obj, f.name))))
    return items


def config_to_text(cfg: RunConfig) -> str:
    lines = ["# mixlink run configuration"]
    current = ""
    for key, value in flat_items(cfg):
        section = key.partition(".")[0]
        if section != current:
            lines.append("")
            current = section
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse the dotted-key format; unknown keys are hard errors."""
    collected: dict[str, dict[str, object]] = {}
    lineno_of: dict[tuple[str, str], int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(source, lineno, "expected 'section.key = value'")
        dotted, _, literal = line.partition("=")
        dotted = dotted.strip()
        section, dot, name = dotted.partition(".")
        if not dot or not section or not name:
            raise ParseError(source, lineno,
                             f"key {dotted!r} is not of the form section.key")
        try:
            value = ast.literal_eval(literal.strip())
        except (ValueError, SyntaxError) as exc:
            raise ParseError(source, lineno, f"bad literal: {exc}") from exc
        if isinstance(value, list):
            value = tuple(value)
        if (section, name) in lineno_of:
            raise ParseError(source, lineno, f"duplicate key {dotted!r}")
        lineno_of[(section, name)] = lineno
        collected.setdefault(section, {})[name] = value

    known = dict(_SECTIONS)
    for section in collected:
        if section not in known:
            first = min(lineno_of[k] for k in lineno_of if k[0] == section)
            raise ParseError(source, first, f"unknown section {section!r}")

    kwargs: dict[str, object] = {}
    run_fields = {"seed"}
    for name, value in collected.get("run", {}).items():
        if name not in run_fields:
            raise ParseError(source, lineno_of[("run", name)],
                             f"unknown key 'run.{name}'")
        kwargs[name] = value
    for section, cls in _SECTIONS:
        if cls is None:
            continue
        given = collected.get(section, {})
        names = {f.name for f in dataclasses.fields(cls)}
        for name in given:
            if name not in names:
                raise ParseError(source, lineno_of[(section, name)],
                                 f"unknown key '{section}.{name}'")
        try:
            kwargs[section] = cls(**given)
        except TypeError as exc:
            raise SchemaError(f"{source}: section [{section}]: {exc}") from exc
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), source=path)


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config_to_text(cfg))


def config_digest(cfg: RunConfig) -> str:
    """16-hex-char identity of the full configuration."""
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]


def desk_config(seed: int = 23) -> RunConfig:
    """Seed-pinned desk-scale run: 50 planted users, 200 decoys.

    Sized so the full protocol battery finishes in minutes on one core.
    The published-scale defaults (4x1024 classifier, 256-node subgraph cap,
    transformer encoder) are trimmed: raw account statistics feed the
    shared space directly, message passing runs one round over nearest
    neighbours, and the heads shrink to match the corpus. The corpus seed
    is pinned separately from the run seed so model init and trial
    resampling can vary without regenerating data; every mechanism is
    otherwise identical to the full-scale profile.
    """
    return RunConfig(
        seed=seed,
        synth=SynthConfig(seed=7, d_s=16, n_source=4000, malicious_frac=0.4,
                          feature_noise=0.4, fingerprint_rate=1.0),
        model=ModelConfig(d_s=16, d_t=12, d_c=8, cap=64,
                          gnn_layers=1, k=1, encoder="identity",
                          gen_hidden=(64, 64), head_hidden=(128,),
                          assoc_hidden=(64, 64)),
        pretrain=PretrainConfig(epochs=50, batch_size=64, lr=1e-3,
                                momentum=0.5, generator_steps=4),
        finetune=FinetuneConfig(epochs=300, lr=5e-3, weight_decay=1e-3),
        eval=EvalConfig(),
    )
