"""Data model, file ingestion, synthetic corpus generation, corpus transforms.

The target domain is a transaction graph around a mixing service: deposit
accounts send fixed denominations into pool addresses, withdrawal accounts
drain them later. Supervision is a list of (deposit, withdrawal) pairs with
binary association labels. The source domain is a flat table of account
feature vectors with benign/malicious labels.

All file formats are plain UTF-8 CSV with a mandatory header row:

* ``accounts.csv``: ``id,role,f_0,...,f_{d_T-1}``
* ``edges.csv``:    ``from,to,amount,timestamp,gas_price``
* ``pairs.csv``:    ``deposit,withdrawal,label[,provenance]``
* ``source.csv``:   ``f_0,...,f_{d_S-1},label`` (or a ``class`` column with
  category names that are merged to a binary label)

Every generator and transform here is a pure function of its inputs and an
integer seed.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import CapacityError, IntegrityError, ParseError, SchemaError
from .seeding import derive_seed, rng_for

ROLES = ("deposit", "withdrawal", "normal")
PROVENANCES = ("ground_truth", "shuffled_negative", "injected_noise")

# number of per-account statistics emitted by the synthetic generator
SYNTH_FEATURE_DIM = 12

# category names treated as malicious when a source file carries a `class`
# column instead of a numeric label (case and separators are normalized
# before lookup; singular/plural variants listed explicitly)
MALICIOUS_CLASSES = frozenset({
    "phishing",
    "gambling",
    "darknet market", "darknet markets",
    "blacklist", "blacklisted address", "blacklisted addresses",
    "money laundering",
    "ponzi", "ponzi scheme", "ponzi schemes",
})


def _normalize_class(name: str) -> str:
    return " ".join(name.strip().lower().replace("-", " ").replace("_", " ").split())


@dataclass
class Account:
    id: str
    role: str
    features: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown account role {self.role!r} for {self.id!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 1:
            raise SchemaError(f"account {self.id!r}: features must be a flat vector")


@dataclass(frozen=True)
class TxEdge:
    from_id: str
    to_id: str
    amount: float
    timestamp: int
    gas_price: int

    def __post_init__(self):
        if self.amount < 0:
            raise SchemaError(f"edge {self.from_id}->{self.to_id}: negative amount")
        if self.gas_price < 0:
            raise SchemaError(f"edge {self.from_id}->{self.to_id}: negative gas price")


class TransactionGraph:
    """Accounts plus transfer edges, with a symmetric adjacency index.

    Transfers are directed in the data but message passing treats the graph
    as undirected, so the index maps each account to the sorted ids of all
    counterparties regardless of direction.
    """

    def __init__(self, accounts: list[Account], edges: list[TxEdge]):
        self.accounts: dict[str, Account] = {}
        dims = set()
        for acct in accounts:
            if acct.id in self.accounts:
                raise IntegrityError(f"duplicate account id {acct.id!r}")
            self.accounts[acct.id] = acct
            dims.add(acct.features.shape[0])
        if len(dims) > 1:
            raise SchemaError(f"inconsistent feature widths: {sorted(dims)}")
        self.edges: list[TxEdge] = list(edges)
        neighbor_sets: dict[str, set[str]] = {aid: set() for aid in self.accounts}
        incident: dict[str, list[int]] = {aid: [] for aid in self.accounts}
        for idx, edge in enumerate(self.edges):
            if edge.from_id == edge.to_id:
                raise IntegrityError(f"self-loop edge on {edge.from_id!r}")
            for endpoint in (edge.from_id, edge.to_id):
                if endpoint not in self.accounts:
                    raise IntegrityError(f"edge endpoint {endpoint!r} not an account")
            neighbor_sets[edge.from_id].add(edge.to_id)
            neighbor_sets[edge.to_id].add(edge.from_id)
            incident[edge.from_id].append(idx)
            incident[edge.to_id].append(idx)
        self._neighbors = {aid: tuple(sorted(s)) for aid, s in neighbor_sets.items()}
        self._incident = incident

    @property
    def feature_dim(self) -> int:
        if not self.accounts:
            return 0
        return next(iter(self.accounts.values())).features.shape[0]

    def account_ids(self) -> tuple[str, ...]:
        return tuple(self.accounts)

    def has_account(self, account_id: str) -> bool:
        return account_id in self.accounts

    def neighbors(self, account_id: str) -> tuple[str, ...]:
        try:
            return self._neighbors[account_id]
        except KeyError:
            raise IntegrityError(f"unknown account {account_id!r}") from None

    def incident_edges(self, account_id: str) -> list[TxEdge]:
        try:
            return [self.edges[i] for i in self._incident[account_id]]
        except KeyError:
            raise IntegrityError(f"unknown account {account_id!r}") from None

    def ids_with_role(self, role: str) -> tuple[str, ...]:
        return tuple(aid for aid, a in self.accounts.items() if a.role == role)


@dataclass(frozen=True)
class SourceSample:
    features: np.ndarray
    label: int


@dataclass
class SourceDataset:
    """Column-stacked source table: one row per account, binary labels."""

    features: np.ndarray  # (n, d_S)
    labels: np.ndarray    # (n,) of {0, 1}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise SchemaError("feature/label row counts differ")
        if not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("source labels must be 0 or 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def stack_source(samples: list[SourceSample]) -> SourceDataset:
    feats = np.stack([s.features for s in samples])
    labels = np.array([s.label for s in samples])
    return SourceDataset(feats, labels)


@dataclass(frozen=True)
class PairSample:
    deposit_id: str
    withdrawal_id: str
    label: int
    provenance: str = "ground_truth"

    def __post_init__(self):
        if self.deposit_id == self.withdrawal_id:
            raise IntegrityError(
                f"pair endpoints must differ, got {self.deposit_id!r} twice")
        if self.label not in (0, 1):
            raise SchemaError(f"pair label must be 0/1, got {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise SchemaError(f"unknown provenance {self.provenance!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.deposit_id, self.withdrawal_id)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted-chain mixer corpus.

    Each of ``n_users`` controls one deposit and one withdrawal account
    whose transactions share latent habits (gas-price base and low-digit
    suffix, active hour, exit delay, pool preference, transaction count).
    Decoys use the same mechanics with independent habits. ``feature_noise``
    scales every per-transaction jitter, so it directly controls how
    separable planted pairs are from shuffled ones.

    ``seed`` pins corpus generation independently of the run seed; ``None``
    reuses the run seed. A pinned corpus can then be replayed under many
    run seeds (model init, batch order, trial resampling) without changing
    a byte of the data.
    """

    n_users: int = 50
    n_decoys: int = 200
    pools: tuple[float, ...] = (0.1, 1.0, 10.0)
    hops: int = 2
    deposits_min: int = 2
    deposits_max: int = 4
    fingerprint_rate: float = 0.8
    feature_noise: float = 1.0
    n_source: int = 2000
    d_s: int = 20
    malicious_frac: float = 0.25
    echo_strength: float = 0.6
    source_noise: float = 0.5
    seed: int | None = None

    def __post_init__(self):
        if self.n_users < 1:
            raise SchemaError("n_users must be >= 1")
        if self.n_decoys < 0:
            raise SchemaError("n_decoys must be >= 0")
        if not self.pools or any(p <= 0 for p in self.pools):
            raise SchemaError("pool denominations must be positive")
        if self.hops < 1:
            raise SchemaError("hops must be >= 1")
        if not (1 <= self.deposits_min <= self.deposits_max):
            raise SchemaError("need 1 <= deposits_min <= deposits_max")
        if self.d_s < 2 or self.d_s % 2:
            raise SchemaError("d_s must be an even integer >= 2")
        # the benign side carries an equally large mirrored mode, so the
        # malicious share cannot exceed half the table
        if not 0.0 < self.malicious_frac <= 0.5:
            raise SchemaError("malicious_frac must lie in (0, 0.5]")
        if self.n_source < 2:
            raise SchemaError("n_source must be >= 2")
        if not 0.0 < self.echo_strength < 1.0:
            raise SchemaError("echo_strength must lie in (0, 1)")
        if self.source_noise <= 0.0:
            raise SchemaError("source_noise must be positive")


# --- file ingestion ---------------------------------------------------------


def _open_rows(path: str):
    if not os.path.exists(path):
        raise ParseError(path, 0, "file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        yield from csv.reader(fh)


def _parse_float(path: str, line: int, text: str, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"non-numeric {what}: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"non-finite {what}: {text!r}")
    return value


def _parse_int(path: str, line: int, text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, line, f"non-integer {what}: {text!r}") from None


def load_source_dataset(path: str, d_s: int) -> list[SourceSample]:
    """Read ``source.csv``: d_s numeric feature columns plus a label.

    The label column is either ``label`` with 0/1 values or ``class`` with
    category names, in which case the known malicious categories map to 1
    and everything else to 0.
    """
    rows = _open_rows(path)
    try:
        header = next(rows)
    except StopIteration:
        raise ParseError(path, 0, "empty file, header row required") from None
    header = [h.strip() for h in header]
    if "class" in header:
        label_col = header.index("class")
        categorical = True
    elif "label" in header:
        label_col = header.index("label")
        categorical = False
    else:
        raise SchemaError(f"{path}: header needs a 'label' or 'class' column")
    feat_cols = [i for i, name in enumerate(header) if i != label_col]
    if len(feat_cols) != d_s:
        raise SchemaError(
            f"{path}: expected {d_s} feature columns, found {len(feat_cols)}")

    samples: list[SourceSample] = []
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
        feats = np.array([
            _parse_float(path, line, row[i], f"feature {header[i]!r}")
            for i in feat_cols
        ])
        if categorical:
            label = int(_normalize_class(row[label_col]) in MALICIOUS_CLASSES)
        else:
            label = _parse_int(path, line, row[label_col], "label")
            if label not in (0, 1):
                raise ParseError(path, line, f"label must be 0/1, got {label}")
        samples.append(SourceSample(feats, label))
    return samples


def source_feature_dim(path: str) -> int:
    """Infer d_S from the header of a source CSV."""
    header = next(_open_rows(path), None)
    if header is None:
        raise ParseError(path, 0, "empty file, header row required")
    return len(header) - 1


def load_accounts(path: str) -> list[Account]:
    rows = _open_rows(path)
    header = next(rows, None)
    if header is None:
        raise ParseError(path, 0, "empty file, header row required")
    if len(header) < 3 or header[0] != "id" or header[1] != "role":
        raise SchemaError(f"{path}: header must start with id,role,f_0,...")
    width = len(header) - 2
    accounts = []
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
        role = row[1].strip()
        if role not in ROLES:
            raise ParseError(path, line, f"unknown role {role!r}")
        feats = np.array([
            _parse_float(path, line, row[2 + j], f"feature f_{j}") for j in range(width)
        ])
        accounts.append(Account(row[0], role, feats))
    return accounts


def load_edges(path: str) -> list[TxEdge]:
    rows = _open_rows(path)
    header = next(rows, None)
    if header is None:
        raise ParseError(path, 0, "empty file, header row required")
    if [h.strip() for h in header] != ["from", "to", "amount", "timestamp", "gas_price"]:
        raise SchemaError(f"{path}: header must be from,to,amount,timestamp,gas_price")
    edges = []
    for line, row in enumerate(rows, start=2):
        if len(row) != 5:
            raise ParseError(path, line, f"expected 5 fields, got {len(row)}")
        amount = _parse_float(path, line, row[2], "amount")
        ts = _parse_int(path, line, row[3], "timestamp")
        gas = _parse_int(path, line, row[4], "gas_price")
        if amount < 0 or gas < 0:
            raise ParseError(path, line, "amount and gas_price must be non-negative")
        edges.append(TxEdge(row[0], row[1], amount, ts, gas))
    return edges


def load_pairs(path: str) -> list[PairSample]:
    rows = _open_rows(path)
    header = next(rows, None)
    if header is None:
        raise ParseError(path, 0, "empty file, header row required")
    names = [h.strip() for h in header]
    if names[:3] != ["deposit", "withdrawal", "label"]:
        raise SchemaError(f"{path}: header must start with deposit,withdrawal,label")
    has_prov = len(names) > 3 and names[3] == "provenance"
    pairs = []
    for line, row in enumerate(rows, start=2):
        if len(row) != len(names):
            raise ParseError(path, line, f"expected {len(names)} fields, got {len(row)}")
        label = _parse_int(path, line, row[2], "label")
        if label not in (0, 1):
            raise ParseError(path, line, f"label must be 0/1, got {label}")
        if has_prov:
            prov = row[3].strip()
        else:
            prov = "ground_truth" if label == 1 else "shuffled_negative"
        if prov not in PROVENANCES:
            raise ParseError(path, line, f"unknown provenance {prov!r}")
        pairs.append(PairSample(row[0], row[1], label, prov))
    return pairs


def load_target_graph_and_pairs(graph_path: str,
                                pairs_path: str) -> tuple[TransactionGraph, list[PairSample]]:
    """Load a graph directory (accounts.csv + edges.csv) and its pair labels.

    Every pair endpoint must resolve to a graph account.
    """
    accounts = load_accounts(os.path.join(graph_path, "accounts.csv"))
    edges = load_edges(os.path.join(graph_path, "edges.csv"))
    graph = TransactionGraph(accounts, edges)
    pairs = load_pairs(pairs_path)
    for pair in pairs:
        for endpoint in (pair.deposit_id, pair.withdrawal_id):
            if not graph.has_account(endpoint):
                raise IntegrityError(
                    f"pair endpoint {endpoint!r} missing from the graph")
    return graph, pairs


# --- corpus writing ---------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def write_source(path: str, source: SourceDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f_{j}" for j in range(source.dim)] + ["label"])
        for feats, label in zip(source.features, source.labels):
            writer.writerow([_fmt(v) for v in feats] + [str(int(label))])


def write_graph(dir_path: str, graph: TransactionGraph) -> None:
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "accounts.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "role"] + [f"f_{j}" for j in range(graph.feature_dim)])
        for acct in graph.accounts.values():
            writer.writerow([acct.id, acct.role] + [_fmt(v) for v in acct.features])
    with open(os.path.join(dir_path, "edges.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "amount", "timestamp", "gas_price"])
        for e in graph.edges:
            writer.writerow([e.from_id, e.to_id, _fmt(e.amount),
                             str(e.timestamp), str(e.gas_price)])


def write_pairs(path: str, pairs: list[PairSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["deposit", "withdrawal", "label", "provenance"])
        for p in pairs:
            writer.writerow([p.deposit_id, p.withdrawal_id, str(p.label), p.provenance])


def write_corpus(dir_path: str, source: SourceDataset, graph: TransactionGraph,
                 pairs: list[PairSample]) -> None:
    """Write source.csv, accounts.csv, edges.csv and pairs.csv into a directory."""
    os.makedirs(dir_path, exist_ok=True)
    write_source(os.path.join(dir_path, "source.csv"), source)
    write_graph(dir_path, graph)
    write_pairs(os.path.join(dir_path, "pairs.csv"), pairs)


def load_corpus(dir_path: str) -> tuple[SourceDataset, TransactionGraph, list[PairSample]]:
    """Inverse of :func:`write_corpus`."""
    source_path = os.path.join(dir_path, "source.csv")
    d_s = source_feature_dim(source_path)
    source = stack_source(load_source_dataset(source_path, d_s))
    graph, pairs = load_target_graph_and_pairs(dir_path,
                                               os.path.join(dir_path, "pairs.csv"))
    return source, graph, pairs


# --- synthetic corpus -------------------------------------------------------

EPOCH = 1_600_000_000          # fixed base timestamp for generated activity
WEI_PER_GWEI = 10 ** 9
RELAYER_FEE = 0.003
RAMP_MARGIN = 1.3              # eigen-gap between the two source feature blocks


@dataclass
class _Habit:
    """Latent behavior profile shared by the two accounts of one user."""

    gwei_base: int
    suffix: int          # reused low 9 digits of gas price; 0 means "none"
    active_hour: float
    delay_hours: float
    pool: float
    n_tx: int


def _draw_habit(rng: np.random.Generator, cfg: SynthConfig,
                fingerprinted: bool) -> _Habit:
    suffix = int(rng.integers(1, WEI_PER_GWEI)) if fingerprinted else 0
    return _Habit(
        gwei_base=int(rng.integers(20, 201)),
        suffix=suffix,
        active_hour=float(rng.uniform(0.0, 24.0)),
        delay_hours=float(rng.lognormal(mean=1.0, sigma=0.6)),
        pool=float(cfg.pools[int(rng.integers(len(cfg.pools)))]),
        n_tx=int(rng.integers(cfg.deposits_min, cfg.deposits_max + 1)),
    )


def _habit_timestamp(rng: np.random.Generator, habit: _Habit, noise: float) -> int:
    day = int(rng.integers(0, 30))
    hour = (habit.active_hour + rng.normal(0.0, 1.5 * noise)) % 24.0
    return EPOCH + day * 86_400 + int(hour * 3600)


def _habit_gas(rng: np.random.Generator, habit: _Habit, noise: float) -> int:
    gwei = habit.gwei_base + int(round(rng.normal(0.0, 3.0 * noise)))
    gwei = max(gwei, 1)
    if habit.suffix:
        suffix = habit.suffix
    else:
        # unfingerprinted senders round to whole gwei half the time
        suffix = 0 if rng.random() < 0.5 else int(rng.integers(0, WEI_PER_GWEI))
    return gwei * WEI_PER_GWEI + suffix


def _edge_statistics(edges_in: list[TxEdge], edges_out: list[TxEdge]) -> np.ndarray:
    """Per-account feature vector derived purely from incident edges."""
    both = edges_in + edges_out
    feats = np.zeros(SYNTH_FEATURE_DIM)
    feats[0] = math.log1p(len(edges_out))
    feats[1] = math.log1p(len(edges_in))
    feats[2] = math.log1p(sum(e.amount for e in edges_out))
    feats[3] = math.log1p(sum(e.amount for e in edges_in))
    if both:
        log_amt = np.log1p([e.amount for e in both])
        gas = np.array([e.gas_price for e in both], dtype=np.float64)
        hours = np.array([(e.timestamp % 86_400) / 3600.0 for e in both])
        feats[4] = log_amt.mean()
        feats[5] = log_amt.std()
        feats[6] = gas.mean() / WEI_PER_GWEI / 100.0
        feats[7] = gas.std() / WEI_PER_GWEI / 100.0
        feats[8] = float(np.mean(gas % WEI_PER_GWEI)) / WEI_PER_GWEI
        feats[9] = float(np.sin(2 * np.pi * hours / 24.0).mean())
        feats[10] = float(np.cos(2 * np.pi * hours / 24.0).mean())
    if len(both) >= 2:
        ts = np.sort([e.timestamp for e in both])
        feats[11] = math.log1p(float(np.diff(ts).mean()) / 3600.0)
    return feats


def _emit_user_edges(rng: np.random.Generator, cfg: SynthConfig, habit: _Habit,
                     dep_id: str, wdr_id: str, pool_id: str) -> list[TxEdge]:
    edges = []
    for _ in range(habit.n_tx):
        t_dep = _habit_timestamp(rng, habit, cfg.feature_noise)
        edges.append(TxEdge(dep_id, pool_id, habit.pool, t_dep,
                            _habit_gas(rng, habit, cfg.feature_noise)))
        delay = habit.delay_hours * float(rng.lognormal(0.0, 0.3 * cfg.feature_noise))
        t_wdr = t_dep + max(int(delay * 3600), 60)
        edges.append(TxEdge(pool_id, wdr_id, habit.pool * (1 - RELAYER_FEE), t_wdr,
                            _habit_gas(rng, habit, cfg.feature_noise)))
    return edges


def generate_synthetic_corpus(cfg: SynthConfig,
                              seed: int) -> tuple[SourceDataset, TransactionGraph,
                                                  list[PairSample]]:
    """Build a deterministic desk-scale corpus with planted ground truth.

    Targets: ``n_users`` deposit/withdrawal account pairs route fixed pool
    denominations through shared pool addresses; both sides of a pair reuse
    one latent habit, so their edge-derived feature vectors correlate.
    Decoys repeat the mechanics with habits of their own.

    Source: a three-mode Gaussian mixture over ``d_s`` dims split into two
    blocks. Malicious rows echo the first block into the second
    (``b = echo_strength * a + noise``); an equally large benign mode
    mirrors them with the opposite sign, and the remaining benign rows are
    independent at matched per-dim variance. The mirrored mode cancels the
    echo's cross-block covariance, so no single projection separates the
    classes and the labels hinge on the same two-sided consistency the
    pair task must detect. A geometric variance ramp across each block
    keeps the principal axes aligned with the block pairing: every
    first-block variance sits above every second-block one, so a
    variance-ordered basis cannot interleave them.
    """
    # source table
    half = cfg.d_s // 2
    n_mal = min(max(1, round(cfg.n_source * cfg.malicious_frac)), cfg.n_source // 2)
    n_iso = cfg.n_source - 2 * n_mal
    src_rng = rng_for(seed, "synth", "source")
    ratio = (1 + cfg.source_noise ** 2) * cfg.echo_strength ** 2
    scale = np.sqrt(np.geomspace(1.0, min(RAMP_MARGIN * ratio, 0.9), half))
    noise = cfg.source_noise * cfg.echo_strength * scale
    iso_scale = np.sqrt((cfg.echo_strength * scale) ** 2 + noise ** 2)

    def mode(m: int, slope: float) -> np.ndarray:
        a = src_rng.normal(size=(m, half)) * scale
        if slope == 0.0:
            b = src_rng.normal(size=(m, half)) * iso_scale
        else:
            b = slope * cfg.echo_strength * a + src_rng.normal(size=(m, half)) * noise
        return np.hstack([a, b])

    rows = np.vstack([mode(n_iso, 0.0), mode(n_mal, -1.0), mode(n_mal, +1.0)])
    labels = np.concatenate([np.zeros(n_iso + n_mal), np.ones(n_mal)])
    order = src_rng.permutation(cfg.n_source)
    source = SourceDataset(rows[order], labels[order])

    # target graph: pools, relays, planted users, decoys
    pool_ids = {p: f"pool_{p:g}" for p in cfg.pools}
    edges: list[TxEdge] = []
    roles: dict[str, str] = {pid: "normal" for pid in pool_ids.values()}

    relay_rng = rng_for(seed, "synth", "relays")
    relay_ids = [f"relay{j}" for j in range(cfg.hops)]
    for rid in relay_ids:
        roles[rid] = "normal"
    for j in range(cfg.hops - 1):
        edges.append(TxEdge(relay_ids[j], relay_ids[j + 1], 0.0,
                            EPOCH + j, int(relay_rng.integers(1, 100)) * WEI_PER_GWEI))
    for pid in pool_ids.values():
        edges.append(TxEdge(relay_ids[0], pid, 0.0, EPOCH,
                            int(relay_rng.integers(1, 100)) * WEI_PER_GWEI))

    positives: list[PairSample] = []
    for i in range(cfg.n_users):
        user_rng = rng_for(seed, "synth", "user", i)
        habit = _draw_habit(user_rng, cfg, user_rng.random() < cfg.fingerprint_rate)
        dep_id, wdr_id = f"dep{i:04d}", f"wdr{i:04d}"
        roles[dep_id], roles[wdr_id] = "deposit", "withdrawal"
        edges.extend(_emit_user_edges(user_rng, cfg, habit, dep_id, wdr_id,
                                      pool_ids[habit.pool]))
        positives.append(PairSample(dep_id, wdr_id, 1, "ground_truth"))

    for i in range(cfg.n_decoys):
        decoy_rng = rng_for(seed, "synth", "decoy", i)
        habit = _draw_habit(decoy_rng, cfg, fingerprinted=False)
        decoy_id = f"dec{i:04d}"
        pid = pool_ids[habit.pool]
        # alternate decoy direction so both roles have unplanted members
        if i % 2 == 0:
            roles[decoy_id] = "deposit"
            for _ in range(habit.n_tx):
                edges.append(TxEdge(decoy_id, pid, habit.pool,
                                    _habit_timestamp(decoy_rng, habit, cfg.feature_noise),
                                    _habit_gas(decoy_rng, habit, cfg.feature_noise)))
        else:
            roles[decoy_id] = "withdrawal"
            for _ in range(habit.n_tx):
                edges.append(TxEdge(pid, decoy_id, habit.pool * (1 - RELAYER_FEE),
                                    _habit_timestamp(decoy_rng, habit, cfg.feature_noise),
                                    _habit_gas(decoy_rng, habit, cfg.feature_noise)))

    edges_in: dict[str, list[TxEdge]] = {aid: [] for aid in roles}
    edges_out: dict[str, list[TxEdge]] = {aid: [] for aid in roles}
    for e in edges:
        edges_out[e.from_id].append(e)
        edges_in[e.to_id].append(e)
    accounts = [Account(aid, role, _edge_statistics(edges_in[aid], edges_out[aid]))
                for aid, role in roles.items()]
    graph = TransactionGraph(accounts, edges)

    pairs = list(positives)
    if len(positives) >= 2:
        pairs += make_unassociated_negatives(
            positives, 1, derive_seed(seed, "synth", "negatives"))
    return source, graph, pairs


# --- corpus transforms ------------------------------------------------------


def _sample_negatives(positives: list[PairSample], count: int, seed: int,
                      exclude: frozenset[tuple[str, str]] = frozenset()) -> list[PairSample]:
    """Draw ``count`` distinct cross-pairings that are not positives.

    Candidates pair the deposit of one positive with the withdrawal of a
    different one. Small candidate spaces are enumerated and permuted;
    large ones use seeded rejection sampling.
    """
    if count == 0:
        return []
    n = len(positives)
    if n < 2:
        raise CapacityError("need at least 2 positives to build shuffled negatives")
    forbidden = {p.key for p in positives} | set(exclude)
    rng = rng_for(seed, "shuffled-negatives")
    out: list[PairSample] = []
    if n * (n - 1) <= 2_000_000:
        candidates = [
            (positives[i].deposit_id, positives[j].withdrawal_id)
            for i in range(n) for j in range(n) if i != j
        ]
        candidates = [c for c in candidates if c not in forbidden and c[0] != c[1]]
        # dedupe while preserving order (duplicate endpoints can recur)
        candidates = list(dict.fromkeys(candidates))
        if count > len(candidates):
            raise CapacityError(
                f"requested {count} negatives but only {len(candidates)} distinct "
                "shuffles exist")
        order = rng.permutation(len(candidates))[:count]
        for idx in order:
            d, w = candidates[int(idx)]
            out.append(PairSample(d, w, 0, "shuffled_negative"))
        return out
    seen: set[tuple[str, str]] = set()
    attempts = 0
    limit = 200 * count
    while len(out) < count:
        attempts += 1
        if attempts > limit:
            raise CapacityError(
                f"rejection sampling could not find {count} distinct negatives")
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        key = (positives[int(i)].deposit_id, positives[int(j)].withdrawal_id)
        if key in forbidden or key in seen or key[0] == key[1]:
            continue
        seen.add(key)
        out.append(PairSample(key[0], key[1], 0, "shuffled_negative"))
    return out


def make_unassociated_negatives(positives: list[PairSample], ratio: int,
                                seed: int) -> list[PairSample]:
    """Emit ratio x |positives| shuffled negatives, never reproducing a positive."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if any(p.label != 1 for p in positives):
        raise ValueError("make_unassociated_negatives expects positive pairs only")
    return _sample_negatives(positives, ratio * len(positives), seed)


def inject_label_noise(train: list[PairSample], eta: float,
                       seed: int) -> list[PairSample]:
    """Append ceil(eta * P) pseudo-positive pairs with unassociated endpoints.

    Existing samples are never relabeled or removed; injected pairs carry
    provenance ``injected_noise`` and label 1 despite being false matches.
    """
    if not 0.0 <= eta <= 0.5:
        raise ValueError(f"eta must lie in [0, 0.5], got {eta}")
    positives = [p for p in train if p.label == 1]
    n_inject = math.ceil(eta * len(positives))
    if n_inject == 0:
        return list(train)
    existing = frozenset(p.key for p in train)
    fakes = _sample_negatives(positives, n_inject, seed, exclude=existing)
    noisy = [replace(f, label=1, provenance="injected_noise") for f in fakes]
    return list(train) + noisy


def subsample_few_shot(pairs: list[PairSample], n: int,
                       trial_seed: int) -> tuple[list[PairSample], list[PairSample]]:
    """Split into a balanced n-positive/n-negative train set and the rest."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pos_idx = [i for i, p in enumerate(pairs) if p.label == 1]
    neg_idx = [i for i, p in enumerate(pairs) if p.label == 0]
    if len(pos_idx) < n or len(neg_idx) < n:
        raise CapacityError(
            f"need {n} positives and {n} negatives, have "
            f"{len(pos_idx)}/{len(neg_idx)}")
    rng = rng_for(trial_seed, "few-shot")
    chosen = set(rng.choice(pos_idx, size=n, replace=False).tolist())
    chosen |= set(rng.choice(neg_idx, size=n, replace=False).tolist())
    train = [pairs[i] for i in sorted(chosen)]
    test = [p for i, p in enumerate(pairs) if i not in chosen]
    return train, test


def parse_ratio(ratio: str | int) -> int:
    """Accept '1:k' strings or bare integers k."""
    if isinstance(ratio, int):
        k = ratio
    else:
        text = ratio.strip()
        if ":" in text:
            left, _, right = text.partition(":")
            if left.strip() != "1":
                raise ValueError(f"imbalance ratio must be 1:k, got {ratio!r}")
            k = int(right)
        else:
            k = int(text)
    if k < 1:
        raise ValueError(f"imbalance ratio must be >= 1, got {ratio!r}")
    return k


def make_imbalanced(pairs: list[PairSample], ratio: str | int,
                    seed: int) -> list[PairSample]:
    """Top up shuffled negatives until there are k per positive.

    Existing pairs (including existing negatives) are kept verbatim; only
    the shortfall is sampled. A corpus already holding more than k
    negatives per positive cannot be thinned here.
    """
    k = parse_ratio(ratio)
    positives = [p for p in pairs if p.label == 1]
    negatives = [p for p in pairs if p.label == 0]
    target = k * len(positives)
    if len(negatives) > target:
        raise CapacityError(
            f"corpus already has {len(negatives)} negatives, more than the "
            f"requested {target}; cannot thin")
    shortfall = target - len(negatives)
    existing = frozenset(p.key for p in pairs)
    extra = _sample_negatives(positives, shortfall, seed, exclude=existing)
    return list(pairs) + extra
