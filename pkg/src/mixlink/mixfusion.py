"""Joint pair representations from k-hop subgraphs.

Each candidate account is expanded into its k-hop neighborhood, encoded
with an L-layer message-passing network (self-inclusive neighbor
aggregation, linear map, relu), and the two resulting embeddings are
concatenated deposit-first into one joint vector.

Aggregation is implemented over neighbor lists; tests cross-check it
against a dense normalized-adjacency matrix-power oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TransactionGraph
from .errors import IntegrityError
from .seeding import rng_for

AGGREGATIONS = ("mean", "sum")
READOUTS = ("center", "mean")


@dataclass(frozen=True)
class Subgraph:
    """Local neighborhood with the center at index 0.

    ``adjacency`` holds sorted local neighbor indices per node and must be
    symmetric; transfers are treated as undirected for message passing.
    """

    center_id: str
    node_ids: tuple[str, ...]
    adjacency: tuple[tuple[int, ...], ...]
    features: np.ndarray  # |V| x d_T

    def __post_init__(self):
        n = len(self.node_ids)
        if n == 0 or self.node_ids[0] != self.center_id:
            raise IntegrityError("subgraph center must sit at index 0")
        if len(self.adjacency) != n or self.features.shape[0] != n:
            raise IntegrityError("adjacency/features size must match node count")
        for i, nbrs in enumerate(self.adjacency):
            for j in nbrs:
                if not 0 <= j < n:
                    raise IntegrityError(f"local index {j} out of range")
                if i == j:
                    raise IntegrityError(f"self-loop at local index {i}")
                if i not in self.adjacency[j]:
                    raise IntegrityError("adjacency must be symmetric")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class GnnParams:
    """Stacked layer weights plus aggregation/readout behavior.

    Weight l maps width d_l to d_{l+1}; the chain runs from the account
    feature width d_T down to the embedding width d_C. Biases default to
    absent. Immutable after construction; encoding is read-only.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...] | None = None
    aggregation: str = "mean"
    readout: str = "center"

    def __post_init__(self):
        if not self.weights:
            raise ValueError("need at least one layer")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer widths break the chain: {a.shape} -> {b.shape}")
        if self.biases is not None:
            if len(self.biases) != len(self.weights):
                raise ValueError("need one bias per layer when biases are present")
            for w, b in zip(self.weights, self.biases):
                if b.shape != (w.shape[1],):
                    raise ValueError(f"bias shape {b.shape} mismatches layer {w.shape}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {f"w{l}": w for l, w in enumerate(self.weights)}
        if self.biases is not None:
            out.update({f"b{l}": b for l, b in enumerate(self.biases)})
        return out


def init_gnn_params(d_in: int, d_out: int, n_layers: int,
                    rng: np.random.Generator, hidden: int | None = None,
                    bias: bool = False, aggregation: str = "mean",
                    readout: str = "center") -> GnnParams:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    width = hidden if hidden is not None else d_out
    dims = [d_in] + [width] * (n_layers - 1) + [d_out]
    weights = tuple(
        rng.normal(0.0, np.sqrt(2.0 / dims[l]), size=(dims[l], dims[l + 1]))
        for l in range(n_layers))
    biases = tuple(np.zeros(dims[l + 1]) for l in range(n_layers)) if bias else None
    return GnnParams(weights, biases, aggregation, readout)


def sample_k_hop(graph: TransactionGraph, center: str, k: int, cap: int,
                 seed: int = 0) -> Subgraph:
    """Breadth-first closure to depth k, truncated per frontier at cap nodes.

    When a frontier would push the node count past ``cap``, the new
    candidates are subsampled with a generator derived from (seed, center,
    depth), so repeated calls agree exactly.
    """
    if not graph.has_account(center):
        raise IntegrityError(f"unknown center account {center!r}")
    if k < 0:
        raise ValueError("k must be >= 0")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    order = [center]
    visited = {center}
    frontier = [center]
    for depth in range(1, k + 1):
        budget = cap - len(order)
        if budget <= 0 or not frontier:
            break
        candidates: list[str] = []
        seen: set[str] = set()
        for node in frontier:
            for nbr in graph.neighbors(node):
                if nbr not in visited and nbr not in seen:
                    seen.add(nbr)
                    candidates.append(nbr)
        candidates.sort()
        if len(candidates) > budget:
            rng = rng_for(seed, "k-hop", center, depth)
            picked = rng.choice(len(candidates), size=budget, replace=False)
            candidates = [candidates[int(i)] for i in np.sort(picked)]
        order.extend(candidates)
        visited.update(candidates)
        frontier = candidates
    index = {node: i for i, node in enumerate(order)}
    adjacency = tuple(
        tuple(sorted(index[nbr] for nbr in graph.neighbors(node) if nbr in index))
        for node in order)
    features = np.stack([graph.accounts[node].features for node in order])
    return Subgraph(center, tuple(order), adjacency, features)


def _neighbor_index_arrays(sub: Subgraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = [], []
    for i, nbrs in enumerate(sub.adjacency):
        rows.extend([i] * len(nbrs))
        cols.extend(nbrs)
    counts = 1.0 + np.array([len(nbrs) for nbrs in sub.adjacency], dtype=np.float64)
    return np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp), counts


def _aggregate(h: np.ndarray, rows: np.ndarray, cols: np.ndarray,
               counts: np.ndarray, aggregation: str) -> np.ndarray:
    agg = h.copy()
    np.add.at(agg, rows, h[cols])
    if aggregation == "mean":
        agg /= counts[:, None]
    return agg


def _aggregate_backward(dagg: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                        counts: np.ndarray, aggregation: str) -> np.ndarray:
    if aggregation == "mean":
        dagg = dagg / counts[:, None]
    dh = dagg.copy()
    np.add.at(dh, cols, dagg[rows])
    return dh


def _forward(sub: Subgraph, params: GnnParams):
    if sub.features.shape[1] != params.d_in:
        raise ValueError(
            f"subgraph features have width {sub.features.shape[1]}, "
            f"layer 0 expects {params.d_in}")
    rows, cols, counts = _neighbor_index_arrays(sub)
    h = sub.features
    hiddens = [h]
    aggregates = []
    pre_acts = []
    for l, w in enumerate(params.weights):
        agg = _aggregate(h, rows, cols, counts, params.aggregation)
        z = agg @ w
        if params.biases is not None:
            z = z + params.biases[l]
        h = np.maximum(z, 0.0)
        aggregates.append(agg)
        pre_acts.append(z)
        hiddens.append(h)
    return hiddens, aggregates, pre_acts, (rows, cols, counts)


def gnn_encode(sub: Subgraph, params: GnnParams) -> np.ndarray:
    """Encode a subgraph into a d_C vector (center readout by default)."""
    hiddens, _, _, _ = _forward(sub, params)
    final = hiddens[-1]
    if params.readout == "center":
        return final[0].copy()
    return final.mean(axis=0)


def gnn_encode_backward(sub: Subgraph, params: GnnParams,
                        dout: np.ndarray) -> tuple[list[np.ndarray],
                                                   list[np.ndarray] | None,
                                                   np.ndarray]:
    """Gradients of a scalar loss w.r.t. weights, biases and node features.

    ``dout`` is the loss gradient at the readout vector.
    """
    hiddens, aggregates, pre_acts, (rows, cols, counts) = _forward(sub, params)
    n = sub.n_nodes
    dh = np.zeros_like(hiddens[-1])
    if params.readout == "center":
        dh[0] = dout
    else:
        dh += dout[None, :] / n
    dweights: list[np.ndarray] = [np.zeros_like(w) for w in params.weights]
    dbiases = ([np.zeros_like(b) for b in params.biases]
               if params.biases is not None else None)
    for l in reversed(range(params.n_layers)):
        dz = dh * (pre_acts[l] > 0)
        dweights[l] += aggregates[l].T @ dz
        if dbiases is not None:
            dbiases[l] += dz.sum(axis=0)
        dagg = dz @ params.weights[l].T
        dh = _aggregate_backward(dagg, rows, cols, counts, params.aggregation)
    return dweights, dbiases, dh


@dataclass(frozen=True)
class JointRepresentation:
    """Concatenated pair embedding, deposit half first."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] % 2:
            raise ValueError(f"joint vector must be flat with even length, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("joint vector contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def d_c(self) -> int:
        return self.values.shape[0] // 2


def fuse(h_a: np.ndarray, h_b: np.ndarray) -> JointRepresentation:
    """Concatenate deposit embedding h_a and withdrawal embedding h_b."""
    a = np.asarray(h_a, dtype=np.float64)
    b = np.asarray(h_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embeddings must be equal-length vectors, got "
                         f"{a.shape} and {b.shape}")
    return JointRepresentation(np.concatenate([a, b]))


def split(joint: JointRepresentation) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`fuse`."""
    d = joint.d_c
    return joint.values[:d].copy(), joint.values[d:].copy()
