"""Cross-task transfer: encoder, adapter, generator, dual classifiers.

The source domain supplies labeled account vectors u. A fixed encoder E
maps them to the same width, an adapter projects them into the joint-pair
space via T(u) = U^T (E(u) - mu_S), and a trainable generator F feeds two
classifiers C1/C2. Training alternates two steps per batch:

  A. update C1, C2 to maximize their prediction discrepancy on unlabeled
     target joints (by default while also minimizing source cross-entropy,
     which keeps the classifiers anchored; a pure-discrepancy variant is
     available);
  B. update F (and optionally U) to minimize discrepancy plus
     lambda-weighted source cross-entropy.

The encoder is never gradient-trained; only F, C1, C2 and optionally U
move. Everything is float64 and deterministic under the supplied seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import SourceDataset
from .errors import DivergenceError, RankError
from .mixfusion import (GnnParams, JointRepresentation, fuse, gnn_encode,
                        init_gnn_params, sample_k_hop)
from .seeding import rng_for

ENCODER_ARCHITECTURES = ("transformer", "mlp", "identity")


def _pick_heads(d_model: int) -> int:
    for h in (4, 2, 1):
        if d_model % h == 0:
            return h
    return 1


class Encoder:
    """Fixed feature encoder E: width-preserving, never gradient-trained.

    ``transformer`` treats each account vector as a length-1 token sequence
    through stacked self-attention blocks; ``mlp`` is a plain relu net;
    ``identity`` passes inputs through untouched (width checks only), which
    makes affine properties of the adapter exactly testable. Both learned
    variants end in a linear + frozen-batchnorm + relu head whose statistics
    are pinned once via :meth:`calibrate`.
    """

    def __init__(self, architecture: str, d_s: int, seed: int,
                 n_layers: int = 3, n_heads: int | None = None):
        if architecture not in ENCODER_ARCHITECTURES:
            raise ValueError(f"unknown encoder architecture {architecture!r}")
        self.architecture = architecture
        self.d_s = d_s
        rng = rng_for(seed, "encoder", architecture)
        if architecture == "identity":
            self.chain = nn.Chain([])
            return
        if architecture == "transformer":
            heads = n_heads if n_heads is not None else _pick_heads(d_s)
            if d_s % heads != 0:
                raise ValueError(f"d_s {d_s} not divisible by n_heads {heads}")
            body = nn.transformer_stack(d_s, n_layers, heads, 4 * d_s, rng)
        else:
            body = nn.mlp([d_s, 2 * d_s, d_s], rng)
        self.chain = nn.Chain([
            ("body", body),
            ("head_lin", nn.Linear(d_s, d_s, rng)),
            ("head_bn", nn.FrozenBatchNorm(d_s)),
            ("head_act", nn.Relu()),
        ])

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.d_s:
            raise ValueError(f"expected width {self.d_s}, got {x.shape[1]}")
        out = self.chain.forward(x, train=False)
        return out[0] if squeeze else out

    def calibrate(self, x: np.ndarray) -> None:
        """Pin the head batchnorm statistics to a reference dataset."""
        h = np.asarray(x, dtype=np.float64)
        for _, layer in self.chain.named_layers:
            if isinstance(layer, nn.FrozenBatchNorm):
                layer.calibrate(h)
            h = layer.forward(h, train=False)

    def params(self) -> dict[str, np.ndarray]:
        return self.chain.params()


@dataclass
class Adapter:
    """Mean-centering projection T(u) = U^T (E(u) - mu_S)."""

    mu_s: np.ndarray
    u: np.ndarray  # d_S x d_P

    def __post_init__(self):
        self.mu_s = np.asarray(self.mu_s, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.mu_s.ndim != 1 or self.u.ndim != 2:
            raise ValueError("mu_s must be a vector and u a matrix")
        if self.u.shape[0] != self.mu_s.shape[0]:
            raise ValueError(f"u rows {self.u.shape[0]} != mu_s width "
                             f"{self.mu_s.shape[0]}")
        if self.u.shape[1] > self.u.shape[0]:
            raise ValueError("projection cannot widen: d_P must be <= d_S")

    @property
    def d_s(self) -> int:
        return self.u.shape[0]

    @property
    def d_p(self) -> int:
        return self.u.shape[1]

    def transform(self, encoded: np.ndarray) -> np.ndarray:
        encoded = np.asarray(encoded, dtype=np.float64)
        if encoded.shape[-1] != self.d_s:
            raise ValueError(f"expected width {self.d_s}, got {encoded.shape[-1]}")
        return (encoded - self.mu_s) @ self.u


def compute_source_mean(encoder: Encoder, source: SourceDataset | np.ndarray) -> np.ndarray:
    """Arithmetic mean of E(u) over the source samples."""
    feats = source.features if isinstance(source, SourceDataset) else np.asarray(source)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("need a non-empty (n, d_S) sample matrix")
    return encoder.encode(feats).mean(axis=0)


def fit_adapter_pca(encoder: Encoder, source: SourceDataset | np.ndarray,
                    d_p: int) -> Adapter:
    """PCA-fit the adapter on encoder outputs.

    U holds the top-d_P principal directions of the centered encodings in
    descending eigenvalue order, each column sign-fixed so its
    largest-magnitude entry is positive.
    """
    feats = source.features if isinstance(source, SourceDataset) else np.asarray(source)
    if d_p < 1:
        raise ValueError("d_p must be >= 1")
    if d_p > feats.shape[1]:
        raise ValueError(f"d_p {d_p} exceeds source width {feats.shape[1]}")
    if feats.shape[0] < d_p:
        raise ValueError(f"need at least {d_p} samples, have {feats.shape[0]}")
    encoded = encoder.encode(feats)
    mu = encoded.mean(axis=0)
    centered = encoded - mu
    cov = centered.T @ centered / max(encoded.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    rank = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-10))
    if rank < d_p:
        raise RankError(requested=d_p, achieved=rank)
    u = eigvecs[:, :d_p].copy()
    # deterministic orientation: largest-magnitude entry of each column > 0
    for j in range(d_p):
        pivot = np.argmax(np.abs(u[:, j]))
        if u[pivot, j] < 0:
            u[:, j] = -u[:, j]
    return Adapter(mu, u)


def adapt(adapter: Adapter, encoder: Encoder, u: np.ndarray) -> np.ndarray:
    """T(u) = U^T (E(u) - mu_S) for a single vector or a batch."""
    return adapter.transform(encoder.encode(u))


def discrepancy(p1: np.ndarray, p2: np.ndarray) -> float:
    """Mean L1 distance between probability vectors (batched or single)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    for p in (p1, p2):
        if p.min() < -1e-12 or p.max() > 1 + 1e-12:
            raise ValueError("probability entries must lie in [0, 1]")
    if p1.ndim == 1:
        return float(np.abs(p1 - p2).sum())
    return float(np.abs(p1 - p2).sum(axis=1).mean())


@dataclass
class EpochRecord:
    epoch: int
    target_discrepancy: float
    source_ce: float
    param_deltas: dict[str, float]


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def last(self) -> EpochRecord:
        return self.epochs[-1]


@dataclass
class TransferModel:
    """Everything needed to embed accounts and score source samples.

    Besides the transfer components the model carries the target-side
    subgraph encoder (GNN weights plus sampling hyperparameters), so a
    checkpoint reproduces pair embeddings exactly.
    """

    encoder: Encoder
    adapter: Adapter | None
    generator: nn.Chain
    c1: nn.Chain
    c2: nn.Chain
    lam: float
    sgd: nn.SgdConfig
    gnn: GnnParams
    k: int = 2
    cap: int = 256
    sample_seed: int = 0
    # population standardization of subgraph embeddings; None means identity
    emb_mu: np.ndarray | None = None
    emb_sd: np.ndarray | None = None

    @property
    def d_p(self) -> int:
        return 2 * self.gnn.d_out

    def features(self, joint: np.ndarray) -> np.ndarray:
        """Generator output F(h) for joint vectors (rows)."""
        return self.generator.forward(np.atleast_2d(joint), train=False)

    def calibrate(self, reference: np.ndarray) -> None:
        """Pin the generator input normalization to reference rows.

        The adapter centers source projections at the origin while target
        joints sit wherever the subgraph encoder puts them, typically far
        away and at a different scale. Standardizing against rows drawn
        from both domains makes the clouds commensurate, so the generator
        meets them with overlapping activations instead of carving the
        input space into per-domain pieces.
        """
        h = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        for _, layer in self.generator.named_layers:
            if isinstance(layer, nn.FrozenBatchNorm):
                layer.calibrate(h)
            h = layer.forward(h, train=False)

    def calibrate_embeddings(self, population: np.ndarray) -> None:
        """Fit embedding standardization on the unlabeled account population.

        The counterpart of the adapter's mean-centering on the source side:
        the raw subgraph embeddings share a large common offset, and without
        centering them the target joints land in a region of R^{d_P} the
        source projections never reach.
        """
        pop = np.atleast_2d(np.asarray(population, dtype=np.float64))
        self.emb_mu = pop.mean(axis=0)
        sd = pop.std(axis=0)
        # constant dims carry no signal; leave them unscaled to avoid 0/0
        self.emb_sd = np.where(sd > 1e-12, sd, 1.0)

    def standardize_embedding(self, h: np.ndarray) -> np.ndarray:
        if self.emb_mu is None:
            return h
        return (h - self.emb_mu) / self.emb_sd

    def account_embedding(self, graph, account_id: str) -> np.ndarray:
        """d_C embedding of an account's k-hop subgraph, standardized."""
        sub = sample_k_hop(graph, account_id, self.k, self.cap, self.sample_seed)
        return self.standardize_embedding(gnn_encode(sub, self.gnn))

    def pair_joint(self, graph, deposit_id: str, withdrawal_id: str) -> np.ndarray:
        """Joint vector [h_deposit | h_withdrawal] for one candidate pair."""
        return fuse(self.account_embedding(graph, deposit_id),
                    self.account_embedding(graph, withdrawal_id)).values

    def classify(self, z: np.ndarray, which: int = 1) -> np.ndarray:
        head = self.c1 if which == 1 else self.c2
        return nn.softmax(head.forward(np.atleast_2d(z), train=False))

    def source_logits(self, feats: np.ndarray, which: int = 1) -> np.ndarray:
        if self.adapter is None:
            raise ValueError("adapter not fitted")
        projected = self.adapter.transform(self.encoder.encode(feats))
        head = self.c1 if which == 1 else self.c2
        return head.forward(self.generator.forward(projected, train=False),
                            train=False)

    def source_cross_entropy(self, source: SourceDataset, which: int = 1) -> float:
        logits = self.source_logits(source.features, which)
        loss, _ = nn.cross_entropy(logits, source.labels)
        return loss

    def component_params(self) -> dict[str, dict[str, np.ndarray]]:
        out = {
            "encoder": self.encoder.params(),
            "generator": self.generator.params(),
            "c1": self.c1.params(),
            "c2": self.c2.params(),
            "gnn": self.gnn.as_dict(),
        }
        if self.adapter is not None:
            out["adapter"] = {"mu_s": self.adapter.mu_s, "u": self.adapter.u}
        return out


def init_transfer_model(d_s: int, d_c: int, seed: int,
                        encoder_architecture: str = "transformer",
                        gen_hidden: tuple[int, ...] = (64, 64),
                        clf_hidden: tuple[int, ...] = (64,),
                        lam: float = 1.0,
                        sgd: nn.SgdConfig | None = None,
                        gnn_layers: int = 2,
                        d_t: int | None = None,
                        k: int = 2, cap: int = 256) -> TransferModel:
    """Seeded construction; C1 and C2 use distinct seeds by design."""
    d_p = 2 * d_c
    if d_p > d_s:
        raise ValueError(f"d_p = 2*d_c = {d_p} must not exceed d_s = {d_s}")
    gnn = init_gnn_params(d_t if d_t is not None else d_s, d_c, gnn_layers,
                          rng_for(seed, "gnn"))
    body = nn.mlp([d_p, *gen_hidden, d_p], rng_for(seed, "generator"))
    generator = nn.Chain([("norm", nn.FrozenBatchNorm(d_p)), *body.named_layers])
    c1 = nn.mlp([d_p, *clf_hidden, 2], rng_for(seed, "classifier", 1))
    c2 = nn.mlp([d_p, *clf_hidden, 2], rng_for(seed, "classifier", 2))
    return TransferModel(
        encoder=Encoder(encoder_architecture, d_s, seed),
        adapter=None,
        generator=generator,
        c1=c1,
        c2=c2,
        lam=lam,
        sgd=sgd if sgd is not None else nn.SgdConfig(),
        gnn=gnn,
        k=k,
        cap=cap,
        sample_seed=seed,
        # identity until calibrated; concrete arrays keep the checkpoint
        # tensor set the same before and after calibration
        emb_mu=np.zeros(d_c),
        emb_sd=np.ones(d_c),
    )


def _as_joint_matrix(target_joint) -> np.ndarray:
    if isinstance(target_joint, np.ndarray):
        return np.atleast_2d(np.asarray(target_joint, dtype=np.float64))
    rows = [t.values if isinstance(t, JointRepresentation) else np.asarray(t)
            for t in target_joint]
    return np.stack(rows).astype(np.float64)


def _l1_grads(p1: np.ndarray, p2: np.ndarray, scale: float):
    """Gradients of mean-L1 discrepancy w.r.t. p1 and p2, times scale."""
    s = np.sign(p1 - p2) * (scale / p1.shape[0])
    return s, -s


def train_transfer(model: TransferModel, source: SourceDataset, target_joint,
                   epochs: int, seed: int, batch_size: int = 64,
                   classifier_steps: int = 1, generator_steps: int = 1,
                   with_source_ce: bool = True,
                   train_adapter: bool = True) -> tuple[TransferModel, TrainLog]:
    """Alternating two-step adversarial pretraining; returns (model, log).

    Per batch, step A updates the classifiers ``classifier_steps`` times
    (source cross-entropy minus target discrepancy by default, pure
    negated discrepancy when ``with_source_ce`` is false), then step B
    updates the generator ``generator_steps`` times on discrepancy plus
    lambda-weighted source cross-entropy. The adapter projection joins
    step B when ``train_adapter`` is set. Raises on non-finite losses,
    reporting the last epoch that completed finitely.
    """
    if model.adapter is None:
        raise ValueError("fit the adapter before training")
    h_t = _as_joint_matrix(target_joint)
    if h_t.shape[1] != model.d_p:
        raise ValueError(f"target joints have width {h_t.shape[1]}, "
                         f"model expects {model.d_p}")
    y_s = source.labels
    # E never moves, so source encodings are computed once up front; only
    # the projection through U is re-applied per batch
    centered = model.encoder.encode(source.features) - model.adapter.mu_s
    n_s, n_t = centered.shape[0], h_t.shape[0]
    opt_c1 = nn.Sgd(model.c1.params(), model.sgd)
    opt_c2 = nn.Sgd(model.c2.params(), model.sgd)
    opt_f = nn.Sgd(model.generator.params(), model.sgd)
    adapter_params = {"u": model.adapter.u}
    opt_u = nn.Sgd(adapter_params, model.sgd) if train_adapter else None
    rng = rng_for(seed, "pretrain")
    log = TrainLog()
    components = {"generator": model.generator.params(),
                  "c1": model.c1.params(), "c2": model.c2.params(),
                  "adapter_u": adapter_params}

    for epoch in range(epochs):
        start = {name: nn.snapshot(p) for name, p in components.items()}
        perm_s = rng.permutation(n_s)
        perm_t = rng.permutation(n_t)
        nb_s = max(1, -(-n_s // batch_size))
        nb_t = max(1, -(-n_t // batch_size))
        n_batches = max(nb_s, nb_t)
        dis_sum = 0.0
        ce_sum = 0.0
        for b in range(n_batches):
            sb = perm_s[(b % nb_s) * batch_size:(b % nb_s) * batch_size + batch_size]
            tb = perm_t[(b % nb_t) * batch_size:(b % nb_t) * batch_size + batch_size]
            cb = centered[sb]
            yb = y_s[sb]
            ht_b = h_t[tb]

            for _ in range(classifier_steps):
                model.c1.zero_grads()
                model.c2.zero_grads()
                if with_source_ce:
                    fs = model.generator.forward(cb @ model.adapter.u, train=False)
                    for head in (model.c1, model.c2):
                        logits = head.forward(fs, train=True)
                        _, dlogits = nn.cross_entropy(logits, yb)
                        head.backward(dlogits)
                ft = model.generator.forward(ht_b, train=False)
                p1 = nn.softmax(model.c1.forward(ft, train=True))
                p2 = nn.softmax(model.c2.forward(ft, train=True))
                # maximize discrepancy: descend on its negation
                dp1, dp2 = _l1_grads(p1, p2, scale=-1.0)
                model.c1.backward(nn.softmax_backward(p1, dp1))
                model.c2.backward(nn.softmax_backward(p2, dp2))
                opt_c1.step(model.c1.grads())
                opt_c2.step(model.c2.grads())

            batch_dis = np.nan
            batch_ce = 0.0
            for _ in range(generator_steps):
                model.generator.zero_grads()
                ft = model.generator.forward(ht_b, train=True)
                p1 = nn.softmax(model.c1.forward(ft, train=True))
                p2 = nn.softmax(model.c2.forward(ft, train=True))
                batch_dis = float(np.abs(p1 - p2).sum(axis=1).mean())
                dp1, dp2 = _l1_grads(p1, p2, scale=1.0)
                dft = model.c1.backward(nn.softmax_backward(p1, dp1))
                dft += model.c2.backward(nn.softmax_backward(p2, dp2))
                # finish the target chain before the source forward reuses
                # the generator's activation cache
                model.generator.backward(dft)
                if model.lam > 0.0:
                    fs = model.generator.forward(cb @ model.adapter.u, train=True)
                    logits = model.c1.forward(fs, train=True)
                    batch_ce, dlogits = nn.cross_entropy(logits, yb)
                    dfs = model.c1.backward(dlogits * model.lam)
                    dz = model.generator.backward(dfs)
                    if opt_u is not None:
                        opt_u.step({"u": cb.T @ dz})
                opt_f.step(model.generator.grads())
            if generator_steps == 0:
                ft = model.generator.forward(ht_b, train=False)
                batch_dis = discrepancy(model.classify(ft, 1), model.classify(ft, 2))
            dis_sum += batch_dis
            ce_sum += batch_ce
            if not (np.isfinite(batch_dis) and np.isfinite(batch_ce)):
                raise DivergenceError("non-finite training loss", epoch - 1)
        deltas = {name: nn.params_l2_delta(start[name], components[name])
                  for name in components}
        log.epochs.append(EpochRecord(
            epoch=epoch,
            target_discrepancy=dis_sum / n_batches,
            source_ce=ce_sum / n_batches,
            param_deltas=deltas,
        ))
    return model, log


def no_transfer(model: TransferModel, source: SourceDataset, target_joint,
                epochs: int, seed: int, **_: object) -> tuple[TransferModel, TrainLog]:
    """Strategy stub: leave the randomly initialized generator untouched."""
    return model, TrainLog()


TRANSFER_STRATEGIES = {
    "mcd": train_transfer,
    "none": no_transfer,
}


def get_strategy(name: str):
    try:
        return TRANSFER_STRATEGIES[name]
    except KeyError:
        raise ValueError(
            f"unknown transfer strategy {name!r}; available: "
            f"{sorted(TRANSFER_STRATEGIES)}") from None
