"""Trainable personalization heads over a frozen backbone.

The gated head holds per-group weight vectors and scalar gates; its per-entity
bias is alpha_A * <w_A, g_A(t) * f_A> + alpha_B * <w_B, g_B(t) * f_B>,
precomputed in one sparse pass. Training minimizes a pairwise hinge loss with
L1/L2 regularization, touching only the head parameters. A profile-agnostic
MLP head (PatientNode) is provided as an ablation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import EmbeddingTable
from .errors import CheckpointError
from .kg_store import GateMatrix, TripleStore
from .profile_builder import ProfileFeatures


@dataclass
class BiasHead:
    """Learnable parameters: one weight per attribute column plus two scalar gates."""

    w_a: np.ndarray
    w_b: np.ndarray
    alpha_a: float = 1.0
    alpha_b: float = 1.0

    @property
    def param_count(self) -> int:
        return len(self.w_a) + len(self.w_b) + 2

    def copy(self) -> "BiasHead":
        return BiasHead(self.w_a.copy(), self.w_b.copy(), self.alpha_a, self.alpha_b)


@dataclass
class BiasVector:
    """Per-entity additive bias split into per-group contributions."""

    values: np.ndarray
    contrib_a: np.ndarray
    contrib_b: np.ndarray


@dataclass
class HeadTrainConfig:
    batch_size: int = 4096
    learning_rate: float = 1e-3
    epochs: int = 5
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    negatives_per_positive: int = 1
    seed: int = 0

    def validate(self) -> None:
        for name in ("batch_size", "learning_rate", "epochs", "negatives_per_positive"):
            if getattr(self, name) <= 0:
                raise ValueError(f"head config: {name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("head config: lambdas must be >= 0")
        if self.seed < 0:
            raise ValueError("head config: seed must be an unsigned int")


def new_head(gates_a: GateMatrix, gates_b: GateMatrix) -> BiasHead:
    """Zero-initialized head: the personalized scorer starts exactly at the backbone."""
    return BiasHead(
        w_a=np.zeros(gates_a.num_columns, dtype=np.float64),
        w_b=np.zeros(gates_b.num_columns, dtype=np.float64),
        alpha_a=1.0,
        alpha_b=1.0,
    )


def _group_dots(gates: GateMatrix, w: np.ndarray, f: ProfileFeatures, tails: np.ndarray) -> np.ndarray:
    """<w, g(t) * f> for each tail, summed in ascending column order."""
    owners, cols = gates.gather_rows(tails)
    terms = (w * f.values)[cols]
    return np.bincount(owners, weights=terms, minlength=len(tails))


def compute_bias(head: BiasHead, gates_a: GateMatrix, gates_b: GateMatrix,
                 f_a: ProfileFeatures, f_b: ProfileFeatures) -> BiasVector:
    """One sparse pass over gate nonzeros; entities with empty rows get exactly 0."""
    if len(head.w_a) != gates_a.num_columns or len(f_a) != gates_a.num_columns:
        raise ValueError("group A dimensions disagree (w_a, f_a, gates_a)")
    if len(head.w_b) != gates_b.num_columns or len(f_b) != gates_b.num_columns:
        raise ValueError("group B dimensions disagree (w_b, f_b, gates_b)")
    contrib_a = head.alpha_a * gates_a.matvec(head.w_a * f_a.values)
    contrib_b = head.alpha_b * gates_b.matvec(head.w_b * f_b.values)
    return BiasVector(values=contrib_a + contrib_b, contrib_a=contrib_a, contrib_b=contrib_b)


def personalized_scores(table: EmbeddingTable, bias: BiasVector, h: int, r: int) -> np.ndarray:
    """s'(h, r, t) = backbone score + bias, for every candidate tail t."""
    scores = table.score_all_tails(h, r)
    if bias.values.shape[0] != scores.shape[0]:
        raise ValueError(
            f"bias length {bias.values.shape[0]} != entity count {scores.shape[0]}"
        )
    return scores + bias.values


@dataclass
class HeadGrads:
    w_a: np.ndarray
    w_b: np.ndarray
    alpha_a: float
    alpha_b: float


def head_loss_and_grad(
    head: BiasHead,
    table: EmbeddingTable,
    gates_a: GateMatrix,
    gates_b: GateMatrix,
    f_a: ProfileFeatures,
    f_b: ProfileFeatures,
    heads: np.ndarray,
    rels: np.ndarray,
    t_pos: np.ndarray,
    t_neg: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> tuple[float, HeadGrads]:
    """Batch hinge loss (margin 1) plus regularizers, with analytic gradients.

    The hinge term is averaged over pairs; regularizers enter at full strength.
    L1 subgradient at zero is taken as 0.
    """
    n_pairs = len(t_pos)
    s_margin = table.score_triples(heads, rels, t_pos) - table.score_triples(heads, rels, t_neg)

    dots = {}
    gathered = {}
    for tag, gates, w, f, tails in (
        ("a_pos", gates_a, head.w_a, f_a, t_pos),
        ("a_neg", gates_a, head.w_a, f_a, t_neg),
        ("b_pos", gates_b, head.w_b, f_b, t_pos),
        ("b_neg", gates_b, head.w_b, f_b, t_neg),
    ):
        owners, cols = gates.gather_rows(tails)
        gathered[tag] = (owners, cols)
        terms = (w * f.values)[cols]
        dots[tag] = np.bincount(owners, weights=terms, minlength=n_pairs)

    bias_margin = (
        head.alpha_a * (dots["a_pos"] - dots["a_neg"])
        + head.alpha_b * (dots["b_pos"] - dots["b_neg"])
    )
    hinge = np.maximum(0.0, 1.0 - (s_margin + bias_margin))
    active = hinge > 0

    loss = float(hinge.mean())
    loss += lambda1 * (np.abs(head.w_a).sum() + np.abs(head.w_b).sum())
    loss += lambda2 * (np.square(head.w_a).sum() + np.square(head.w_b).sum())

    def grad_w(gates: GateMatrix, f: ProfileFeatures, w: np.ndarray, alpha: float,
               pos_tag: str, neg_tag: str) -> np.ndarray:
        owners_p, cols_p = gathered[pos_tag]
        owners_n, cols_n = gathered[neg_tag]
        g = np.zeros(gates.num_columns, dtype=np.float64)
        if cols_p.size:
            g -= np.bincount(cols_p, weights=active[owners_p] * f.values[cols_p],
                             minlength=gates.num_columns)
        if cols_n.size:
            g += np.bincount(cols_n, weights=active[owners_n] * f.values[cols_n],
                             minlength=gates.num_columns)
        g *= alpha / n_pairs
        g += lambda1 * np.sign(w) + 2.0 * lambda2 * w
        return g

    grads = HeadGrads(
        w_a=grad_w(gates_a, f_a, head.w_a, head.alpha_a, "a_pos", "a_neg"),
        w_b=grad_w(gates_b, f_b, head.w_b, head.alpha_b, "b_pos", "b_neg"),
        alpha_a=float(-(active * (dots["a_pos"] - dots["a_neg"])).sum() / n_pairs),
        alpha_b=float(-(active * (dots["b_pos"] - dots["b_neg"])).sum() / n_pairs),
    )
    return loss, grads


def _sample_negatives(rng: np.random.Generator, t_pos: np.ndarray, num_entities: int) -> np.ndarray:
    neg = rng.integers(0, num_entities - 1, size=t_pos.shape[0])
    neg[neg >= t_pos] += 1
    return neg


def train_head(
    store: TripleStore,
    table: EmbeddingTable,
    gates_a: GateMatrix,
    gates_b: GateMatrix,
    f_a: ProfileFeatures,
    f_b: ProfileFeatures,
    cfg: HeadTrainConfig,
) -> BiasHead:
    """Mini-batch gradient descent on {w_a, w_b, alpha_a, alpha_b} only.

    The backbone stays frozen; negatives are uniform corrupt tails (excluding
    the positive) resampled each epoch. Deterministic given cfg.seed.
    """
    cfg.validate()
    if not table.frozen:
        raise ValueError("backbone must be frozen before head training")
    if store.train.shape[0] == 0:
        raise ValueError("cannot train head on an empty train split")

    head = new_head(gates_a, gates_b)
    rng = np.random.default_rng(cfg.seed)
    train = store.train
    nE = store.num_entities
    npp = cfg.negatives_per_positive

    for epoch in range(cfg.epochs):
        order = rng.permutation(train.shape[0])
        pos = np.repeat(train[order], npp, axis=0)
        t_neg_all = _sample_negatives(rng, pos[:, 2], nE)
        for start in range(0, pos.shape[0], cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            loss, grads = head_loss_and_grad(
                head, table, gates_a, gates_b, f_a, f_b,
                pos[sl, 0], pos[sl, 1], pos[sl, 2], t_neg_all[sl],
                cfg.lambda1, cfg.lambda2,
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite head loss {loss} at epoch {epoch}, batch offset {start}"
                )
            head.w_a -= cfg.learning_rate * grads.w_a
            head.w_b -= cfg.learning_rate * grads.w_b
            head.alpha_a -= cfg.learning_rate * grads.alpha_a
            head.alpha_b -= cfg.learning_rate * grads.alpha_b
    return head


# ---------------------------------------------------------------------------
# PatientNode ablation: fixed per-entity bias from the entity embedding alone.
# ---------------------------------------------------------------------------

@dataclass
class PatientNodeHead:
    """One-hidden-layer MLP d -> hidden (ReLU) -> scalar bias."""

    w1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def param_count(self) -> int:
        h, d = self.w1.shape
        return h * d + h + h + 1

    def bias_for(self, emb: np.ndarray) -> np.ndarray:
        z = emb @ self.w1.T + self.b1
        return np.maximum(z, 0.0) @ self.w2 + self.b2


def hidden_for_budget(dim: int, budget: int) -> int:
    """Largest hidden width with parameter count d*h + 2h + 1 <= budget."""
    h = (budget - 1) // (dim + 2)
    if h < 1:
        raise ValueError(f"budget {budget} too small for dim {dim}")
    return h


def new_patientnode(dim: int, hidden: int, seed: int) -> PatientNodeHead:
    """Random hidden layer, zero output layer: initial bias is exactly 0 everywhere."""
    rng = np.random.default_rng(seed)
    bound = 0.5 / np.sqrt(dim)
    return PatientNodeHead(
        w1=rng.uniform(-bound, bound, size=(hidden, dim)),
        b1=np.zeros(hidden, dtype=np.float64),
        w2=np.zeros(hidden, dtype=np.float64),
        b2=0.0,
    )


@dataclass
class PatientNodeGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def patientnode_loss_and_grad(
    head: PatientNodeHead,
    table: EmbeddingTable,
    heads: np.ndarray,
    rels: np.ndarray,
    t_pos: np.ndarray,
    t_neg: np.ndarray,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> tuple[float, PatientNodeGrads]:
    """Same pairwise hinge as the gated head; backprop through the tiny MLP.

    Regularizers (when configured) apply to the weight matrices, not biases.
    """
    n_pairs = len(t_pos)
    ent = table._as64()[0]
    s_margin = table.score_triples(heads, rels, t_pos) - table.score_triples(heads, rels, t_neg)

    e_pos, e_neg = ent[t_pos], ent[t_neg]
    z_pos = e_pos @ head.w1.T + head.b1
    z_neg = e_neg @ head.w1.T + head.b1
    a_pos, a_neg = np.maximum(z_pos, 0.0), np.maximum(z_neg, 0.0)
    bias_pos = a_pos @ head.w2 + head.b2
    bias_neg = a_neg @ head.w2 + head.b2

    hinge = np.maximum(0.0, 1.0 - (s_margin + bias_pos - bias_neg))
    active = hinge > 0
    loss = float(hinge.mean())
    loss += lambda1 * (np.abs(head.w1).sum() + np.abs(head.w2).sum())
    loss += lambda2 * (np.square(head.w1).sum() + np.square(head.w2).sum())

    # upstream gradient of the mean hinge w.r.t. bias(t): -1/P for positives,
    # +1/P for negatives, zero for inactive pairs
    gamma_pos = -active.astype(np.float64) / n_pairs
    gamma_neg = active.astype(np.float64) / n_pairs

    g_w2 = gamma_pos @ a_pos + gamma_neg @ a_neg
    g_b2 = float(gamma_pos.sum() + gamma_neg.sum())
    dz_pos = (gamma_pos[:, None] * head.w2[None, :]) * (z_pos > 0)
    dz_neg = (gamma_neg[:, None] * head.w2[None, :]) * (z_neg > 0)
    g_w1 = dz_pos.T @ e_pos + dz_neg.T @ e_neg
    g_b1 = dz_pos.sum(axis=0) + dz_neg.sum(axis=0)

    g_w1 += lambda1 * np.sign(head.w1) + 2.0 * lambda2 * head.w1
    g_w2 += lambda1 * np.sign(head.w2) + 2.0 * lambda2 * head.w2
    return loss, PatientNodeGrads(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


def train_patientnode(
    store: TripleStore,
    table: EmbeddingTable,
    cfg: HeadTrainConfig,
    hidden: int = 16,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> PatientNodeHead:
    """Train the MLP ablation; profile features and gates are never consulted."""
    cfg.validate()
    if not table.frozen:
        raise ValueError("backbone must be frozen before head training")
    head = new_patientnode(table.dim, hidden, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train = store.train
    nE = store.num_entities
    npp = cfg.negatives_per_positive

    for epoch in range(cfg.epochs):
        order = rng.permutation(train.shape[0])
        pos = np.repeat(train[order], npp, axis=0)
        t_neg_all = _sample_negatives(rng, pos[:, 2], nE)
        for start in range(0, pos.shape[0], cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            loss, grads = patientnode_loss_and_grad(
                head, table, pos[sl, 0], pos[sl, 1], pos[sl, 2], t_neg_all[sl],
                lambda1, lambda2,
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite patientnode loss {loss} at epoch {epoch}, batch offset {start}"
                )
            head.w1 -= cfg.learning_rate * grads.w1
            head.b1 -= cfg.learning_rate * grads.b1
            head.w2 -= cfg.learning_rate * grads.w2
            head.b2 -= cfg.learning_rate * grads.b2
    return head


def compute_bias_patientnode(head: PatientNodeHead, table: EmbeddingTable) -> BiasVector:
    """Fixed bias per entity from its embedding; identical for every profile."""
    values = head.bias_for(table._as64()[0])
    # no group structure: the whole bias is reported as one contribution
    return BiasVector(values=values, contrib_a=values, contrib_b=np.zeros_like(values))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_head(head: BiasHead, cfg: HeadTrainConfig, gates_a: GateMatrix,
              gates_b: GateMatrix, path: str) -> None:
    payload = {
        "kind": "gatedbias-head",
        "universe_checksum_a": gates_a.universe.checksum(),
        "universe_checksum_b": gates_b.universe.checksum(),
        "w_a": head.w_a.tolist(),
        "w_b": head.w_b.tolist(),
        "alpha_a": head.alpha_a,
        "alpha_b": head.alpha_b,
        "train_config": vars(cfg),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_head(path: str, gates_a: GateMatrix, gates_b: GateMatrix) -> tuple[BiasHead, HeadTrainConfig]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "gatedbias-head":
        raise CheckpointError(f"{path}: not a gated head checkpoint")
    for tag, gates in (("a", gates_a), ("b", gates_b)):
        want = payload[f"universe_checksum_{tag}"]
        have = gates.universe.checksum()
        if want != have:
            raise CheckpointError(
                f"{path}: universe {tag.upper()} checksum mismatch (checkpoint {want[:12]}..., "
                f"current {have[:12]}...)"
            )
    head = BiasHead(
        w_a=np.asarray(payload["w_a"], dtype=np.float64),
        w_b=np.asarray(payload["w_b"], dtype=np.float64),
        alpha_a=float(payload["alpha_a"]),
        alpha_b=float(payload["alpha_b"]),
    )
    return head, HeadTrainConfig(**payload["train_config"])


def save_patientnode(head: PatientNodeHead, cfg: HeadTrainConfig, path: str) -> None:
    payload = {
        "kind": "patientnode-head",
        "w1": head.w1.tolist(),
        "b1": head.b1.tolist(),
        "w2": head.w2.tolist(),
        "b2": head.b2,
        "train_config": vars(cfg),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_patientnode(path: str, expected_dim: int | None = None) -> tuple[PatientNodeHead, HeadTrainConfig]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "patientnode-head":
        raise CheckpointError(f"{path}: not a patientnode checkpoint")
    head = PatientNodeHead(
        w1=np.asarray(payload["w1"], dtype=np.float64),
        b1=np.asarray(payload["b1"], dtype=np.float64),
        w2=np.asarray(payload["w2"], dtype=np.float64),
        b2=float(payload["b2"]),
    )
    if expected_dim is not None and head.w1.shape[1] != expected_dim:
        raise CheckpointError(
            f"{path}: checkpoint dim {head.w1.shape[1]} != backbone dim {expected_dim}"
        )
    return head, HeadTrainConfig(**payload["train_config"])
