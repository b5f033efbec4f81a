"""Cross-domain information-gain estimation and redistribution.

Three probability heads score a positive (user, item) pair: one from the
user's source-domain view, one from the target view, and a joint head that
fuses both views through a small feed-forward estimator network. The gain
of a group is the mean log ratio log(p_joint / (p_source * p_target)) over
the group's overlapping-user positives, and the redistribution penalty is
the squared difference of the two group gains.

The estimator is trained once per epoch against a self-supervised target:
map the previous epoch's (target, source) user embeddings to the current
target embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import G0, G1
from .errors import DataError
from .numerics import PROB_CEIL, PROB_FLOOR, clamp_prob, sigmoid
from .seeding import make_rng


class GainEstimator:
    """Feed-forward map from concatenated [target; source] user vectors to a
    fused d-vector. ReLU hidden layers, linear output; dropout applies only
    while the estimator itself is being trained.
    """

    def __init__(self, d: int, hidden=(128, 64), dropout: float = 0.2, seed: int = 0):
        if d < 1:
            raise DataError("embedding dimension must be >= 1")
        if not 0.0 <= dropout < 1.0:
            raise DataError("dropout must lie in [0, 1)")
        self.d = d
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = dropout
        rng = make_rng(seed, "gain-estimator-init")
        sizes = [2 * d, *self.hidden, d]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        # Zero final layer: the fused vector starts at 0, so the joint head
        # starts at probability 1/2 for every pair.
        self.weights[-1][:] = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, dropout_rng=None):
        """Batched forward pass. Returns (output, cache) where the cache
        holds inputs and hidden activations for backprop. Dropout (inverted,
        on hidden activations) is applied only when a dropout RNG is given.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [x]
        masks = []
        h = x
        for layer in range(self.n_layers - 1):
            a = h @ self.weights[layer].T + self.biases[layer]
            h = np.maximum(a, 0.0)
            if dropout_rng is not None and self.dropout > 0.0:
                keep = 1.0 - self.dropout
                mask = (dropout_rng.random(h.shape) < keep) / keep
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(h)
        out = h @ self.weights[-1].T + self.biases[-1]
        return out, {"acts": acts, "masks": masks}

    def fuse(self, user_target_vecs, user_source_vecs) -> np.ndarray:
        x = np.concatenate(
            [np.atleast_2d(user_target_vecs), np.atleast_2d(user_source_vecs)], axis=1
        )
        out, _ = self.forward(x)
        return out

    def input_gradient(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Gradient of (output . upstream) with respect to the input rows."""
        g = np.atleast_2d(upstream) @ self.weights[-1]
        for layer in range(self.n_layers - 2, -1, -1):
            h = cache["acts"][layer + 1]
            mask = cache["masks"][layer]
            if mask is not None:
                g = g * mask
            g = g * (h > 0)
            g = g @ self.weights[layer]
        return g

    def weight_gradients(self, cache, d_out: np.ndarray):
        """Backprop d_out (batch x d) to per-layer weight/bias gradients."""
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        g = np.atleast_2d(d_out)
        for layer in range(self.n_layers - 1, -1, -1):
            grads_w[layer] = g.T @ cache["acts"][layer]
            grads_b[layer] = g.sum(axis=0)
            if layer > 0:
                h = cache["acts"][layer]
                mask = cache["masks"][layer - 1]
                g = g @ self.weights[layer]
                if mask is not None:
                    g = g * mask
                g = g * (h > 0)
        return grads_w, grads_b

    def parameters(self) -> dict:
        out = {}
        for k in range(self.n_layers):
            out[f"w{k}"] = self.weights[k]
            out[f"b{k}"] = self.biases[k]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self) -> "GainEstimator":
        clone = object.__new__(GainEstimator)
        clone.d = self.d
        clone.hidden = self.hidden
        clone.dropout = self.dropout
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


@dataclass
class EpochSnapshot:
    """Frozen copies of the user tables at an epoch boundary."""

    user_emb_target: np.ndarray
    user_emb_source: np.ndarray

    @classmethod
    def take(cls, backbone) -> "EpochSnapshot":
        return cls(backbone.user_emb_target(), backbone.user_emb_source())


@dataclass
class GainReport:
    delta_i: dict
    redistribution_loss: float
    n_samples: dict

    def gap(self) -> float:
        return self.delta_i[G0] - self.delta_i[G1]


# -- probability heads --------------------------------------------------------


def prob_source(backbone, target_user: int, target_item: int) -> float:
    """sigmoid(score of the user's source view against the target item)."""
    u = backbone.user_source_vector(target_user)
    return float(clamp_prob(sigmoid(float(u @ backbone.item_target[target_item]))))


def prob_target(backbone, target_user: int, target_item: int) -> float:
    u = backbone.user_target_vector(target_user)
    return float(clamp_prob(sigmoid(float(u @ backbone.item_target[target_item]))))


def prob_joint(backbone, estimator: GainEstimator, target_user: int, target_item: int) -> float:
    """sigmoid(fused(target view, source view) . target item), dropout off."""
    u_t = backbone.user_target_vector(target_user)
    u_s = backbone.user_source_vector(target_user)
    fused = estimator.fuse(u_t, u_s)[0]
    return float(clamp_prob(sigmoid(float(fused @ backbone.item_target[target_item]))))


def _batch_heads(backbone, estimator, users, items):
    """Vectorized heads for overlapping target users. Returns logits,
    clamped probabilities, and the forward cache needed for gradients.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    u_t = backbone.user_target_vectors(users)
    s_slots = backbone.source_slots_of_targets(users)
    u_s = backbone.user_pool[s_slots]
    i_t = backbone.item_target[items]

    z_s = np.einsum("bd,bd->b", u_s, i_t)
    z_t = np.einsum("bd,bd->b", u_t, i_t)
    x = np.concatenate([u_t, u_s], axis=1)
    fused, cache = estimator.forward(x)
    z_j = np.einsum("bd,bd->b", fused, i_t)

    p_s = clamp_prob(sigmoid(z_s))
    p_t = clamp_prob(sigmoid(z_t))
    p_j = clamp_prob(sigmoid(z_j))
    return {
        "users": users, "items": items, "u_t": u_t, "u_s": u_s, "i_t": i_t,
        "s_slots": s_slots, "z_s": z_s, "z_t": z_t, "z_j": z_j,
        "p_s": p_s, "p_t": p_t, "p_j": p_j, "fused": fused, "cache": cache,
    }


def _overlap_mask(backbone, users) -> np.ndarray:
    return backbone.target_to_source[np.asarray(users, dtype=np.int64)] >= 0


def estimate_gain(backbone, estimator: GainEstimator, users, items, groups) -> GainReport:
    """Per-group mean log(p_joint / (p_source * p_target)) over the
    overlapping-user positives in the batch. A group without qualifying
    samples contributes gain 0 and is flagged by n_samples.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size == 0:
        raise DataError("empty batch")
    mask = _overlap_mask(backbone, users)
    delta = {G0: 0.0, G1: 0.0}
    counts = {G0: 0, G1: 0}
    if np.any(mask):
        heads = _batch_heads(backbone, estimator, users[mask], items[mask])
        terms = np.log(heads["p_j"]) - np.log(heads["p_s"]) - np.log(heads["p_t"])
        sample_groups = np.asarray(groups)[mask]
        for g in (G0, G1):
            sel = sample_groups == g
            counts[g] = int(sel.sum())
            if counts[g] > 0:
                delta[g] = float(terms[sel].mean())
    gap = delta[G0] - delta[G1]
    return GainReport(delta_i=delta, redistribution_loss=float(gap * gap), n_samples=counts)


def redistribution_grads(backbone, estimator: GainEstimator, users, items, groups):
    """Redistribution penalty value and its analytic gradients with respect
    to the backbone embeddings, holding the estimator's weights fixed
    (gradients still flow through its forward pass).

    Returns (value, grads) where grads lists (table, rows, grad_rows)
    contributions for the pool and target item table. Batches where fewer
    than two groups are represented contribute zero.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    mask = _overlap_mask(backbone, users)
    if not np.any(mask):
        return 0.0, []
    users, items = users[mask], items[mask]
    sample_groups = np.asarray(groups)[mask]
    n0 = int((sample_groups == G0).sum())
    n1 = int((sample_groups == G1).sum())
    if n0 == 0 or n1 == 0:
        return 0.0, []

    heads = _batch_heads(backbone, estimator, users, items)
    terms = np.log(heads["p_j"]) - np.log(heads["p_s"]) - np.log(heads["p_t"])
    gap = float(terms[sample_groups == G0].mean() - terms[sample_groups == G1].mean())
    value = gap * gap

    # d value / d term_k: 2*gap * (+1/n0 for g0, -1/n1 for g1)
    coeff = np.where(sample_groups == G0, 2.0 * gap / n0, -2.0 * gap / n1)

    # Clamped probabilities are flat; zero those samples' head gradients.
    def live(p):
        return (p > PROB_FLOOR) & (p < PROB_CEIL)

    c_j = coeff * (1.0 - heads["p_j"]) * live(heads["p_j"])
    c_s = -coeff * (1.0 - heads["p_s"]) * live(heads["p_s"])
    c_t = -coeff * (1.0 - heads["p_t"]) * live(heads["p_t"])

    i_t, u_t, u_s, fused = heads["i_t"], heads["u_t"], heads["u_s"], heads["fused"]
    d_x = estimator.input_gradient(heads["cache"], c_j[:, None] * i_t)
    d = backbone.d

    g_ut = c_t[:, None] * i_t + d_x[:, :d]
    g_us = c_s[:, None] * i_t + d_x[:, d:]
    g_it = c_j[:, None] * fused + c_s[:, None] * u_s + c_t[:, None] * u_t

    target_slots = backbone.target_slot[users]
    source_slots = heads["s_slots"]
    grads = [
        ("user_pool", target_slots, g_ut),
        ("user_pool", source_slots, g_us),
        ("item_target", items, g_it),
    ]
    return value, grads


# -- estimator training --------------------------------------------------------


def estimator_step(estimator: GainEstimator, snapshot: EpochSnapshot,
                   live_user_emb_target: np.ndarray, overlap_targets, overlap_sources,
                   optimizer, rng, batch_size: int = 2048) -> float:
    """One optimizer sweep fitting fused(previous target, previous source)
    to the current target embedding over the overlapping users, with dropout
    active. Returns the mean per-user squared-error loss. The embeddings it
    reads are asserted unchanged.
    """
    overlap_targets = np.asarray(overlap_targets, dtype=np.int64)
    overlap_sources = np.asarray(overlap_sources, dtype=np.int64)
    if overlap_targets.size == 0:
        raise DataError("gain module requires overlapping users")

    def digest():
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(live_user_emb_target).tobytes())
        h.update(np.ascontiguousarray(snapshot.user_emb_target).tobytes())
        h.update(np.ascontiguousarray(snapshot.user_emb_source).tobytes())
        return h.hexdigest()

    before = digest()
    x_all = np.concatenate(
        [snapshot.user_emb_target[overlap_targets], snapshot.user_emb_source[overlap_sources]],
        axis=1,
    )
    y_all = live_user_emb_target[overlap_targets]

    total = 0.0
    n = len(overlap_targets)
    for lo in range(0, n, batch_size):
        x = x_all[lo: lo + batch_size]
        y = y_all[lo: lo + batch_size]
        out, cache = estimator.forward(x, dropout_rng=rng)
        resid = out - y
        loss = float((resid ** 2).sum() / len(x))
        total += loss * len(x)
        d_out = 2.0 * resid / len(x)
        grads_w, grads_b = estimator.weight_gradients(cache, d_out)
        for k in range(estimator.n_layers):
            optimizer.step(f"w{k}", estimator.weights[k], grads_w[k])
            optimizer.step(f"b{k}", estimator.biases[k], grads_b[k])
    if digest() != before:
        raise AssertionError("estimator_step modified backbone embeddings")
    return total / n
