"""Group-aware negative sampling.

Per-group recommendation losses are smoothed across epochs with momentum;
the relative gap between a user's group and the group average sets a
softmax temperature, and negatives are drawn from a small random candidate
set of the user's non-interacted items with probability proportional to
exp(score / temperature). A disadvantaged group (above-average loss) gets a
temperature below one and therefore harder negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import G0, G1
from .errors import DataError, NumericalError
from .numerics import softmax

ALPHA_EPS = 1e-12


@dataclass
class SamplerConfig:
    epsilon: float = 1.0
    candidate_size: int = 8
    negatives_per_positive: int = 1
    rng_seed: int = 0

    def validate(self):
        if self.epsilon < 0:
            raise DataError("epsilon must be >= 0")
        if self.candidate_size < 1:
            raise DataError("candidate_size must be >= 1")
        if self.negatives_per_positive < 1:
            raise DataError("negatives_per_positive must be >= 1")
        return self


class GroupLossTracker:
    """Momentum-smoothed per-group mean training losses.

    Per-sample losses are accumulated during an epoch; ``end_epoch`` folds
    the epoch means into the running exponential moving average with
    coefficient ``beta``. A group with no samples in a later epoch keeps its
    previous smoothed value.
    """

    def __init__(self, beta: float = 0.9, groups=(G0, G1)):
        if not 0.0 <= beta < 1.0:
            raise DataError("beta must lie in [0, 1)")
        self.beta = beta
        self.groups = tuple(groups)
        self.ema = {g: None for g in self.groups}
        self._sums = {g: 0.0 for g in self.groups}
        self._counts = {g: 0 for g in self.groups}
        self.epochs_completed = 0

    def accumulate_sample_loss(self, group, loss: float):
        if group not in self._sums:
            raise DataError(f"unknown group {group!r}")
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss!r} for group {group!r}")
        self._sums[group] += float(loss)
        self._counts[group] += 1

    def accumulate_many(self, groups, losses):
        groups = np.asarray(groups)
        losses = np.asarray(losses, dtype=np.float64)
        if not np.all(np.isfinite(losses)):
            raise NumericalError("non-finite loss in batch")
        for g in self.groups:
            mask = groups == g
            self._sums[g] += float(losses[mask].sum())
            self._counts[g] += int(mask.sum())
        known = np.isin(groups, self.groups)
        if not np.all(known):
            raise DataError(f"unknown group {groups[~known][0]!r}")

    def end_epoch(self) -> dict:
        emas = {}
        for g in self.groups:
            if self._counts[g] > 0:
                current = self._sums[g] / self._counts[g]
            elif self.ema[g] is not None:
                current = self.ema[g]
            else:
                raise DataError(f"group {g!r} has no samples in the first epoch")
            if self.epochs_completed == 0:
                emas[g] = current
            else:
                emas[g] = self.beta * self.ema[g] + (1.0 - self.beta) * current
        self.ema = emas
        self._sums = {g: 0.0 for g in self.groups}
        self._counts = {g: 0 for g in self.groups}
        self.epochs_completed += 1
        return dict(emas)

    def alpha(self, group) -> float:
        """Relative gap of the group's smoothed loss against the group average."""
        if group not in self.ema:
            raise DataError(f"unknown group {group!r}")
        if any(self.ema[g] is None for g in self.groups):
            raise DataError("alpha undefined before the first completed epoch")
        avg = sum(self.ema[g] for g in self.groups) / len(self.groups)
        if abs(avg) <= ALPHA_EPS:
            raise NumericalError("degenerate losses: group average is ~0")
        return (self.ema[group] - avg) / avg

    def state(self) -> dict:
        return {
            "beta": self.beta,
            "ema": {str(g): self.ema[g] for g in self.groups},
            "epochs_completed": self.epochs_completed,
        }

    @classmethod
    def from_state(cls, state: dict) -> "GroupLossTracker":
        tracker = cls(beta=state["beta"], groups=tuple(int(g) for g in state["ema"]))
        tracker.ema = {int(g): v for g, v in state["ema"].items()}
        tracker.epochs_completed = int(state["epochs_completed"])
        return tracker


def temperature(alpha: float, epsilon: float) -> float:
    """Softmax temperature exp(-epsilon * alpha); 1 when epsilon is 0."""
    if epsilon < 0:
        raise DataError("epsilon must be >= 0")
    return math.exp(-epsilon * alpha)


class NegativePool:
    """Per-user arrays of items eligible as negatives (training positives
    excluded; validation/test positives stay in, being unknown at train time).

    Eligible arrays are stored back to back with offsets so batched draws
    stay vectorized.
    """

    def __init__(self, n_items: int, train_pairs, n_users: int):
        self.n_items = n_items
        positives = [[] for _ in range(n_users)]
        for u, i in train_pairs:
            positives[u].append(i)
        lengths = np.empty(n_users, dtype=np.int64)
        chunks = []
        all_items = np.arange(n_items, dtype=np.int64)
        for u in range(n_users):
            elig = np.setdiff1d(all_items, np.asarray(positives[u], dtype=np.int64))
            lengths[u] = len(elig)
            chunks.append(elig)
        self.lengths = lengths
        self.starts = np.zeros(n_users, dtype=np.int64)
        np.cumsum(lengths[:-1], out=self.starts[1:])
        self.flat = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)

    def eligible(self, user: int) -> np.ndarray:
        s = self.starts[user]
        return self.flat[s: s + self.lengths[user]]


def build_candidates(pool: NegativePool, user: int, size: int, rng) -> np.ndarray:
    """Uniform sample without replacement from the user's eligible items;
    shrinks to all eligible items when fewer than ``size`` remain.
    """
    elig = pool.eligible(user)
    if len(elig) == 0:
        raise DataError(f"user {user} has no eligible negative items")
    if len(elig) <= size:
        return elig.copy()
    return rng.choice(elig, size=size, replace=False)


def _rows_with_duplicates(idx: np.ndarray) -> np.ndarray:
    s = np.sort(idx, axis=1)
    return (s[:, 1:] == s[:, :-1]).any(axis=1)


def batch_candidates(pool: NegativePool, users: np.ndarray, size: int, rng):
    """Vectorized candidate draw for a batch of users.

    Returns (items, counts): an (n, size) matrix of item ids (-1 padding for
    shrunk rows) and the per-row candidate count. Rows draw index tuples
    uniformly and reject duplicates, which is equivalent to sampling without
    replacement.
    """
    users = np.asarray(users, dtype=np.int64)
    lens = pool.lengths[users]
    if np.any(lens == 0):
        bad = users[lens == 0][0]
        raise DataError(f"user {bad} has no eligible negative items")
    n = len(users)
    items = np.full((n, size), -1, dtype=np.int64)
    counts = np.minimum(lens, size)

    take_all = lens <= size
    fast = lens >= 2 * size  # rejection redraws stay cheap
    slow = ~take_all & ~fast

    if np.any(fast):
        highs = lens[fast][:, None]
        idx = rng.integers(0, highs, size=(int(fast.sum()), size))
        bad = _rows_with_duplicates(idx)
        while np.any(bad):
            idx[bad] = rng.integers(0, highs[bad], size=(int(bad.sum()), size))
            bad = _rows_with_duplicates(idx)
        items[fast] = pool.flat[pool.starts[users[fast]][:, None] + idx]

    for row in np.nonzero(take_all)[0]:
        elig = pool.eligible(users[row])
        items[row, : len(elig)] = elig
    for row in np.nonzero(slow)[0]:
        items[row] = rng.choice(pool.eligible(users[row]), size=size, replace=False)
    return items, counts


def sampling_distribution(backbone, user: int, candidates, tau: float) -> np.ndarray:
    """Softmax over the candidate scores at temperature tau."""
    if tau <= 0:
        raise NumericalError("temperature must be positive")
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise DataError("empty candidate set")
    scores = backbone.item_target[candidates] @ backbone.user_target_vector(user)
    return softmax(scores / tau)


def sample_negative(backbone, tracker: GroupLossTracker, cfg: SamplerConfig,
                    pool: NegativePool, user: int, group, rng) -> int:
    """Draw one negative for the user.

    Before the first completed epoch the draw is uniform over the candidate
    set; afterwards candidates are weighted by exp(score / tau) with tau set
    by the user's group gap.
    """
    candidates = build_candidates(pool, user, cfg.candidate_size, rng)
    if tracker.epochs_completed < 1:
        return int(candidates[rng.integers(0, len(candidates))])
    tau = temperature(tracker.alpha(group), cfg.epsilon)
    probs = sampling_distribution(backbone, user, candidates, tau)
    return int(candidates[_draw_rows(probs[None, :], rng)[0]])


def _draw_rows(probs: np.ndarray, rng) -> np.ndarray:
    """Inverse-CDF draw of one column index per row."""
    c = np.cumsum(probs, axis=1)
    r = rng.random(probs.shape[0])
    j = (c < r[:, None]).sum(axis=1)
    return np.minimum(j, probs.shape[1] - 1)


def batch_sample_negatives(backbone, pool: NegativePool, users: np.ndarray,
                           taus: np.ndarray, size: int, rng,
                           uniform: bool = False) -> np.ndarray:
    """One negative per row, drawn from a fresh candidate set per row.

    With ``uniform`` the candidate scores are ignored (plain random
    sampling); otherwise a softmax at the per-row temperature is used.
    """
    users = np.asarray(users, dtype=np.int64)
    items, counts = batch_candidates(pool, users, size, rng)
    if uniform:
        j = (rng.random(len(users)) * counts).astype(np.int64)
        j = np.minimum(j, counts - 1)
        return items[np.arange(len(users)), j]
    vecs = backbone.user_target_vectors(users)
    safe_items = np.maximum(items, 0)
    scores = np.einsum("bd,bkd->bk", vecs, backbone.item_target[safe_items])
    scores[items < 0] = -np.inf
    probs = softmax(scores / taus[:, None])
    j = _draw_rows(probs, rng)
    return items[np.arange(len(users)), j]
