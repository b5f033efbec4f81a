"""Training loop: BPR objective, sparse-friendly Adam, group-aware negative
sampling, per-batch gain redistribution penalty, and the once-per-epoch
estimator fit.

The main objective updates the backbone only; the estimator fit updates the
estimator only. Both partitions can be hash-checked every step.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from .backbone import Backbone, init as init_backbone
from .data import G0, G1, CrossDomainDataset, SplitDataset, split_per_user
from .errors import DataError, NumericalError
from .gain import EpochSnapshot, GainEstimator, estimate_gain, estimator_step, redistribution_grads
from .numerics import sigmoid, softplus
from .sampler import (
    GroupLossTracker,
    NegativePool,
    SamplerConfig,
    batch_sample_negatives,
    temperature,
)
from .seeding import make_rng


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2048
    l2_reg: float = 1e-4
    epochs: int = 30
    gamma: float = 0.5
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    beta: float = 0.9
    use_alpha: bool = True
    use_fair_sampling: bool = True
    use_redistribution: bool = True
    use_estimator_loss: bool = True
    include_source: bool = True
    seed: int = 0
    patience: int = 10
    estimator_hidden: tuple = (128, 64)
    estimator_dropout: float = 0.2
    estimator_lr: float = 0.001
    partition_checks: bool = False
    snapshot_every: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.estimator_lr <= 0:
            raise DataError("learning rates must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.l2_reg < 0 or self.gamma < 0:
            raise DataError("l2_reg and gamma must be >= 0")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        self.sampler.validate()
        return self


class Adam:
    """Adam with lazy row updates for embedding tables.

    Rows with zero gradient in a step are untouched: their moments do not
    decay. Duplicate rows in a sparse gradient are summed first, matching
    the dense computation.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def register(self, name: str, shape):
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        self.t[name] = 0

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, rows=None):
        if name not in self.m:
            self.register(name, param.shape)
        if rows is None:
            if grad.shape != param.shape:
                raise DataError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        else:
            rows = np.asarray(rows, dtype=np.int64)
            if grad.shape != (len(rows),) + param.shape[1:]:
                raise DataError("sparse gradient shape mismatch")
            uniq, inv = np.unique(rows, return_inverse=True)
            agg = np.zeros((len(uniq),) + param.shape[1:])
            np.add.at(agg, inv, grad)
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m[uniq] = self.beta1 * m[uniq] + (1 - self.beta1) * agg
            v[uniq] = self.beta2 * v[uniq] + (1 - self.beta2) * agg * agg
            m_hat = m[uniq] / (1 - self.beta1 ** t)
            v_hat = v[uniq] / (1 - self.beta2 ** t)
            param[uniq] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out


def adam_step(state: Adam, name: str, param: np.ndarray, grad: np.ndarray, rows=None):
    """Apply one Adam update in place; see Adam.step."""
    state.step(name, param, grad, rows=rows)


def bpr_terms(user_vecs, pos_vecs, neg_vecs, l2_reg: float):
    """Vectorized BPR loss and analytic gradients.

    loss = softplus(-(u.(i - j))) + l2 * (|u|^2 + |i|^2 + |j|^2), per row.
    Returns (loss, rank_loss, g_user, g_pos, g_neg).
    """
    diff = pos_vecs - neg_vecs
    gap = np.einsum("bd,bd->b", user_vecs, diff)
    rank_loss = softplus(-gap)
    s = -sigmoid(-gap)
    g_user = s[:, None] * diff + 2.0 * l2_reg * user_vecs
    g_pos = s[:, None] * user_vecs + 2.0 * l2_reg * pos_vecs
    g_neg = -s[:, None] * user_vecs + 2.0 * l2_reg * neg_vecs
    loss = rank_loss + l2_reg * (
        np.einsum("bd,bd->b", user_vecs, user_vecs)
        + np.einsum("bd,bd->b", pos_vecs, pos_vecs)
        + np.einsum("bd,bd->b", neg_vecs, neg_vecs)
    )
    return loss, rank_loss, g_user, g_pos, g_neg


def bpr_loss(backbone: Backbone, user: int, pos_item: int, neg_item: int,
             l2_reg: float = 0.0, domain: str = "target"):
    """Single-triple BPR loss and gradients (target or source domain).

    Returns (loss, grads) with grads keyed by (table, row).
    """
    if domain == "target":
        u = backbone.user_target_vectors([user])
        slot = backbone.target_slot[user]
        table = backbone.item_target
        item_name = "item_target"
        for item in (pos_item, neg_item):
            if not 0 <= item < backbone.n_items_target:
                raise DataError(f"target item {item} out of range")
    elif domain == "source":
        u = backbone.source_user_vectors([user])
        slot = backbone.source_slot[user]
        table = backbone.item_source
        item_name = "item_source"
        for item in (pos_item, neg_item):
            if not 0 <= item < backbone.n_items_source:
                raise DataError(f"source item {item} out of range")
    else:
        raise DataError(f"unknown domain {domain!r}")
    loss, _, g_u, g_i, g_j = bpr_terms(u, table[[pos_item]], table[[neg_item]], l2_reg)
    grads = {
        ("user_pool", int(slot)): g_u[0],
        (item_name, int(pos_item)): g_i[0],
    }
    key = (item_name, int(neg_item))
    grads[key] = grads.get(key, 0.0) + g_j[0]
    return float(loss[0]), grads


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_rec: float
    loss_redist: float
    ema_g0: float
    ema_g1: float
    alpha_g0: float
    gain_g0: float
    gain_g1: float
    estimator_loss: float | None
    val_ndcg10: float
    n_samples: int = 0
    fair_draws: int = 0
    seconds: float = 0.0

    def log_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_total": self.loss_total,
            "loss_rec": self.loss_rec,
            "loss_redist": self.loss_redist,
            "ema_g0": self.ema_g0,
            "ema_g1": self.ema_g1,
            "alpha_g0": self.alpha_g0,
            "gain_g0": self.gain_g0,
            "gain_g1": self.gain_g1,
            "estimator_loss": self.estimator_loss,
            "val_ndcg10": self.val_ndcg10,
        }


@dataclass
class TrainedModel:
    backbone: Backbone
    estimator: GainEstimator
    tracker: GroupLossTracker
    log: list
    best_epoch: int
    best_val_ndcg10: float
    split: SplitDataset
    optimizer: Adam = None
    estimator_optimizer: Adam = None
    final_backbone: Backbone = None


class _BatchPlan:
    """Concrete triples for one mini-batch: negatives already drawn, so the
    objective is a deterministic function of the parameters."""

    __slots__ = ("domains", "users", "pos", "neg", "penalty_users", "penalty_items",
                 "penalty_groups")

    def __init__(self, domains, users, pos, neg, penalty_users, penalty_items, penalty_groups):
        self.domains = domains
        self.users = users
        self.pos = pos
        self.neg = neg
        self.penalty_users = penalty_users
        self.penalty_items = penalty_items
        self.penalty_groups = penalty_groups


def batch_objective(backbone: Backbone, estimator: GainEstimator, plan: _BatchPlan,
                    cfg: TrainConfig, want_grads: bool = True):
    """Objective value (sum of per-sample BPR losses plus gamma times the
    redistribution penalty) with optional analytic gradients.

    Returns (total, rec_sum, penalty, rank_losses_target, grads).
    """
    tgt = plan.domains == 1
    src = ~tgt
    grads = []
    rec_sum = 0.0
    rank_target = np.empty(int(tgt.sum()))

    if np.any(tgt):
        users = plan.users[tgt]
        u = backbone.user_target_vectors(users)
        pos, neg = plan.pos[tgt], plan.neg[tgt]
        loss, rank, g_u, g_i, g_j = bpr_terms(
            u, backbone.item_target[pos], backbone.item_target[neg], cfg.l2_reg
        )
        rec_sum += float(loss.sum())
        rank_target = rank
        if want_grads:
            slots = backbone.target_slot[users]
            grads.append(("user_pool", slots, g_u))
            grads.append(("item_target", pos, g_i))
            grads.append(("item_target", neg, g_j))
    if np.any(src):
        users = plan.users[src]
        u = backbone.source_user_vectors(users)
        pos, neg = plan.pos[src], plan.neg[src]
        loss, _, g_u, g_i, g_j = bpr_terms(
            u, backbone.item_source[pos], backbone.item_source[neg], cfg.l2_reg
        )
        rec_sum += float(loss.sum())
        if want_grads:
            slots = backbone.source_slot[users]
            grads.append(("user_pool", slots, g_u))
            grads.append(("item_source", pos, g_i))
            grads.append(("item_source", neg, g_j))

    # The recommendation part sums per-sample losses, so the squared gain gap
    # is weighted by the batch sample count to keep gamma on the scale of the
    # per-sample objective.
    penalty = 0.0
    scale = float(len(plan.users))
    if cfg.use_redistribution and cfg.gamma > 0 and len(plan.penalty_users) > 0:
        if want_grads:
            raw, pgrads = redistribution_grads(
                backbone, estimator, plan.penalty_users, plan.penalty_items, plan.penalty_groups
            )
            penalty = scale * raw
            for table, rows, g in pgrads:
                grads.append((table, rows, cfg.gamma * scale * g))
        else:
            report = estimate_gain(
                backbone, estimator, plan.penalty_users, plan.penalty_items, plan.penalty_groups
            )
            if report.n_samples[G0] > 0 and report.n_samples[G1] > 0:
                penalty = scale * report.redistribution_loss

    total = rec_sum + cfg.gamma * penalty
    return total, rec_sum, penalty, rank_target, grads


def _plan_batch(backbone, pools, domains, users, pos, groups_arr, tracker, cfg, rng):
    """Draw negatives for a shuffled batch and collect the penalty samples."""
    tgt = domains == 1
    neg = np.empty(len(users), dtype=np.int64)
    fair_draws = 0
    if np.any(tgt):
        t_users = users[tgt]
        fair = cfg.use_fair_sampling and tracker.epochs_completed >= 1
        if cfg.use_fair_sampling:
            if fair:
                if cfg.use_alpha:
                    taus = np.array(
                        [
                            temperature(tracker.alpha(G0), cfg.sampler.epsilon),
                            temperature(tracker.alpha(G1), cfg.sampler.epsilon),
                        ]
                    )[groups_arr[t_users]]
                else:
                    taus = np.ones(len(t_users))
                neg[tgt] = batch_sample_negatives(
                    backbone, pools["target"], t_users, taus, cfg.sampler.candidate_size, rng
                )
                fair_draws = len(t_users)
            else:
                neg[tgt] = batch_sample_negatives(
                    backbone, pools["target"], t_users, None,
                    cfg.sampler.candidate_size, rng, uniform=True,
                )
        else:
            neg[tgt] = batch_sample_negatives(
                backbone, pools["target"], t_users, None,
                cfg.sampler.candidate_size, rng, uniform=True,
            )
    if np.any(~tgt):
        s_users = users[~tgt]
        neg[~tgt] = batch_sample_negatives(
            backbone, pools["source"], s_users, None,
            cfg.sampler.candidate_size, rng, uniform=True,
        )

    overlap_tgt = tgt & (backbone.target_to_source[users] >= 0)
    plan = _BatchPlan(
        domains=domains,
        users=users,
        pos=pos,
        neg=neg,
        penalty_users=users[overlap_tgt],
        penalty_items=pos[overlap_tgt],
        penalty_groups=groups_arr[users[overlap_tgt]],
    )
    return plan, fair_draws


def train_epoch(ds: CrossDomainDataset, split: SplitDataset, backbone: Backbone,
                estimator: GainEstimator, tracker: GroupLossTracker, cfg: TrainConfig,
                rng, pools, adam: Adam, est_adam: Adam, epoch: int,
                est_rng=None, debug_record=None) -> EpochStats:
    """One pass over the shuffled training pool, then the tracker epoch fold,
    the epoch-level gain report, and (if enabled) the estimator fit.
    """
    started = time.perf_counter()
    groups_arr = ds.group_array()
    snapshot = EpochSnapshot.take(backbone)

    tgt_pairs = split.target_train
    src_pairs = split.source_train if cfg.include_source else []
    n = len(tgt_pairs) + len(src_pairs)
    if n == 0:
        raise DataError("no training interactions")
    domains = np.concatenate(
        [np.ones(len(tgt_pairs), dtype=np.int64), np.zeros(len(src_pairs), dtype=np.int64)]
    )
    users = np.fromiter(
        (p[0] for p in tgt_pairs + src_pairs), dtype=np.int64, count=n
    )
    pos = np.fromiter((p[1] for p in tgt_pairs + src_pairs), dtype=np.int64, count=n)
    k = cfg.sampler.negatives_per_positive
    if k > 1:
        # each positive is replicated; every copy draws its own candidate set
        domains = np.repeat(domains, k)
        users = np.repeat(users, k)
        pos = np.repeat(pos, k)
        n *= k
    order = rng.permutation(n)
    domains, users, pos = domains[order], users[order], pos[order]

    est_hash = estimator.checksum() if cfg.partition_checks else None
    sum_rec = 0.0
    sum_penalty = 0.0
    sum_total = 0.0
    fair_draws = 0
    for lo in range(0, n, cfg.batch_size):
        hi = min(lo + cfg.batch_size, n)
        plan, drew = _plan_batch(
            backbone, pools, domains[lo:hi], users[lo:hi], pos[lo:hi],
            groups_arr, tracker, cfg, rng,
        )
        fair_draws += drew
        total, rec, penalty, rank_target, grads = batch_objective(
            backbone, estimator, plan, cfg, want_grads=True
        )
        if not np.isfinite(total):
            raise NumericalError(f"non-finite batch loss at epoch {epoch}")
        sum_rec += rec
        sum_penalty += penalty
        sum_total += total

        tgt = plan.domains == 1
        if np.any(tgt):
            tracker.accumulate_many(groups_arr[plan.users[tgt]], rank_target)
        params = backbone.parameters()
        for table, rows, g in grads:
            adam.step(table, params[table], g, rows=rows)
        if cfg.partition_checks and estimator.checksum() != est_hash:
            raise AssertionError("training step modified estimator parameters")
        if debug_record is not None:
            debug_record.append(
                {"plan": plan, "total": total, "rec": rec, "penalty": penalty}
            )

    emas = tracker.end_epoch()
    alpha0 = tracker.alpha(G0)

    # Epoch-level gain report over every overlapping target training positive.
    all_users = np.fromiter((p[0] for p in tgt_pairs), dtype=np.int64, count=len(tgt_pairs))
    all_items = np.fromiter((p[1] for p in tgt_pairs), dtype=np.int64, count=len(tgt_pairs))
    report = estimate_gain(backbone, estimator, all_users, all_items, groups_arr[all_users])

    est_loss = None
    if cfg.use_estimator_loss:
        t_ids, s_ids = ds.overlap_arrays()
        backbone_hash = backbone.checksum()
        est_loss = estimator_step(
            estimator, snapshot, backbone.user_emb_target(), t_ids, s_ids,
            est_adam, est_rng if est_rng is not None else rng, batch_size=cfg.batch_size,
        )
        if backbone.checksum() != backbone_hash:
            raise AssertionError("estimator fit modified backbone parameters")

    val_ndcg = metrics_mod.quick_ndcg_at_10(backbone, split, ds)
    return EpochStats(
        epoch=epoch,
        loss_total=sum_total,
        loss_rec=sum_rec,
        loss_redist=sum_penalty,
        ema_g0=emas[G0],
        ema_g1=emas[G1],
        alpha_g0=alpha0,
        gain_g0=report.delta_i[G0],
        gain_g1=report.delta_i[G1],
        estimator_loss=est_loss,
        val_ndcg10=val_ndcg,
        n_samples=n,
        fair_draws=fair_draws,
        seconds=time.perf_counter() - started,
    )


def train(ds: CrossDomainDataset, cfg: TrainConfig, d: int = 32, mode: str = "shared",
          split: SplitDataset = None, snapshot_dir=None) -> TrainedModel:
    """Full training run with early stopping on validation NDCG@10.

    With ``cfg.snapshot_every`` > 0 and a snapshot directory, embedding
    snapshots are written every that many epochs.
    """
    cfg.validate()
    if split is None:
        split = split_per_user(ds, cfg.seed)
    backbone = init_backbone(ds, d, mode, cfg.seed)
    estimator = GainEstimator(
        d, hidden=cfg.estimator_hidden, dropout=cfg.estimator_dropout, seed=cfg.seed
    )
    tracker = GroupLossTracker(beta=cfg.beta)
    pools = {
        "target": NegativePool(ds.n_items_target, split.target_train, ds.n_users_target),
        "source": NegativePool(ds.n_items_source, split.source_train, ds.n_users_source),
    }
    adam = Adam(cfg.learning_rate)
    est_adam = Adam(cfg.estimator_lr)
    rng = make_rng(cfg.seed, "train")
    est_rng = make_rng(cfg.seed, "estimator-dropout")

    log = []
    best_epoch = -1
    best_val = -np.inf
    best_backbone = backbone.copy()
    since_best = 0
    for epoch in range(cfg.epochs):
        stats = train_epoch(
            ds, split, backbone, estimator, tracker, cfg, rng, pools, adam, est_adam,
            epoch, est_rng=est_rng,
        )
        log.append(stats)
        if cfg.snapshot_every > 0 and snapshot_dir is not None \
                and (epoch + 1) % cfg.snapshot_every == 0:
            from .backbone import save_snapshot

            save_snapshot(backbone, f"{snapshot_dir}/snapshot_epoch_{epoch}.bin")
        if stats.val_ndcg10 > best_val:
            best_val = stats.val_ndcg10
            best_epoch = epoch
            best_backbone = backbone.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_epoch < 0:
        best_backbone = backbone.copy()
        best_val = float("nan")
    return TrainedModel(
        backbone=best_backbone,
        estimator=estimator,
        tracker=tracker,
        log=log,
        best_epoch=best_epoch,
        best_val_ndcg10=float(best_val),
        split=split,
        optimizer=adam,
        estimator_optimizer=est_adam,
        final_backbone=backbone,
    )


def write_run_log(path, log):
    """Newline-delimited JSON, one record per epoch, stable key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for stats in log:
            fh.write(json.dumps(stats.log_record(), sort_keys=True))
            fh.write("\n")


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Named training variants used by the comparison harness."""
    if variant == "full":
        return replace(base)
    if variant == "no_alpha":
        return replace(base, use_alpha=False)
    if variant == "no_fair_sampling":
        return replace(base, use_fair_sampling=False)
    if variant == "no_redistribution":
        return replace(base, use_redistribution=False)
    if variant == "no_estimator_loss":
        return replace(base, use_estimator_loss=False)
    if variant == "plain":
        return replace(
            base, use_alpha=False, use_fair_sampling=False,
            use_redistribution=False, use_estimator_loss=False,
        )
    if variant == "target_only":
        return replace(
            base, use_alpha=False, use_fair_sampling=False,
            use_redistribution=False, use_estimator_loss=False, include_source=False,
        )
    raise DataError(f"unknown variant {variant!r}")


ABLATION_VARIANTS = ("full", "no_alpha", "no_fair_sampling", "no_redistribution",
                     "no_estimator_loss")
