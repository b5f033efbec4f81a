"""Two-domain implicit-feedback data model, TSV ingestion, per-user splits,
and a synthetic generator with controllable group-disparity knobs.

Interaction files are TSV with a header naming ``user_id`` and ``item_id``
columns (extra columns ignored). Attribute files are TSV with ``user_id``
and ``attribute`` columns carrying exactly two distinct values; the
lexicographically smaller value becomes group 0. Raw identifiers are
densified in first-seen order and the mapping is retained for reports.
Users appearing in both domains' interaction files (same raw id) are the
overlapping users.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeding import make_rng

G0 = 0
G1 = 1

# Base ranking-noise scales of the synthetic generator, as multiples of the
# latent score standard deviation sqrt(latent_dim). Group g1's source-domain
# noise is additionally multiplied by SynthConfig.source_disparity.
SYNTH_NOISE_TARGET = 0.5
SYNTH_NOISE_SOURCE = 0.75


@dataclass
class LoadedInteractions:
    """Deduplicated (user, item) pairs plus dense-index -> raw-id maps."""

    pairs: list
    user_ids: list
    item_ids: list


def _read_tsv_rows(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < len(header) or any(c == "" for c in cols[: len(header)]):
            raise DataError(f"{path}:{lineno}: malformed row {line!r}")
        rows.append((lineno, cols))
    return header, rows


def load_interactions(path, id_remap: bool = True) -> LoadedInteractions:
    """Parse an interactions TSV into deduplicated dense (user, item) pairs.

    With ``id_remap`` raw ids are densified in first-seen order; otherwise
    the raw ids must already be integers and are used as-is.
    """
    header, rows = _read_tsv_rows(path)
    try:
        ucol = header.index("user_id")
        icol = header.index("item_id")
    except ValueError:
        raise DataError(f"{path}: header must name user_id and item_id columns")
    if not rows:
        raise DataError(f"{path}: no interactions")

    pairs = []
    seen = set()
    user_map: dict = {}
    item_map: dict = {}
    user_ids: list = []
    item_ids: list = []
    for lineno, cols in rows:
        ru, ri = cols[ucol], cols[icol]
        if id_remap:
            if ru not in user_map:
                user_map[ru] = len(user_ids)
                user_ids.append(ru)
            if ri not in item_map:
                item_map[ri] = len(item_ids)
                item_ids.append(ri)
            u, i = user_map[ru], item_map[ri]
        else:
            try:
                u, i = int(ru), int(ri)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer id with id_remap off")
            if u < 0 or i < 0:
                raise DataError(f"{path}:{lineno}: negative id")
        if (u, i) not in seen:
            seen.add((u, i))
            pairs.append((u, i))
    if not id_remap:
        user_ids = [str(u) for u in range(max(p[0] for p in pairs) + 1)]
        item_ids = [str(i) for i in range(max(p[1] for p in pairs) + 1)]
    return LoadedInteractions(pairs=pairs, user_ids=user_ids, item_ids=item_ids)


def load_attributes(path):
    """Parse an attributes TSV into {raw user id -> group} plus label names.

    The file must carry exactly two distinct attribute values; the
    lexicographically smaller one becomes group 0. A user listed twice with
    conflicting values is an error.
    """
    header, rows = _read_tsv_rows(path)
    try:
        ucol = header.index("user_id")
        acol = header.index("attribute")
    except ValueError:
        raise DataError(f"{path}: header must name user_id and attribute columns")
    raw = {}
    for lineno, cols in rows:
        ru, attr = cols[ucol], cols[acol]
        if ru in raw and raw[ru] != attr:
            raise DataError(f"{path}:{lineno}: conflicting attribute for user {ru!r}")
        raw[ru] = attr
    values = sorted(set(raw.values()))
    if len(values) != 2:
        raise DataError(
            f"{path}: expected exactly 2 distinct attribute values, found {len(values)}"
        )
    mapping = {ru: (G0 if attr == values[0] else G1) for ru, attr in raw.items()}
    return mapping, (values[0], values[1])


@dataclass
class CrossDomainDataset:
    """Users, items, and implicit positives for a source and target domain.

    Index spaces are dense per domain. ``overlap`` maps target user ids to
    source user ids for users active in both domains. ``groups`` labels every
    target user with 0 or 1.
    """

    n_users_source: int
    n_users_target: int
    n_items_source: int
    n_items_target: int
    interactions_source: list
    interactions_target: list
    overlap: dict
    groups: dict
    group_labels: tuple = ("g0", "g1")
    raw_ids: dict = field(default_factory=dict, repr=False)

    def validate(self):
        for u, i in self.interactions_source:
            if not (0 <= u < self.n_users_source and 0 <= i < self.n_items_source):
                raise DataError(f"source interaction ({u},{i}) out of range")
        for u, i in self.interactions_target:
            if not (0 <= u < self.n_users_target and 0 <= i < self.n_items_target):
                raise DataError(f"target interaction ({u},{i}) out of range")
        if len(set(self.interactions_source)) != len(self.interactions_source):
            raise DataError("duplicate (user, item) pair in source domain")
        if len(set(self.interactions_target)) != len(self.interactions_target):
            raise DataError("duplicate (user, item) pair in target domain")
        if len(set(self.overlap.values())) != len(self.overlap):
            raise DataError("overlap map is not injective")
        for t, s in self.overlap.items():
            if not 0 <= t < self.n_users_target:
                raise DataError(f"overlap key {t} not a target user")
            if not 0 <= s < self.n_users_source:
                raise DataError(f"overlap value {s} not a source user")
        missing = [u for u in range(self.n_users_target) if u not in self.groups]
        if missing:
            raise DataError(
                f"{len(missing)} target users lack a group label (first: {missing[0]})"
            )
        if set(self.groups.values()) != {G0, G1}:
            raise DataError("expected exactly two distinct group labels among target users")
        return self

    def group_array(self) -> np.ndarray:
        """Group label per target user as an int array."""
        g = np.zeros(self.n_users_target, dtype=np.int64)
        for u, lab in self.groups.items():
            g[u] = lab
        return g

    def overlap_arrays(self):
        """Overlap as parallel (target ids, source ids) arrays, sorted by target id."""
        ts = sorted(self.overlap.items())
        t = np.array([p[0] for p in ts], dtype=np.int64)
        s = np.array([p[1] for p in ts], dtype=np.int64)
        return t, s


def build_dataset(source: LoadedInteractions, target: LoadedInteractions,
                  attrs: dict, group_labels=("g0", "g1")) -> CrossDomainDataset:
    """Assemble a validated dataset from loaded files.

    Overlap is derived from raw user ids shared between the two interaction
    files. Every target user must appear in ``attrs`` (keyed by raw id);
    attribute entries for unknown users are ignored.
    """
    source_users = {ru: idx for idx, ru in enumerate(source.user_ids)}
    overlap = {}
    for t_idx, ru in enumerate(target.user_ids):
        if ru in source_users:
            overlap[t_idx] = source_users[ru]
    groups = {}
    for t_idx, ru in enumerate(target.user_ids):
        if ru not in attrs:
            raise DataError(f"target user {ru!r} missing from the attribute file")
        groups[t_idx] = attrs[ru]
    ds = CrossDomainDataset(
        n_users_source=len(source.user_ids),
        n_users_target=len(target.user_ids),
        n_items_source=len(source.item_ids),
        n_items_target=len(target.item_ids),
        interactions_source=list(source.pairs),
        interactions_target=list(target.pairs),
        overlap=overlap,
        groups=groups,
        group_labels=tuple(group_labels),
        raw_ids={
            "users_source": list(source.user_ids),
            "users_target": list(target.user_ids),
            "items_source": list(source.item_ids),
            "items_target": list(target.item_ids),
        },
    )
    return ds.validate()


def load_dataset(source_path, target_path, attrs_path) -> CrossDomainDataset:
    source = load_interactions(source_path)
    target = load_interactions(target_path)
    attrs, labels = load_attributes(attrs_path)
    return build_dataset(source, target, attrs, group_labels=labels)


def write_interactions(path, pairs, user_ids=None, item_ids=None):
    """Write pairs as TSV, mapping dense ids through the given raw-id lists."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\n")
        for u, i in pairs:
            ru = user_ids[u] if user_ids is not None else str(u)
            ri = item_ids[i] if item_ids is not None else str(i)
            fh.write(f"{ru}\t{ri}\n")


def write_attributes(path, groups, user_ids=None, group_labels=("A", "B")):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tattribute\n")
        for u in sorted(groups):
            ru = user_ids[u] if user_ids is not None else str(u)
            fh.write(f"{ru}\t{group_labels[groups[u]]}\n")


@dataclass
class SplitDataset:
    """Per-user interaction splits: 8:2 for source, 8:1:1 for target."""

    source_train: list
    source_val: list
    target_train: list
    target_val: list
    target_test: list

    def all_source(self):
        return self.source_train + self.source_val

    def all_target(self):
        return self.target_train + self.target_val + self.target_test


def _per_user_lists(pairs):
    by_user: dict = {}
    for u, i in pairs:
        by_user.setdefault(u, []).append(i)
    return by_user


def split_per_user(ds: CrossDomainDataset, seed: int) -> SplitDataset:
    """Shuffle each user's items with a seeded RNG, then split by ratio with
    floor rounding; the training portion takes the remainder, so every user
    with at least one interaction keeps at least one training pair.
    """
    rng = make_rng(seed, "split")
    src_train, src_val = [], []
    by_user_source = _per_user_lists(ds.interactions_source)
    for u in sorted(by_user_source):
        items = list(by_user_source[u])
        rng.shuffle(items)
        n = len(items)
        n_val = int(np.floor(0.2 * n))
        for i in items[: n - n_val]:
            src_train.append((u, i))
        for i in items[n - n_val:]:
            src_val.append((u, i))
    tgt_train, tgt_val, tgt_test = [], [], []
    by_user_target = _per_user_lists(ds.interactions_target)
    for u in sorted(by_user_target):
        items = list(by_user_target[u])
        rng.shuffle(items)
        n = len(items)
        n_val = int(np.floor(0.1 * n))
        n_test = int(np.floor(0.1 * n))
        n_train = n - n_val - n_test
        assert n_train >= 1
        for i in items[:n_train]:
            tgt_train.append((u, i))
        for i in items[n_train: n_train + n_val]:
            tgt_val.append((u, i))
        for i in items[n_train + n_val:]:
            tgt_test.append((u, i))
    return SplitDataset(src_train, src_val, tgt_train, tgt_val, tgt_test)


@dataclass
class SynthConfig:
    """Knobs of the synthetic two-domain generator.

    ``source_disparity`` multiplies the ranking-noise scale of group g1's
    source-domain signal (1 means both groups are treated identically).
    ``domain_shift`` in [0, 1] rotates and translates the source item latent
    space away from the target's. ``source_density_ratio`` mirrors the
    density asymmetry of real two-domain logs, where source histories are
    several times longer than target ones: source users receive
    ``source_density_ratio * interactions_per_user`` positives.
    """

    n_users_source: int = 1000
    n_users_target: int = 2000
    overlap_fraction: float = 0.5
    n_items_source: int = 1000
    n_items_target: int = 1000
    latent_dim: int = 16
    group_split: float = 0.5
    source_disparity: float = 1.0
    domain_shift: float = 0.2
    interactions_per_user: int = 20
    source_density_ratio: int = 1
    rng_seed: int = 0

    def validate(self):
        if min(self.n_users_source, self.n_users_target,
               self.n_items_source, self.n_items_target,
               self.latent_dim, self.interactions_per_user) <= 0:
            raise DataError("all synthetic counts must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise DataError("overlap_fraction must lie in [0, 1]")
        if not 0.0 < self.group_split < 1.0:
            raise DataError("group_split must lie in (0, 1)")
        if self.source_disparity < 1.0:
            raise DataError("source_disparity must be >= 1")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise DataError("domain_shift must lie in [0, 1]")
        if self.source_density_ratio < 1:
            raise DataError("source_density_ratio must be >= 1")
        if self.interactions_per_user > self.n_items_target:
            raise DataError("interactions_per_user exceeds the item count")
        if self.interactions_per_user * self.source_density_ratio > self.n_items_source:
            raise DataError("interactions_per_user exceeds the item count")
        n_overlap = int(round(self.overlap_fraction * self.n_users_target))
        if n_overlap > self.n_users_source:
            raise DataError("overlap_fraction implies more overlapping users than source users")
        return self


def _cayley_rotation(skew: np.ndarray, strength: float) -> np.ndarray:
    # Orthogonal for any strength, identity at strength 0.
    k = skew.shape[0]
    b = 0.5 * strength * skew
    eye = np.eye(k)
    return np.linalg.solve(eye + b, eye - b)


def _synth_internals(cfg: SynthConfig):
    cfg.validate()
    rng = make_rng(cfg.rng_seed, "synth")
    k = cfg.latent_dim
    n_overlap = int(round(cfg.overlap_fraction * cfg.n_users_target))

    user_t = rng.standard_normal((cfg.n_users_target, k))
    user_s_extra = rng.standard_normal((cfg.n_users_source - n_overlap, k))
    item_t = rng.standard_normal((cfg.n_items_target, k))
    item_s = rng.standard_normal((cfg.n_items_source, k))

    skew = rng.standard_normal((k, k))
    skew = skew - skew.T
    rot = _cayley_rotation(skew, cfg.domain_shift)
    translation = cfg.domain_shift * rng.standard_normal(k)
    item_s = item_s @ rot.T + translation

    perm = rng.permutation(cfg.n_users_target)
    n_g0 = int(round(cfg.group_split * cfg.n_users_target))
    groups = np.full(cfg.n_users_target, G1, dtype=np.int64)
    groups[perm[:n_g0]] = G0

    # Source user latents: overlapping target users keep their preference
    # vector (identity mapping t -> s for t < n_overlap); the rest are fresh.
    user_s = np.vstack([user_t[:n_overlap], user_s_extra])

    true_t = user_t @ item_t.T
    noisy_t = true_t + SYNTH_NOISE_TARGET * np.sqrt(k) * rng.standard_normal(true_t.shape)

    true_s = user_s @ item_s.T
    noise_mult = np.ones(cfg.n_users_source)
    noise_mult[:n_overlap] = np.where(groups[:n_overlap] == G1, cfg.source_disparity, 1.0)
    sigma_s = SYNTH_NOISE_SOURCE * np.sqrt(k) * noise_mult
    noisy_s = true_s + sigma_s[:, None] * rng.standard_normal(true_s.shape)

    return {
        "n_overlap": n_overlap,
        "groups": groups,
        "true_t": true_t,
        "noisy_t": noisy_t,
        "true_s": true_s,
        "noisy_s": noisy_s,
    }


def _top_items(scores: np.ndarray, count: int) -> np.ndarray:
    # Deterministic top-count per row; ties broken by ascending item id.
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :count]


def generate_synthetic(cfg: SynthConfig) -> CrossDomainDataset:
    """Generate a two-domain dataset whose positives are each user's top
    items under a noisy latent score; see SynthConfig for the knobs.
    """
    internals = _synth_internals(cfg)
    ipu = cfg.interactions_per_user
    top_t = _top_items(internals["noisy_t"], ipu)
    top_s = _top_items(internals["noisy_s"], ipu * cfg.source_density_ratio)

    interactions_target = []
    for u in range(cfg.n_users_target):
        for i in sorted(top_t[u]):
            interactions_target.append((u, int(i)))
    interactions_source = []
    for u in range(cfg.n_users_source):
        for i in sorted(top_s[u]):
            interactions_source.append((u, int(i)))

    n_overlap = internals["n_overlap"]
    overlap = {t: t for t in range(n_overlap)}
    groups = {u: int(internals["groups"][u]) for u in range(cfg.n_users_target)}

    raw_users_target = [f"u{t}" for t in range(cfg.n_users_target)]
    raw_users_source = [f"u{t}" for t in range(n_overlap)] + [
        f"s{j}" for j in range(cfg.n_users_source - n_overlap)
    ]
    ds = CrossDomainDataset(
        n_users_source=cfg.n_users_source,
        n_users_target=cfg.n_users_target,
        n_items_source=cfg.n_items_source,
        n_items_target=cfg.n_items_target,
        interactions_source=interactions_source,
        interactions_target=interactions_target,
        overlap=overlap,
        groups=groups,
        group_labels=("A", "B"),
        raw_ids={
            "users_source": raw_users_source,
            "users_target": raw_users_target,
            "items_source": [f"si{j}" for j in range(cfg.n_items_source)],
            "items_target": [f"ti{j}" for j in range(cfg.n_items_target)],
        },
    )
    return ds.validate()


def synthetic_rank_quality(cfg: SynthConfig):
    """Oracle source-domain ranking quality per group.

    For each overlapping user, measures the mean rank position (0-based,
    smaller is better) of the user's true top-``interactions_per_user``
    source items within the noisy ordering that generated the positives.
    Returns (mean over g0 users, mean over g1 users).
    """
    internals = _synth_internals(cfg)
    n_overlap = internals["n_overlap"]
    groups = internals["groups"]
    ipu = cfg.interactions_per_user
    true_top = _top_items(internals["true_s"][:n_overlap], ipu)
    noisy_order = np.argsort(-internals["noisy_s"][:n_overlap], axis=1, kind="stable")
    ranks = np.empty_like(noisy_order)
    rows = np.arange(n_overlap)[:, None]
    ranks[rows, noisy_order] = np.arange(noisy_order.shape[1])[None, :]
    mean_rank = ranks[rows, true_top].mean(axis=1)
    g = groups[:n_overlap]
    if not (np.any(g == G0) and np.any(g == G1)):
        raise DataError("both groups must appear among overlapping users")
    return float(mean_rank[g == G0].mean()), float(mean_rank[g == G1].mean())
