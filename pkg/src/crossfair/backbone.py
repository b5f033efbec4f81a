"""Pluggable embedding backbones.

Two sharing modes are supported. In ``shared`` mode every overlapping user
owns a single latent row used for both the source and target view (joint
factorization); in ``dual`` mode the two domains keep independent user
tables and overlap is exploited only by the gain machinery.

Storage is a single user pool plus per-domain slot maps, so shared-mode
aliasing is real: a gradient applied through either view moves the one
underlying row.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .data import CrossDomainDataset
from .errors import DataError
from .seeding import make_rng

SNAPSHOT_MAGIC = b"CDFA"
SNAPSHOT_VERSION = 1
INIT_STD = 0.1


class Backbone:
    def __init__(self, ds: CrossDomainDataset, d: int, mode: str, seed: int):
        if d < 1:
            raise DataError("embedding dimension must be >= 1")
        if mode not in ("shared", "dual"):
            raise DataError(f"unknown sharing mode {mode!r}")
        self.mode = mode
        self.d = d
        self.n_users_source = ds.n_users_source
        self.n_users_target = ds.n_users_target
        self.n_items_source = ds.n_items_source
        self.n_items_target = ds.n_items_target

        self.target_to_source = np.full(ds.n_users_target, -1, dtype=np.int64)
        for t, s in ds.overlap.items():
            self.target_to_source[t] = s

        self.target_slot = np.arange(ds.n_users_target, dtype=np.int64)
        self.source_slot = np.empty(ds.n_users_source, dtype=np.int64)
        if mode == "shared":
            source_of = {s: t for t, s in ds.overlap.items()}
            next_slot = ds.n_users_target
            for s in range(ds.n_users_source):
                if s in source_of:
                    self.source_slot[s] = source_of[s]
                else:
                    self.source_slot[s] = next_slot
                    next_slot += 1
            n_slots = next_slot
        else:
            self.source_slot = ds.n_users_target + np.arange(ds.n_users_source, dtype=np.int64)
            n_slots = ds.n_users_target + ds.n_users_source

        rng = make_rng(seed, "backbone-init")
        self.user_pool = rng.normal(0.0, INIT_STD, size=(n_slots, d))
        self.item_source = rng.normal(0.0, INIT_STD, size=(ds.n_items_source, d))
        self.item_target = rng.normal(0.0, INIT_STD, size=(ds.n_items_target, d))

    # -- views ---------------------------------------------------------------

    def user_target_vector(self, user: int) -> np.ndarray:
        self._check_target_user(user)
        return self.user_pool[self.target_slot[user]]

    def user_source_vector(self, target_user: int) -> np.ndarray:
        """Source-domain view of an overlapping target user."""
        self._check_target_user(target_user)
        s = self.target_to_source[target_user]
        if s < 0:
            raise DataError(f"target user {target_user} has no source identity")
        return self.user_pool[self.source_slot[s]]

    def user_target_vectors(self, users) -> np.ndarray:
        return self.user_pool[self.target_slot[np.asarray(users, dtype=np.int64)]]

    def source_user_vectors(self, source_users) -> np.ndarray:
        return self.user_pool[self.source_slot[np.asarray(source_users, dtype=np.int64)]]

    def source_slots_of_targets(self, target_users) -> np.ndarray:
        s = self.target_to_source[np.asarray(target_users, dtype=np.int64)]
        if np.any(s < 0):
            raise DataError("source view requested for a non-overlapping user")
        return self.source_slot[s]

    # -- scoring -------------------------------------------------------------

    def score(self, user: int, item: int) -> float:
        self._check_target_user(user)
        if not 0 <= item < self.n_items_target:
            raise DataError(f"target item {item} out of range")
        return float(self.user_pool[self.target_slot[user]] @ self.item_target[item])

    def score_source(self, source_user: int, item: int) -> float:
        if not 0 <= source_user < self.n_users_source:
            raise DataError(f"source user {source_user} out of range")
        if not 0 <= item < self.n_items_source:
            raise DataError(f"source item {item} out of range")
        return float(self.user_pool[self.source_slot[source_user]] @ self.item_source[item])

    def _check_target_user(self, user: int):
        if not 0 <= user < self.n_users_target:
            raise DataError(f"target user {user} out of range")

    # -- materialized tables ---------------------------------------------------

    def user_emb_target(self) -> np.ndarray:
        return self.user_pool[self.target_slot].copy()

    def user_emb_source(self) -> np.ndarray:
        return self.user_pool[self.source_slot].copy()

    # -- bookkeeping -----------------------------------------------------------

    def parameters(self) -> dict:
        return {
            "user_pool": self.user_pool,
            "item_source": self.item_source,
            "item_target": self.item_target,
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in ("user_pool", "item_source", "item_target"):
            arr = self.parameters()[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def assert_finite(self):
        for name, arr in self.parameters().items():
            if not np.all(np.isfinite(arr)):
                from .errors import NumericalError

                raise NumericalError(f"non-finite values in {name}")

    def copy(self) -> "Backbone":
        clone = object.__new__(Backbone)
        clone.__dict__.update(self.__dict__)
        clone.user_pool = self.user_pool.copy()
        clone.item_source = self.item_source.copy()
        clone.item_target = self.item_target.copy()
        return clone


def init(ds: CrossDomainDataset, d: int, mode: str, seed: int) -> Backbone:
    """Gaussian(0, 0.1) initialized backbone, deterministic under the seed."""
    return Backbone(ds, d, mode, seed)


def save_snapshot(backbone: Backbone, path):
    """Write the four embedding tables as little-endian float32.

    Layout: magic ``CDFA``, u32 version, then per table (user source, user
    target, item source, item target): u64 rows, u64 cols, row-major f32.
    """
    tables = [
        backbone.user_emb_source(),
        backbone.user_emb_target(),
        backbone.item_source,
        backbone.item_target,
    ]
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", SNAPSHOT_VERSION))
        for arr in tables:
            rows, cols = arr.shape
            fh.write(struct.pack("<QQ", rows, cols))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_snapshot(path) -> dict:
    """Read a snapshot file back into float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise DataError(f"{path}: bad snapshot magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    off = 8
    out = {}
    for name in ("user_emb_source", "user_emb_target", "item_emb_source", "item_emb_target"):
        if off + 16 > len(blob):
            raise DataError(f"{path}: truncated snapshot")
        rows, cols = struct.unpack_from("<QQ", blob, off)
        off += 16
        nbytes = rows * cols * 4
        if off + nbytes > len(blob):
            raise DataError(f"{path}: truncated snapshot table {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        out[name] = arr.reshape(rows, cols).astype(np.float64)
        off += nbytes
    return out
