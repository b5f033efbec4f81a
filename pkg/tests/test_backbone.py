import numpy as np
import pytest

from crossfair.backbone import Backbone, init, load_snapshot, save_snapshot
from crossfair.errors import DataError

from conftest import micro_dataset


class TestInit:
    def test_deterministic(self, micro_ds):
        a = init(micro_ds, 8, "shared", seed=4)
        b = init(micro_ds, 8, "shared", seed=4)
        assert np.array_equal(a.user_pool, b.user_pool)
        assert np.array_equal(a.item_target, b.item_target)

    def test_shared_mode_aliases_overlap_rows(self, micro_ds):
        bb = init(micro_ds, 8, "shared", seed=0)
        for t, s in micro_ds.overlap.items():
            assert np.array_equal(bb.user_target_vector(t), bb.user_source_vector(t))
            assert bb.target_slot[t] == bb.source_slot[s]

    def test_gaussian_init_moments(self):
        ds = micro_dataset()
        ds.n_users_target = 1000
        ds.groups = {u: u % 2 for u in range(1000)}
        bb = init(ds, 64, "dual", seed=12)
        vals = bb.user_pool[bb.target_slot].ravel()
        assert abs(vals.mean()) < 0.01
        assert abs(vals.std() - 0.1) < 0.01


class TestScore:
    def test_orthogonal_zero(self, micro_ds):
        bb = init(micro_ds, 2, "shared", seed=0)
        bb.user_pool[bb.target_slot[0]] = [1.0, 0.0]
        bb.item_target[0] = [0.0, 1.0]
        assert bb.score(0, 0) == 0.0

    def test_hand_inner_product(self, micro_ds):
        bb = init(micro_ds, 2, "shared", seed=0)
        bb.user_pool[bb.target_slot[0]] = [1.0, 2.0]
        bb.item_target[3] = [3.0, 4.0]
        assert bb.score(0, 3) == pytest.approx(11.0, abs=1e-12)

    def test_self_inner_product_is_squared_norm(self, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=0)
        v = np.array([0.5, -1.0, 2.0, 0.25])
        bb.user_pool[bb.target_slot[1]] = v
        bb.item_target[2] = v
        assert bb.score(1, 2) == pytest.approx(float(v @ v), abs=1e-12)

    def test_bilinearity(self, micro_ds):
        bb = init(micro_ds, 6, "dual", seed=3)
        base = bb.score(2, 4)
        bb.user_pool[bb.target_slot[2]] *= 3.0
        assert bb.score(2, 4) == pytest.approx(3.0 * base, rel=1e-12)

    def test_out_of_range(self, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=0)
        with pytest.raises(DataError):
            bb.score(99, 0)
        with pytest.raises(DataError):
            bb.score(0, 99)


class TestViews:
    def test_shared_views_identical(self, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=0)
        assert np.array_equal(bb.user_target_vector(2), bb.user_source_vector(2))

    def test_dual_views_diverge_after_asymmetric_step(self, micro_ds):
        bb = init(micro_ds, 4, "dual", seed=0)
        s = micro_ds.overlap[2]
        bb.user_pool[bb.source_slot[s]] += 1.0
        assert not np.allclose(bb.user_target_vector(2), bb.user_source_vector(2))

    def test_non_overlap_source_view_errors(self, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=0)
        with pytest.raises(DataError, match="no source identity"):
            bb.user_source_vector(1)

    def test_shared_aliasing_survives_value_updates(self, micro_ds):
        # perturb through the source view, observe the target view move identically
        bb = init(micro_ds, 4, "shared", seed=0)
        before = bb.user_target_vector(0).copy()
        s = micro_ds.overlap[0]
        bb.user_pool[bb.source_slot[s]] += 0.25
        after = bb.user_target_vector(0)
        assert np.allclose(after - before, 0.25)

    def test_shared_aliasing_survives_training_steps(self, micro_ds):
        # a source-domain loss step must move the target view identically
        from crossfair.trainer import Adam, adam_step, bpr_loss

        bb = init(micro_ds, 4, "shared", seed=0)
        adam = Adam(lr=0.05)
        t, s = 2, micro_ds.overlap[2]
        for step in range(5):
            before_t = bb.user_target_vector(t).copy()
            before_s = bb.user_source_vector(t).copy()
            _, grads = bpr_loss(bb, s, 1, 5, l2_reg=1e-3, domain="source")
            for (table, row), g in grads.items():
                adam_step(adam, table, bb.parameters()[table], g[None, :], rows=[row])
            moved_t = bb.user_target_vector(t) - before_t
            moved_s = bb.user_source_vector(t) - before_s
            assert np.any(moved_s != 0.0)
            np.testing.assert_array_equal(moved_t, moved_s)


class TestSnapshotFile:
    def test_roundtrip(self, tmp_path, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=5)
        path = tmp_path / "snap.bin"
        save_snapshot(bb, path)
        blob = path.read_bytes()
        assert blob[:4] == b"CDFA"
        tables = load_snapshot(path)
        assert tables["user_emb_target"].shape == (6, 4)
        assert tables["user_emb_source"].shape == (4, 4)
        np.testing.assert_allclose(
            tables["user_emb_target"], bb.user_emb_target(), atol=1e-6
        )
        np.testing.assert_allclose(tables["item_emb_source"], bb.item_source, atol=1e-6)

    def test_truncated_rejected(self, tmp_path, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=5)
        path = tmp_path / "snap.bin"
        save_snapshot(bb, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(DataError, match="truncated"):
            load_snapshot(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_snapshot(path)


class TestFiniteness:
    def test_params_finite_after_updates(self, micro_ds):
        bb = init(micro_ds, 4, "shared", seed=1)
        bb.user_pool += 0.5
        bb.item_target *= -2.0
        bb.assert_finite()
        bb.item_source[0, 0] = np.inf
        from crossfair.errors import NumericalError

        with pytest.raises(NumericalError):
            bb.assert_finite()
