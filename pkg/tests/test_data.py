import numpy as np
import pytest
from scipy import stats

from crossfair.data import (
    SynthConfig,
    build_dataset,
    generate_synthetic,
    load_attributes,
    load_interactions,
    split_per_user,
    synthetic_rank_quality,
    write_attributes,
    write_interactions,
)
from crossfair.errors import DataError

from conftest import small_synth


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadInteractions:
    def test_dedup_and_first_seen_densify(self, tmp_path):
        p = write(tmp_path / "x.tsv", "user_id\titem_id\nu1\ti1\nu1\ti1\nu2\ti3\n")
        loaded = load_interactions(p)
        assert loaded.pairs == [(0, 0), (1, 1)]
        assert loaded.user_ids == ["u1", "u2"]
        assert loaded.item_ids == ["i1", "i3"]

    def test_empty_body_errors(self, tmp_path):
        p = write(tmp_path / "x.tsv", "user_id\titem_id\n")
        with pytest.raises(DataError, match="no interactions"):
            load_interactions(p)

    def test_extra_columns_ignored(self, tmp_path):
        p = write(
            tmp_path / "x.tsv",
            "user_id\titem_id\ttimestamp\na\tx\t111\nb\ty\t222\nc\tz\t333\n",
        )
        loaded = load_interactions(p)
        assert loaded.pairs == [(0, 0), (1, 1), (2, 2)]

    def test_malformed_row_reports_line(self, tmp_path):
        p = write(tmp_path / "x.tsv", "user_id\titem_id\na\tx\nbroken\n")
        with pytest.raises(DataError, match=":3"):
            load_interactions(p)

    def test_no_remap_requires_ints(self, tmp_path):
        p = write(tmp_path / "x.tsv", "user_id\titem_id\n3\t4\n")
        loaded = load_interactions(p, id_remap=False)
        assert loaded.pairs == [(3, 4)]
        p2 = write(tmp_path / "y.tsv", "user_id\titem_id\nabc\t4\n")
        with pytest.raises(DataError):
            load_interactions(p2, id_remap=False)

    def test_roundtrip_identity_on_densified(self, tmp_path, synth_ds):
        p = tmp_path / "t.tsv"
        write_interactions(p, synth_ds.interactions_target)
        loaded = load_interactions(p, id_remap=False)
        assert loaded.pairs == synth_ds.interactions_target

    def test_roundtrip_through_raw_ids(self, tmp_path, synth_ds):
        p = tmp_path / "t.tsv"
        write_interactions(p, synth_ds.interactions_target,
                           synth_ds.raw_ids["users_target"],
                           synth_ds.raw_ids["items_target"])
        loaded = load_interactions(p)
        recovered = [
            (synth_ds.raw_ids["users_target"].index(loaded.user_ids[u]),
             synth_ds.raw_ids["items_target"].index(loaded.item_ids[i]))
            for u, i in loaded.pairs
        ]
        assert recovered == synth_ds.interactions_target


class TestLoadAttributes:
    def test_lexicographic_group_assignment(self, tmp_path):
        p = write(tmp_path / "a.tsv", "user_id\tattribute\na\tF\nb\tM\n")
        mapping, labels = load_attributes(p)
        assert mapping == {"a": 0, "b": 1}
        assert labels == ("F", "M")

    def test_conflict_errors(self, tmp_path):
        p = write(tmp_path / "a.tsv", "user_id\tattribute\na\tF\na\tM\n")
        with pytest.raises(DataError, match="conflicting"):
            load_attributes(p)

    def test_cardinality_errors(self, tmp_path):
        rows = "".join(f"u{i}\t{'XYZ'[i % 3]}\n" for i in range(100))
        p = write(tmp_path / "a.tsv", "user_id\tattribute\n" + rows)
        with pytest.raises(DataError, match="2 distinct"):
            load_attributes(p)
        p1 = write(tmp_path / "b.tsv", "user_id\tattribute\na\tF\nb\tF\n")
        with pytest.raises(DataError, match="2 distinct"):
            load_attributes(p1)

    def test_missing_target_user_rejected(self, tmp_path):
        src = write(tmp_path / "s.tsv", "user_id\titem_id\nu1\ti1\n")
        tgt = write(tmp_path / "t.tsv", "user_id\titem_id\nu1\tj1\nu2\tj2\n")
        attrs = write(tmp_path / "a.tsv", "user_id\tattribute\nu1\tF\nzz\tM\n")
        with pytest.raises(DataError, match="missing from the attribute file"):
            build_dataset(
                load_interactions(src), load_interactions(tgt), load_attributes(attrs)[0]
            )


class TestOverlapDerivation:
    def test_shared_raw_ids_become_overlap(self, tmp_path):
        src = write(tmp_path / "s.tsv", "user_id\titem_id\nu1\ta\nu9\tb\n")
        tgt = write(tmp_path / "t.tsv", "user_id\titem_id\nu3\tc\nu1\td\n")
        attrs = write(tmp_path / "a.tsv", "user_id\tattribute\nu1\tF\nu3\tM\n")
        ds = build_dataset(
            load_interactions(src), load_interactions(tgt), load_attributes(attrs)[0]
        )
        # target dense: u3 -> 0, u1 -> 1; source dense: u1 -> 0
        assert ds.overlap == {1: 0}
        assert ds.groups == {0: 1, 1: 0}


class TestSplit:
    def test_target_10_interactions(self, tmp_path):
        ds = small_synth(interactions_per_user=10)
        split = split_per_user(ds, seed=5)
        by_user = {}
        for name, pairs in (
            ("train", split.target_train),
            ("val", split.target_val),
            ("test", split.target_test),
        ):
            for u, _ in pairs:
                by_user.setdefault(u, {"train": 0, "val": 0, "test": 0})
                by_user[u][name] += 1
        for u, counts in by_user.items():
            assert counts == {"train": 8, "val": 1, "test": 1}

    def test_single_interaction_user_keeps_train(self, micro_ds):
        split = split_per_user(micro_ds, seed=0)
        # every micro user has 3 target interactions: floors give 0 val / 0 test
        assert len(split.target_val) == 0 and len(split.target_test) == 0
        assert len(split.target_train) == len(micro_ds.interactions_target)

    def test_source_5_interactions(self, tmp_path):
        ds = small_synth(interactions_per_user=5)
        split = split_per_user(ds, seed=5)
        counts = {}
        for u, _ in split.source_train:
            counts[u] = counts.get(u, 0) + 1
        val_counts = {}
        for u, _ in split.source_val:
            val_counts[u] = val_counts.get(u, 0) + 1
        for u in counts:
            assert counts[u] == 4
            assert val_counts[u] == 1

    def test_partition_and_determinism(self, synth_ds):
        s1 = split_per_user(synth_ds, seed=9)
        s2 = split_per_user(synth_ds, seed=9)
        assert s1.target_train == s2.target_train
        assert s1.source_val == s2.source_val
        whole = sorted(s1.target_train + s1.target_val + s1.target_test)
        assert whole == sorted(synth_ds.interactions_target)
        assert set(s1.target_train).isdisjoint(s1.target_val)
        assert set(s1.target_train).isdisjoint(s1.target_test)
        assert set(s1.target_val).isdisjoint(s1.target_test)


class TestSynthetic:
    def test_determinism(self):
        a = small_synth(seed=7)
        b = small_synth(seed=7)
        assert a.interactions_source == b.interactions_source
        assert a.interactions_target == b.interactions_target
        assert a.groups == b.groups

    def test_capacity_error(self):
        with pytest.raises(DataError):
            SynthConfig(n_items_source=5, n_items_target=5, interactions_per_user=6).validate()

    def test_no_disparity_groups_indistinguishable(self):
        # two-sample KS on the per-user oracle rank quality across 20 seeds
        pvals = []
        for seed in range(20):
            cfg = SynthConfig(
                n_users_source=120, n_users_target=160, overlap_fraction=0.6,
                n_items_source=60, n_items_target=60, latent_dim=8,
                source_disparity=1.0, domain_shift=0.0, interactions_per_user=8,
                rng_seed=seed,
            )
            g0, g1 = synthetic_rank_quality(cfg)
            pvals.append(g1 - g0)
        t, p = stats.ttest_1samp(pvals, 0.0)
        assert p > 0.01

    def test_disparity_corrupts_g1_ordering(self):
        worse = 0
        for seed in range(10):
            cfg = SynthConfig(
                n_users_source=120, n_users_target=160, overlap_fraction=0.6,
                n_items_source=60, n_items_target=60, latent_dim=8,
                source_disparity=4.0, domain_shift=0.0, interactions_per_user=8,
                rng_seed=seed,
            )
            g0, g1 = synthetic_rank_quality(cfg)
            worse += g1 > g0
        assert worse == 10

    def test_disparity_gap_monotone(self):
        gaps = []
        for disparity in (1.0, 2.0, 4.0):
            gap = 0.0
            for seed in range(10):
                cfg = SynthConfig(
                    n_users_source=120, n_users_target=160, overlap_fraction=0.6,
                    n_items_source=60, n_items_target=60, latent_dim=8,
                    source_disparity=disparity, domain_shift=0.0,
                    interactions_per_user=8, rng_seed=seed,
                )
                g0, g1 = synthetic_rank_quality(cfg)
                gap += (g1 - g0) / 10
            gaps.append(gap)
        assert gaps[0] <= gaps[1] <= gaps[2]


class TestWriters:
    def test_attribute_roundtrip(self, tmp_path, synth_ds):
        p = tmp_path / "a.tsv"
        write_attributes(p, synth_ds.groups, synth_ds.raw_ids["users_target"],
                         synth_ds.group_labels)
        mapping, labels = load_attributes(p)
        assert labels == synth_ds.group_labels
        for u, g in synth_ds.groups.items():
            assert mapping[synth_ds.raw_ids["users_target"][u]] == g
