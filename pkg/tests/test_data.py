import csv
import hashlib
import itertools

import numpy as np
import pytest

from trident.data import (
    MANIFEST_FIELDS,
    PatchRecipe,
    SyntheticConfig,
    apply_label_mapping,
    assemble_patches,
    extract_patches,
    filter_genes,
    generate_synthetic,
    load_paired,
    load_split,
    pattern_library,
    read_counts_csv,
    read_label_mapping,
    read_manifest,
    resize_for_recipe,
    write_counts_csv,
    write_dataset,
)
from trident.losses import ContractError

SMALL = dict(n_train=40, n_valid=10, n_test=20, group_size=5)


@pytest.fixture(scope="module")
def small_splits():
    return generate_synthetic(SyntheticConfig(seed=3, **SMALL))


class TestSynthetic:
    def test_config_enforces_weak_strong_ordering(self):
        with pytest.raises(ContractError):
            SyntheticConfig(a_weak=0.4)
        with pytest.raises(ContractError):
            SyntheticConfig(sigma_aug=1.5)

    def test_patterns_disjoint_within_each_factor(self):
        for pats in pattern_library().values():
            for i, j in itertools.combinations(range(4), 2):
                assert not np.any((pats[i] > 0) & (pats[j] > 0))

    def test_factors_occupy_disjoint_pixels(self):
        masks = {f: p.sum(0) > 0 for f, p in pattern_library().items()}
        for f, g in itertools.combinations(masks, 2):
            assert not np.any(masks[f] & masks[g])

    def test_every_combination_is_distinct(self):
        pats = pattern_library()
        seen = set()
        for a, b, c in itertools.product(range(4), repeat=3):
            img = pats["a"][a] + 2 * pats["b"][b] + 4 * pats["c"][c]
            seen.add(img.tobytes())
        assert len(seen) == 64

    def test_shapes_and_ranges(self, small_splits):
        train = small_splits["train"]
        assert train.primary.shape == (40, 32, 32, 1)
        assert train.privileged.shape == (40, 32, 32, 1)
        assert train.primary.min() >= 0 and train.primary.max() <= 1
        for f in "abc":
            assert set(np.unique(train.labels[f])) <= {0, 1, 2, 3}

    def test_weak_feature_below_augmentation_noise(self):
        cfg = SyntheticConfig()
        contribution = cfg.a_weak * pattern_library()["b"]
        assert contribution.std() < cfg.sigma_aug

    def test_without_weak_amplitude_primary_ignores_b(self):
        cfg = SyntheticConfig(seed=1, a_weak=0.0, base_noise=0.0, **SMALL)
        train = generate_synthetic(cfg)["train"]
        pats = pattern_library()
        expected = pats["a"][train.labels["a"]][..., None]
        np.testing.assert_array_equal(train.primary, expected)

    def test_c_never_in_primary(self, small_splits):
        c_mask = pattern_library()["c"].sum(0) > 0
        assert np.all(small_splits["train"].primary[:, c_mask, 0] < 0.2)

    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(seed=9, **SMALL))
        b = generate_synthetic(SyntheticConfig(seed=9, **SMALL))
        for split in a:
            np.testing.assert_array_equal(a[split].primary, b[split].primary)
            np.testing.assert_array_equal(a[split].privileged, b[split].privileged)

    def test_counts_mode_is_linear_in_b_and_c(self):
        cfg = SyntheticConfig(seed=2, privileged="counts", n_train=4000, n_valid=4, n_test=4)
        train = generate_synthetic(cfg)["train"]
        assert train.privileged.shape == (4000, 16)
        first, second = train.privileged[:, :8].mean(1), train.privileged[:, 8:].mean(1)
        for level in range(4):
            assert abs(first[train.labels["b"] == level].mean() - (1 + 3 * level)) < 0.2
            assert abs(second[train.labels["c"] == level].mean() - (1 + 3 * level)) < 0.2

    def test_groups_do_not_straddle_splits(self, small_splits):
        groups = [set(s.groups) for s in small_splits.values()]
        for g, h in itertools.combinations(groups, 2):
            assert not g & h


class TestManifest:
    def test_round_trip_bit_identical(self, tmp_path, small_splits):
        write_dataset(small_splits, tmp_path)
        for split, arrs in small_splits.items():
            loaded = load_split(tmp_path, split)
            assert loaded.ids == arrs.ids
            np.testing.assert_array_equal(loaded.primary, arrs.primary)
            np.testing.assert_array_equal(loaded.privileged, arrs.privileged)
            for f in "abc":
                np.testing.assert_array_equal(loaded.labels[f], arrs.labels[f])

    def test_counts_round_trip(self, tmp_path):
        splits = generate_synthetic(SyntheticConfig(seed=4, privileged="counts", **SMALL))
        write_dataset(splits, tmp_path)
        loaded = load_split(tmp_path, "test")
        np.testing.assert_array_equal(loaded.privileged, splits["test"].privileged)

    def test_header(self, tmp_path, small_splits):
        write_dataset(small_splits, tmp_path)
        with (tmp_path / "manifest.csv").open() as fh:
            assert next(csv.reader(fh)) == MANIFEST_FIELDS

    def test_rewrite_is_byte_identical(self, tmp_path, small_splits):
        m1 = write_dataset(small_splits, tmp_path / "one")
        m2 = write_dataset(generate_synthetic(SyntheticConfig(seed=3, **SMALL)), tmp_path / "two")
        assert hashlib.sha256(m1.read_bytes()).digest() == hashlib.sha256(m2.read_bytes()).digest()

    def test_shuffle_is_permutation(self, tmp_path, small_splits):
        write_dataset(small_splits, tmp_path)
        plain = [s.id for s in load_paired(tmp_path, "train")]
        shuffled = [s.id for s in load_paired(tmp_path, "train", shuffle_seed=5)]
        assert sorted(plain) == sorted(shuffled) and plain != shuffled
        assert shuffled == [s.id for s in load_paired(tmp_path, "train", shuffle_seed=5)]

    def test_missing_file_names_record(self, tmp_path, small_splits):
        write_dataset(small_splits, tmp_path)
        (tmp_path / "primary" / "test-00003.png").unlink()
        with pytest.raises(FileNotFoundError, match="test-00003"):
            load_split(tmp_path, "test")

    def _write_rows(self, path, rows):
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
            w.writeheader()
            w.writerows(rows)

    def test_group_straddling_rejected(self, tmp_path):
        base = {"primary": "p.png", "privileged": "", "label_a": 0, "label_b": 0, "label_c": 0, "group": "g1"}
        self._write_rows(tmp_path / "manifest.csv", [{**base, "id": "x", "split": "train"}, {**base, "id": "y", "split": "test"}])
        with pytest.raises(ContractError, match="straddles"):
            read_manifest(tmp_path)

    def test_duplicate_ids_rejected(self, tmp_path):
        base = {"primary": "p.png", "privileged": "", "label_a": 0, "label_b": 0, "label_c": 0, "group": "g1", "split": "train"}
        self._write_rows(tmp_path / "manifest.csv", [{**base, "id": "x"}, {**base, "id": "x"}])
        with pytest.raises(ContractError, match="unique"):
            read_manifest(tmp_path)


class TestPatches:
    def test_sixteen_patches(self):
        recipe = PatchRecipe()
        img = np.random.default_rng(0).uniform(size=(984, 984, 3)).astype(np.float32)
        patches = extract_patches(img, recipe)
        assert len(patches) == 16
        assert all(p.shape == (256, 256, 3) for p in patches)
        resized = resize_for_recipe(img, recipe)
        np.testing.assert_array_equal(assemble_patches(patches, recipe), resized)
        assert np.isclose(sum(p.sum(dtype=np.float64) for p in patches), resized.sum(dtype=np.float64))

    def test_identity_recipe(self):
        recipe = PatchRecipe(source_size=(64, 64), resize_to=None, patch_size=64)
        img = np.arange(64 * 64, dtype=np.float32).reshape(64, 64, 1)
        (patch,) = extract_patches(img, recipe)
        np.testing.assert_array_equal(patch, img)

    def test_size_mismatch(self):
        with pytest.raises(ContractError):
            extract_patches(np.zeros((100, 100, 3)), PatchRecipe())

    def test_grid_must_tile(self):
        with pytest.raises(ContractError):
            PatchRecipe(source_size=(100, 100), resize_to=None, patch_size=30)


class TestGeneFilter:
    def test_boundary_inclusive(self):
        counts = np.zeros((100, 3), int)
        counts[:50, 0] = 6  # exactly 50 samples above 5 -> kept
        counts[:49, 1] = 6  # 49 -> dropped
        counts[:, 2] = 5  # never above 5 -> dropped
        filtered, keep = filter_genes(counts)
        np.testing.assert_array_equal(keep, [0])
        assert filtered.shape == (100, 1)

    def test_idempotent(self):
        counts = np.random.default_rng(0).poisson(4.0, size=(200, 30))
        once, _ = filter_genes(counts)
        twice, _ = filter_genes(once)
        np.testing.assert_array_equal(once, twice)
        assert once.shape[0] == counts.shape[0] and once.shape[1] <= counts.shape[1]

    def test_rejects_negative(self):
        with pytest.raises(ContractError):
            filter_genes(np.array([[-1, 2]]))

    def test_counts_csv_round_trip(self, tmp_path):
        genes = ["Gfap", "Mbp", "Snap25"]
        counts = np.array([[1, 0, 7], [3, 2, 0]], dtype=np.float64)
        write_counts_csv(tmp_path / "c.csv", genes, counts)
        g, c = read_counts_csv(tmp_path / "c.csv")
        assert g == genes
        np.testing.assert_array_equal(c, counts)


def test_label_mapping(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("label,group\nWM,white\nGM,grey\nMixed,exclude\nUnknown,\n")
    mapping = read_label_mapping(path)
    names, keep = apply_label_mapping(["WM", "Mixed", "GM", "Unknown"], mapping)
    assert names == ["white", "grey"]
    np.testing.assert_array_equal(keep, [0, 2])
