"""Cube container, synthesis, padding, patch and split tests."""

import json

import numpy as np
import pytest

from dacnet.errors import ConfigError, DataError
from dacnet.hsi_data import (
    HsiCube,
    SplitSpec,
    apportion,
    extract_patches,
    load_cube,
    pad_cube,
    patches_at,
    save_cube,
    standardize_cube,
    stratified_split,
    synth_cube,
)


def random_cube(rng, h=9, w=7, bands=5, classes=3):
    refl = rng.random((h, w, bands)).astype(np.float32)
    labels = rng.integers(0, classes + 1, size=(h, w))
    for c in range(1, classes + 1):
        labels.flat[c] = c      # keep every class populated
    return HsiCube(refl, labels, [f"class_{i + 1}" for i in range(classes)])


def nearest_mean_accuracy(cube):
    mask = cube.labels > 0
    x = cube.reflectance[mask].astype(np.float64)
    y = cube.labels[mask]
    means = np.stack([x[y == c + 1].mean(axis=0) for c in range(cube.num_classes)])
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(((d.argmin(axis=1) + 1) == y).mean())


class TestContainer:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        cube = random_cube(rng)
        path = tmp_path / "cube.hsc1"
        save_cube(cube, path)
        loaded = load_cube(path)
        assert np.array_equal(loaded.reflectance, cube.reflectance)
        assert np.array_equal(loaded.labels, cube.labels)
        assert loaded.class_names == cube.class_names
        path2 = tmp_path / "cube2.hsc1"
        save_cube(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_payload_names_byte_counts(self, tmp_path, rng):
        path = tmp_path / "cube.hsc1"
        save_cube(random_cube(rng), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(DataError, match=r"\d+ bytes"):
            load_cube(path)

    def test_zero_bands_rejected(self, tmp_path):
        header = json.dumps({"height": 2, "width": 2, "bands": 0, "classes": 1,
                             "class_names": ["a"], "has_labels": False,
                             "dtype": "f32le"}).encode()
        path = tmp_path / "bad.hsc1"
        path.write_bytes(b"HSC1" + len(header).to_bytes(4, "little") + header)
        with pytest.raises(DataError, match="dims"):
            load_cube(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.hsc1"
        path.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(DataError, match="magic"):
            load_cube(path)

    def test_unlabeled_cube_round_trip(self, tmp_path, rng):
        refl = rng.random((4, 5, 3)).astype(np.float32)
        cube = HsiCube(refl, np.zeros((4, 5), dtype=np.int64), ["a", "b"],
                       has_labels=False)
        path = tmp_path / "u.hsc1"
        save_cube(cube, path)
        loaded = load_cube(path)
        assert not loaded.has_labels and not loaded.labels.any()
        path2 = tmp_path / "u2.hsc1"
        save_cube(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()


class TestSynth:
    def test_deterministic_per_seed(self):
        a = synth_cube(16, 14, 8, 3, noise_sigma=0.2, seed=5)
        b = synth_cube(16, 14, 8, 3, noise_sigma=0.2, seed=5)
        assert np.array_equal(a.reflectance, b.reflectance)
        assert np.array_equal(a.labels, b.labels)

    def test_noise_free_classes_share_spectra(self):
        cube = synth_cube(16, 16, 8, 3, noise_sigma=0.0, seed=2)
        for c in range(1, 4):
            spectra = cube.reflectance[cube.labels == c]
            assert np.array_equal(spectra, np.broadcast_to(spectra[0], spectra.shape))

    def test_noise_free_nearest_mean_is_perfect(self):
        cube = synth_cube(32, 32, 16, 3, noise_sigma=0.0, seed=9)
        assert nearest_mean_accuracy(cube) == 1.0

    def test_default_noise_imperfect_but_better_than_chance(self):
        cube = synth_cube(32, 32, 16, 3, noise_sigma=0.1, seed=7)
        acc = nearest_mean_accuracy(cube)
        assert acc < 1.0
        assert acc > 2.0 / 3.0

    def test_every_class_present_and_some_background(self):
        cube = synth_cube(24, 24, 8, 4, seed=1)
        for c in range(1, 5):
            assert (cube.labels == c).any()
        assert (cube.labels == 0).any()

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            synth_cube(8, 8, 4, 1)


class TestPadding:
    def test_margin_five_matches_published_dims(self, rng):
        refl = rng.random((145, 145, 4)).astype(np.float32)
        cube = HsiCube(refl, np.zeros((145, 145), dtype=np.int64), ["a", "b"])
        assert pad_cube(cube, 5).reflectance.shape == (155, 155, 4)
        assert pad_cube(cube, 8).reflectance.shape == (161, 161, 4)

    def test_margin_zero_is_identity(self, rng):
        cube = random_cube(rng)
        assert pad_cube(cube, 0) is cube

    def test_padding_is_zero_and_unlabeled(self, rng):
        cube = random_cube(rng)
        padded = pad_cube(cube, 2)
        assert not padded.reflectance[:2].any()
        assert not padded.labels[:2].any()
        assert np.array_equal(padded.labels[2:-2, 2:-2], cube.labels)


class TestApportion:
    def test_exact_division(self):
        assert apportion(10, (5, 1, 4)) == (5, 1, 4)

    def test_hand_run_seven_pixels(self):
        # quotas 3.5 / 0.7 / 2.8; floors 3/0/2, two leftover units go in order
        assert apportion(7, (5, 1, 4)) == (4, 1, 2)

    def test_counts_within_one_of_quota(self, rng):
        for _ in range(200):
            ratios = tuple(int(v) for v in rng.integers(1, 9, size=3))
            n = int(rng.integers(1, 400))
            counts = apportion(n, ratios)
            assert sum(counts) == n
            for got, r in zip(counts, ratios):
                assert abs(got - n * r / sum(ratios)) < 1.0

    def test_train_never_empty(self):
        for n in range(1, 40):
            assert apportion(n, (2, 1, 7))[0] >= 1


class TestStratifiedSplit:
    def test_deterministic_and_seed_sensitive(self, rng):
        labels = random_cube(rng, h=20, w=20).labels
        a = stratified_split(labels, (5, 1, 4), seed=3)
        b = stratified_split(labels, (5, 1, 4), seed=3)
        c = stratified_split(labels, (5, 1, 4), seed=4)
        assert np.array_equal(a.assignment, b.assignment)
        assert not np.array_equal(a.assignment, c.assignment)
        assert a.counts() == c.counts()

    def test_partitions_disjoint_and_exhaustive(self, rng):
        labels = random_cube(rng, h=25, w=18).labels
        split = stratified_split(labels, (2, 1, 7), seed=0)
        assert not split.assignment[labels == 0].any()
        assert (split.assignment[labels > 0] > 0).all()

    def test_empty_class_lists_offender(self):
        labels = np.zeros((5, 5), dtype=np.int64)
        labels[0, 0] = 1
        labels[1, 1] = 3    # class 2 absent
        with pytest.raises(DataError, match="class 2"):
            stratified_split(labels, (5, 1, 4), seed=0)

    def test_background_only_rejected(self):
        with pytest.raises(DataError):
            stratified_split(np.zeros((3, 3), dtype=np.int64), (5, 1, 4), seed=0)


class TestPatches:
    def make_parts(self, rng, block=5):
        cube = random_cube(rng, h=10, w=8, bands=6)
        split = stratified_split(cube.labels, (5, 1, 4), seed=1)
        margin = (block - 1) // 2
        padded = pad_cube(cube, margin)
        psplit = SplitSpec(np.pad(split.assignment, margin), split.ratios, split.seed)
        return cube, padded, psplit, extract_patches(padded, psplit, block)

    def test_one_patch_per_labeled_pixel(self, rng):
        cube, _, _, parts = self.make_parts(rng)
        assert sum(len(p) for p in parts.values()) == int((cube.labels > 0).sum())

    def test_patch_dims(self, rng):
        cube, _, _, parts = self.make_parts(rng)
        for p in parts.values():
            assert p.data.shape[1:] == (1, cube.bands, 5, 5)

    def test_center_voxel_reproduces_pixel_spectrum(self, rng):
        cube, padded, _, parts = self.make_parts(rng)
        for part in parts.values():
            for i in range(len(part)):
                row, col = part.coords[i]
                assert np.array_equal(part.data[i, 0, :, 2, 2],
                                      padded.reflectance[row, col].astype(np.float64))
                assert part.labels[i] == padded.labels[row, col]

    def test_corner_pixel_patch_contains_padding(self, rng):
        cube = random_cube(rng, h=6, w=6, bands=3)
        cube.labels[:] = 0
        cube.labels[0, 0] = 1
        cube.labels[5, 5] = 2
        padded = pad_cube(cube, 2)
        split = SplitSpec(np.where(padded.labels > 0, 1, 0).astype(np.int8),
                          (5, 1, 4), 0)
        parts = extract_patches(padded, split, 5)
        patch = parts["train"].data[0, 0]
        assert not patch[:, :2, :].any() and not patch[:, :, :2].any()
        assert patch[:, 2, 2].any()

    def test_even_block_rejected(self, rng):
        _, padded, psplit, _ = self.make_parts(rng)
        with pytest.raises(ConfigError):
            extract_patches(padded, psplit, 4)

    def test_insufficient_padding_rejected(self, rng):
        cube = random_cube(rng, h=6, w=6)
        split = stratified_split(cube.labels, (5, 1, 4), seed=0)
        with pytest.raises(DataError, match="pad"):
            extract_patches(cube, split, 5)    # unpadded cube, labels at borders

    def test_patches_at_streaming_matches_extract(self, rng):
        cube, padded, psplit, parts = self.make_parts(rng)
        got = patches_at(padded, parts["test"].coords, 5)
        assert np.array_equal(got, parts["test"].data)


class TestStandardize:
    def test_train_pixels_become_zero_mean_unit_std(self, rng):
        cube = random_cube(rng, h=20, w=20, bands=4)
        split = stratified_split(cube.labels, (5, 1, 4), seed=2)
        out = standardize_cube(cube, split.mask("train"))
        pixels = out.reflectance[split.mask("train")].astype(np.float64)
        assert np.abs(pixels.mean(axis=0)).max() < 1e-5
        assert np.abs(pixels.std(axis=0) - 1).max() < 1e-5
