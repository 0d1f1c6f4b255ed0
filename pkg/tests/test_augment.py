from __future__ import annotations

import numpy as np
import pytest

from cxrscreen.augment import (
    AugmentationSpec,
    AugmentError,
    apply_descriptor,
    check_leakage,
    expand_training_fold,
    materialize,
    rotate,
    translate,
)
from cxrscreen.catalog import Label
from cxrscreen.splits import carve_validation, split_counts, stratified_kfold
from oracles import oracle_rotate, oracle_translate


def gradient_patch(side=32):
    return (np.add.outer(np.arange(side) * 4, np.arange(side) * 3) % 256).astype(np.uint8)


def checker_patch(side=32):
    yy, xx = np.mgrid[0:side, 0:side]
    return np.where((yy // 4 + xx // 4) % 2 == 0, 40, 210).astype(np.uint8)


class TestRotate:
    def test_zero_angle_bit_identical(self):
        img = gradient_patch()
        assert np.array_equal(rotate(img, 0), img)

    def test_white_pixel_lands_on_analytic_coordinate(self):
        # 3-4-5 triangle: offset (0, +5) from center rotates to (-3, +4) exactly
        theta = float(np.degrees(np.arcsin(3 / 5)))
        img = np.zeros((17, 17), dtype=np.uint8)
        img[8, 13] = 255
        out = rotate(img, theta)
        assert out[5, 12] == 255
        assert np.unravel_index(out.argmax(), out.shape) == (5, 12)

    @pytest.mark.parametrize("patch", [gradient_patch, checker_patch])
    @pytest.mark.parametrize("degrees", [15, -15, 5])
    def test_matches_inverse_mapping_oracle(self, patch, degrees):
        img = patch()
        mine = rotate(img, degrees)
        reference = oracle_rotate(img, degrees)
        assert np.abs(mine.astype(int) - reference.astype(int)).max() <= 1

    def test_dimensions_and_range_preserved(self):
        img = gradient_patch()
        out = rotate(img, 30)
        assert out.shape == img.shape
        assert out.min() >= 0 and out.max() <= img.max()

    def test_sanity_bound(self):
        with pytest.raises(AugmentError):
            rotate(gradient_patch(), 90)

    def test_three_channel_input(self):
        img = np.stack([gradient_patch()] * 3, axis=2)
        out = rotate(img, 10)
        assert out.shape == img.shape
        assert np.array_equal(out[:, :, 0], out[:, :, 2])


class TestTranslate:
    def test_zero_shift_bit_identical(self):
        img = gradient_patch()
        assert np.array_equal(translate(img, 0, 0), img)

    def test_integral_shift_fills_left_column(self):
        img = np.array([[10, 20], [30, 40]], dtype=np.uint8)
        out = translate(img, 0.5, 0.0)  # one pixel on width 2
        assert np.array_equal(out, np.array([[0, 10], [0, 30]], dtype=np.uint8))

    def test_round_trip_small_in_interior(self):
        yy, xx = np.mgrid[0:64, 0:64]
        smooth = (120 + 60 * np.sin(xx / 9) + 50 * np.cos(yy / 11)).astype(np.uint8)
        out = translate(translate(smooth, 0.05, 0.0), -0.05, 0.0)
        interior = slice(12, -12)
        dev = np.abs(out[interior, interior].astype(int) - smooth[interior, interior].astype(int))
        assert dev.max() <= 2

    def test_matches_inverse_mapping_oracle_subpixel(self):
        img = gradient_patch()
        mine = translate(img, 0.037, -0.021)
        reference = oracle_translate(img, 0.037, -0.021)
        assert np.abs(mine.astype(int) - reference.astype(int)).max() <= 1

    def test_bounds(self):
        with pytest.raises(AugmentError):
            translate(gradient_patch(), 0.6, 0.0)


class TestSpecValidation:
    def test_translation_range_bound(self):
        with pytest.raises(AugmentError):
            AugmentationSpec(translation_range=(-0.6, 0.6))

    def test_negative_copies_rejected(self):
        with pytest.raises(AugmentError):
            AugmentationSpec(copies_per_class={Label.COVID19.value: -1})


class TestExpandTrainingFold:
    def fold_for(self, make_manifest, counts, k=5, seed=0, fraction=0.10):
        manifest = make_manifest(counts)
        plan = carve_validation(stratified_kfold(manifest, k, seed), fraction, manifest)
        return manifest, plan

    def test_reference_fold_multiplicities(self, make_manifest):
        manifest, plan = self.fold_for(
            make_manifest,
            {Label.COVID19: 423, Label.NORMAL: 1579, Label.VIRAL_PNEUMONIA: 1485},
        )
        spec = AugmentationSpec(seed=1)
        table = split_counts(plan, manifest)
        expand_training_fold(plan.folds[0], manifest, spec, 0, count_table=table)
        assert table.row(Label.COVID19, 0) == (304, 34, 85, 2128)
        assert table.row(Label.NORMAL, 0) == (1137, 126, 316, 2274)
        assert table.row(Label.VIRAL_PNEUMONIA, 0) == (1069, 119, 297, 2138)

    def test_covid_six_copies_cycle_all_angles(self, make_manifest):
        manifest, plan = self.fold_for(make_manifest, {Label.COVID19: 10, Label.NORMAL: 10}, k=2)
        spec = AugmentationSpec(seed=3)
        augmented = expand_training_fold(plan.folds[0], manifest, spec, 0)
        by_parent: dict[str, list] = {}
        for a in augmented:
            by_parent.setdefault(a.parent_record_id, []).append(a)
        labels_by_id = {r.record_id: r.label for r in manifest.records}
        for parent, copies in by_parent.items():
            if labels_by_id[parent] is Label.COVID19:
                assert len(copies) == 6
                assert sorted(c.transform.angle for c in copies) == [-15, -10, -5, 5, 10, 15]
                assert all(c.transform.kind == "rotate+translate" for c in copies)
            else:
                assert len(copies) == 1
                assert copies[0].transform.kind == "translate"
                assert copies[0].transform.angle == 0.0

    def test_translations_within_range_and_varied(self, make_manifest):
        manifest, plan = self.fold_for(make_manifest, {Label.COVID19: 20}, k=2)
        spec = AugmentationSpec(seed=9)
        augmented = expand_training_fold(plan.folds[0], manifest, spec, 0)
        draws = [(a.transform.dx, a.transform.dy) for a in augmented]
        assert all(-0.05 <= dx <= 0.05 and -0.05 <= dy <= 0.05 for dx, dy in draws)
        assert len(set(draws)) > 1

    def test_zero_copies_empty(self, make_manifest):
        manifest, plan = self.fold_for(make_manifest, {Label.COVID19: 10, Label.NORMAL: 10}, k=2)
        spec = AugmentationSpec(copies_per_class={})
        table = split_counts(plan, manifest)
        augmented = expand_training_fold(plan.folds[0], manifest, spec, 0, count_table=table)
        assert augmented == []
        i = table.labels.index(Label.COVID19)
        assert table.augmented_train[i, 0] == table.train[i, 0]

    def test_deterministic_descriptors(self, make_manifest):
        manifest, plan = self.fold_for(make_manifest, {Label.COVID19: 12, Label.NORMAL: 12}, k=3)
        spec = AugmentationSpec(seed=21)
        a = expand_training_fold(plan.folds[1], manifest, spec, 1)
        b = expand_training_fold(plan.folds[1], manifest, spec, 1)
        assert a == b
        c = expand_training_fold(plan.folds[1], manifest, AugmentationSpec(seed=22), 1)
        assert [x.transform for x in a] != [x.transform for x in c]

    def test_leakage_freedom(self, make_manifest):
        manifest, plan = self.fold_for(
            make_manifest, {Label.COVID19: 15, Label.NORMAL: 15, Label.VIRAL_PNEUMONIA: 15}, k=3
        )
        spec = AugmentationSpec(seed=2)
        for fold_index, fold in enumerate(plan.folds):
            augmented = expand_training_fold(fold, manifest, spec, fold_index)
            check_leakage(augmented, fold)

    def test_absent_class_copy_count_warns(self, make_manifest, caplog):
        manifest, plan = self.fold_for(make_manifest, {Label.COVID19: 10}, k=2)
        spec = AugmentationSpec()  # includes NORMAL and VIRAL copy counts
        with caplog.at_level("WARNING"):
            expand_training_fold(plan.folds[0], manifest, spec, 0)
        assert any("NORMAL" in rec.message for rec in caplog.records)


class TestMaterialize:
    def test_writes_layout_and_sidecar(self, toy_manifest, tmp_path):
        plan = stratified_kfold(toy_manifest, 5, seed=0)
        plan = carve_validation(plan, 0.10, toy_manifest)
        spec = AugmentationSpec(seed=4)
        augmented = expand_training_fold(plan.folds[0], toy_manifest, spec, 0)
        some = augmented[:8]
        base = materialize(some, toy_manifest, tmp_path, 0)
        assert base == tmp_path / "aug" / "fold0"
        pngs = list(base.rglob("*.png"))
        assert len(pngs) == len(some)
        sidecar = (base / "descriptors.tsv").read_text().splitlines()
        assert sidecar[0] == "derived_id\tparent_record_id\tkind\tparameters"
        assert len(sidecar) == len(some) + 1

    def test_descriptor_fully_determines_output(self, toy_manifest, tmp_path):
        from cxrscreen.catalog import decode_raster

        plan = carve_validation(stratified_kfold(toy_manifest, 5, 0), 0.10, toy_manifest)
        augmented = expand_training_fold(plan.folds[0], toy_manifest, AugmentationSpec(seed=4), 0)
        aug = augmented[0]
        parent = toy_manifest.by_id()[aug.parent_record_id]
        once = apply_descriptor(decode_raster(parent), aug.transform)
        twice = apply_descriptor(decode_raster(parent), aug.transform)
        assert np.array_equal(once, twice)
