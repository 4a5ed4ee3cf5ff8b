import dataclasses

import numpy as np
import pytest

from voxpipe.domain.config import TAA_RATIO_MIN, PhantomConfig
from voxpipe.domain.errors import InvalidConfig
from voxpipe.domain.models import Group
from voxpipe.domain.seeding import rng_for
from voxpipe.processing.phantom import (
    group_counts,
    make_cohort,
    make_phantom,
    noise_sigma,
    render_geometry,
    simulate_annotators,
)
from voxpipe.processing.post import connected_components


def test_group_counts_largest_remainder():
    mix = (150, 150, 150, 119, 18)
    assert group_counts(587, mix) == mix
    assert group_counts(120, mix) == (31, 31, 30, 24, 4)
    assert group_counts(10, mix) == (3, 3, 2, 2, 0)
    assert sum(group_counts(37, mix)) == 37
    with pytest.raises(InvalidConfig):
        group_counts(10, (0, 0, 0, 0, 0))


def test_same_seed_gives_identical_case(small_phantom):
    a = make_phantom(small_phantom, Group.AN, seed=42)
    b = make_phantom(small_phantom, Group.AN, seed=42)
    assert a.case_id == b.case_id
    assert np.array_equal(a.volume.data, b.volume.data)
    assert np.array_equal(a.mask.data, b.mask.data)
    assert a.max_diameter_ratio == b.max_diameter_ratio


def test_labels_follow_group(small_phantom):
    assert make_phantom(small_phantom, Group.LD, seed=1).label == 0
    assert make_phantom(small_phantom, Group.ANNC, seed=1).label == 1
    assert make_phantom(small_phantom, Group.CTA, seed=1).max_diameter_ratio == 1.0


def test_contrast_lumen_intensity(small_phantom):
    rec = make_phantom(small_phantom, Group.CTA, seed=3)
    geom = render_geometry(small_phantom, Group.CTA, seed=3)
    hu = rec.volume.data.astype(np.float64) * rec.meta.rescale_slope + rec.meta.rescale_intercept
    lumen = hu[geom.lumen]
    assert lumen.size > 100
    tol = 3.0 * small_phantom.noise_sigma_std / np.sqrt(lumen.size) + 0.5
    assert abs(lumen.mean() - small_phantom.lumen_hu_contrast) < tol


def _max_chord_mm(tube_slice: np.ndarray, sx: float) -> float:
    return float(tube_slice.sum(axis=1).max()) * sx


def test_aneurysm_diameter_matches_ratio(small_phantom):
    cfg = dataclasses.replace(
        small_phantom, aneurysm_ratio_range=(1.8, 1.8), aneurysm_site="descending", jitter_mm=0.0, radius_variation=0.0
    )
    geom = render_geometry(cfg, Group.AN, seed=5)
    assert geom.ratio == pytest.approx(1.8)
    sx, _, sz = cfg.spacing
    k = int(geom.bulge_center_mm[2] // sz)
    measured = _max_chord_mm(geom.tube[k], sx)
    assert abs(measured - 2.0 * cfg.base_radius_mm * 1.8) <= 2.0 * sx
    control = render_geometry(cfg, Group.CTA, seed=5)
    assert _max_chord_mm(control.tube[k], sx) < measured


def test_make_cohort_counts_and_ids(small_phantom):
    records, rows = make_cohort(small_phantom, 10, seed=0)
    assert len(records) == 10
    groups = [r.group for r in rows]
    assert [groups.count(g) for g in Group] == [3, 3, 2, 2, 0]
    assert len({r.case_id for r in rows}) == 10
    with pytest.raises(InvalidConfig):
        make_cohort(small_phantom, 4, seed=0)


def test_simulate_annotators_are_close_but_not_identical(small_phantom):
    rec = make_phantom(small_phantom, Group.SD, seed=8)
    masks = simulate_annotators(rec.mask, n=3, seed=1)
    assert len(masks) == 3
    assert all(m.data.shape == rec.mask.data.shape for m in masks)
    assert any(not np.array_equal(m.data, rec.mask.data) for m in masks)


def test_ratio_range_below_taa_threshold_is_rejected():
    with pytest.raises(InvalidConfig):
        PhantomConfig(aneurysm_ratio_range=(1.1, 1.2))
    with pytest.raises(InvalidConfig):
        PhantomConfig(aneurysm_ratio_range=(1.49, 2.0))
    assert PhantomConfig(aneurysm_ratio_range=(1.5, 1.5)).aneurysm_ratio_range == (1.5, 1.5)


@pytest.mark.parametrize("group", list(Group))
def test_label_matches_diameter_ratio(small_phantom, group):
    for seed in range(3):
        rec = make_phantom(small_phantom, group, seed=seed)
        assert rec.label == int(rec.max_diameter_ratio >= TAA_RATIO_MIN)


@pytest.mark.parametrize("group", list(Group))
def test_mask_is_one_component_with_plausible_fraction(group):
    cfg = PhantomConfig()
    for seed in (0, 1):
        rec = make_phantom(cfg, group, seed=seed, nz=40)
        assert connected_components(rec.mask, 26).count == 1
        frac = rec.mask.foreground / rec.mask.data.size
        assert 0.002 <= frac <= 0.04


@pytest.mark.parametrize("group", [Group.LD, Group.AN])
def test_noise_is_purely_additive(small_phantom, group):
    clean_cfg = dataclasses.replace(small_phantom, noise_sigma_ld=0.0, noise_sigma_std=0.0)
    noisy = make_phantom(small_phantom, group, seed=12)
    clean = make_phantom(clean_cfg, group, seed=12)
    np.testing.assert_array_equal(noisy.mask.data, clean.mask.data)
    assert noisy.max_diameter_ratio == clean.max_diameter_ratio

    sigma = noise_sigma(small_phantom, group)
    field = rng_for(12, "noise").normal(0.0, sigma, size=noisy.volume.data.shape)
    diff = noisy.volume.data.astype(np.float64) - clean.volume.data.astype(np.float64)
    # int16 への丸めで各ボクセル最大 1 HU ずれる
    assert np.abs(diff * small_phantom.rescale_slope - field).max() <= 1.0 + 1e-9
