import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from weakseg.core import LESION, PROSTATE, GridSpec, IntensityVolume, ValidationError
from weakseg.experiment import desk_phantom
from weakseg.synth import (PhantomConfig, ShiftKnobs, apply_domain_shift, generate_case,
                           generate_corpus)

SMALL = PhantomConfig(grid=GridSpec((48, 48, 6)), lesion_volume=(30, 400),
                      prostate_volume=(2000, 5000), positive_fraction=1.0)


def lesion_components(labels):
    lab, n = ndimage.label(labels == LESION, np.ones((3, 3, 3)))
    return [np.flatnonzero(lab == i + 1) for i in range(n)]


def replace_n(cfg, n):
    d = cfg.to_dict()
    d["n_cases"] = n
    return PhantomConfig(**d)


def test_zero_positive_fraction_has_no_lesions():
    cfg = PhantomConfig(grid=SMALL.grid, lesion_volume=(30, 400),
                        prostate_volume=(2000, 5000), positive_fraction=0.0)
    for c in generate_corpus(replace_n(cfg, 8)):
        assert not (c.labels.labels == LESION).any() and not c.positive


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_lesions_inside_prostate_and_in_range(index):
    _, lv = generate_case(SMALL, index)
    labels = lv.labels
    comps = lesion_components(labels)
    assert 1 <= len(comps) <= SMALL.max_lesions
    for comp in comps:
        assert 30 <= len(comp) <= 400
    # every lesion voxel is surrounded by gland or lesion, never background
    grown = ndimage.binary_dilation(labels == LESION, np.ones((3, 3, 3)))
    assert not (grown & (labels == 0)).any()
    gland = labels > 0
    assert 2000 * 0.8 <= gland.sum() <= 5000 * 1.2


def test_default_lesion_volumes_fit_the_3d_bounds():
    cfg = PhantomConfig(n_cases=6, positive_fraction=1.0)
    for c in generate_corpus(cfg):
        for comp in lesion_components(c.labels.labels):
            assert 30 <= len(comp) <= 4000


def test_positive_rate_within_binomial_band():
    cfg = desk_phantom(400, seed=5)
    d = cfg.to_dict()
    d["positive_fraction"] = 0.17
    cases = generate_corpus(PhantomConfig(**d))
    k = sum(c.positive for c in cases)
    assert abs(k - 400 * 0.17) <= 3 * np.sqrt(400 * 0.17 * 0.83)


def test_generation_is_deterministic_per_seed_and_index():
    a_img, a_lab = generate_case(SMALL, 3)
    b_img, b_lab = generate_case(SMALL, 3)
    assert np.array_equal(a_img.data, b_img.data) and np.array_equal(a_lab.labels, b_lab.labels)
    c_img, _ = generate_case(SMALL, 4)
    assert not np.array_equal(a_img.data, c_img.data)
    # a corpus started midway reproduces the same cases
    tail = generate_corpus(replace_n(SMALL, 2), start=3)
    assert np.array_equal(tail[0].image.data, a_img.data) and tail[0].case_id == "in0003"


def test_channel_contrasts():
    img, lv = generate_case(replace_n(SMALL, 1), 0)
    t2, adc = img.data
    gland, les, bg = lv.labels == PROSTATE, lv.labels == LESION, lv.labels == 0
    assert t2[gland].mean() > t2[bg].mean()
    assert adc[les].mean() < adc[gland].mean()
    assert img.data.min() >= 0 and img.data.max() <= 1


def test_identity_shift_is_a_no_op():
    img, lv = generate_case(SMALL, 1)
    out = apply_domain_shift(img, ShiftKnobs(), lv.labels)
    np.testing.assert_allclose(out.data, img.data, atol=1e-12)


def test_gamma_before_renormalisation():
    vol = IntensityVolume(GridSpec((2, 1, 1)), np.array([[[[0.5, 1.0]]], [[[0.0, 0.5]]]]))
    out = apply_domain_shift(vol, ShiftKnobs(gamma=2.0), renormalize=False)
    np.testing.assert_allclose(out.data.ravel(), [0.25, 1.0, 0.0, 0.25])
    with pytest.raises(ValidationError):
        apply_domain_shift(vol, ShiftKnobs(gamma=0.0))


def test_lesion_contrast_scale_moves_lesions_toward_gland():
    img, lv = generate_case(SMALL, 2)
    out = apply_domain_shift(img, ShiftKnobs(lesion_contrast=0.2), lv.labels, renormalize=False)
    les, gland = lv.labels == LESION, lv.labels == PROSTATE
    before = abs(img.data[1][les].mean() - img.data[1][gland].mean())
    after = abs(out.data[1][les].mean() - out.data[1][gland].mean())
    assert after == pytest.approx(0.2 * before, rel=1e-9)
    with pytest.raises(ValidationError):
        apply_domain_shift(img, ShiftKnobs(lesion_contrast=0.5))


def test_lesion_gap_keeps_lesions_apart():
    cfg = desk_phantom(30, seed=1, max_lesions=3, lesion_gap=2)
    for c in generate_corpus(cfg):
        comps = lesion_components(c.labels.labels)
        for i, a in enumerate(comps):
            mask = np.zeros(c.labels.labels.size, bool)
            mask[a] = True
            near = ndimage.binary_dilation(mask.reshape(c.labels.labels.shape),
                                           np.ones((1, 3, 3)), iterations=2)
            for b in comps[i + 1:]:
                assert not near.ravel()[b].any()


def test_config_validation():
    with pytest.raises(ValidationError):
        PhantomConfig(positive_fraction=1.5)
    with pytest.raises(ValidationError):
        PhantomConfig(lesion_volume=(500, 100))
    with pytest.raises(ValidationError):
        PhantomConfig(grid=GridSpec((16, 16, 1)), prostate_volume=(100, 200), lesion_volume=(80, 90))
    with pytest.raises(ValidationError):
        PhantomConfig(lesion_gap=0)
    cfg = PhantomConfig(shift={"gamma": 1.5}, grid={"dims": [8, 8, 2], "spacing": [1, 1, 3]},
                        prostate_volume=(20, 40), lesion_volume=(5, 8))
    assert cfg.shift.gamma == 1.5 and cfg.grid.dims == (8, 8, 2)
    assert PhantomConfig(**cfg.to_dict()) == cfg
