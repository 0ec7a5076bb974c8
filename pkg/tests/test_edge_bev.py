import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsebins.edge_bev import (DEFAULT_STRIPE_FRACTIONS, EdgeMap, OrientationIntegrals,
                                 build_bev_bank, build_bev_layout, enlarge_box, extract_bev,
                                 extract_bev_batch, orientation_bins, pool_bins,
                                 quantize_orientations)
from sparsebins.geometry import BoundingBox

from oracles import naive_bin_sum


def random_edges(rng, h=64, w=64, density=0.3):
    mag = rng.uniform(0, 1, (h, w)) * (rng.uniform(0, 1, (h, w)) < density)
    theta = rng.uniform(0, np.pi, (h, w))
    return EdgeMap(mag, theta)


def test_edge_map_validation():
    with pytest.raises(ValueError):
        EdgeMap(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        EdgeMap(-np.ones((3, 3)), np.zeros((3, 3)))
    em = EdgeMap(np.ones((2, 2)), np.array([[np.pi, -0.1], [3.5, 0.0]]))
    assert np.all((em.orientation >= 0) & (em.orientation < np.pi))


@pytest.mark.parametrize("theta, expected", [
    (0.0, 0), (np.pi / 4 - 1e-9, 0), (np.pi / 4, 1), (np.pi / 2, 2), (3 * np.pi / 4, 3), (np.pi - 1e-9, 3),
])
def test_orientation_bin_edges(theta, expected):
    assert orientation_bins(np.array([theta]))[0] == expected


def test_integrals_zero_and_uniform():
    zero = quantize_orientations(EdgeMap(np.zeros((8, 9)), np.zeros((8, 9))))
    assert zero.integrals.shape == (4, 9, 10)
    assert not zero.integrals.any()
    ones = quantize_orientations(EdgeMap(np.ones((8, 9)), np.zeros((8, 9))))
    np.testing.assert_array_equal(ones.rect_sum(2, 1, 7, 6), [25.0, 0, 0, 0])
    np.testing.assert_array_equal(ones.rect_sum(3, 3, 3, 6), [0.0, 0, 0, 0])


def test_rect_sum_matches_direct_sum():
    rng = np.random.default_rng(0)
    em = random_edges(rng, 32, 32)
    ii = quantize_orientations(em)
    bins = orientation_bins(em.orientation)
    for _ in range(200):
        x0, x1 = sorted(rng.integers(0, 33, 2))
        y0, y1 = sorted(rng.integers(0, 33, 2))
        patch, pb = em.magnitude[y0:y1, x0:x1], bins[y0:y1, x0:x1]
        direct = [patch[pb == c].astype(np.float64).sum() for c in range(4)]
        np.testing.assert_allclose(ii.rect_sum(x0, y0, x1, y1), direct, atol=1e-9)


def test_rect_sum_additive():
    rng = np.random.default_rng(1)
    ii = quantize_orientations(random_edges(rng))
    for _ in range(100):
        x0, xm, x1 = sorted(rng.integers(0, 65, 3))
        y0, y1 = sorted(rng.integers(0, 65, 2))
        np.testing.assert_allclose(ii.rect_sum(x0, y0, xm, y1) + ii.rect_sum(xm, y0, x1, y1),
                                   ii.rect_sum(x0, y0, x1, y1), atol=1e-9)


@pytest.mark.parametrize("box, expected", [
    ((10, 10, 100, 100), (5, 5, 110, 110)),
    ((0, 0, 10, 20), (-0.5, -1, 11, 22)),
])
def test_enlarge_examples(box, expected):
    big = enlarge_box(BoundingBox(*box))
    np.testing.assert_allclose([big.x, big.y, big.w, big.h], expected, atol=1e-12)


def test_enlarge_zero_is_identity():
    b = BoundingBox(3.5, 2.0, 7.0, 9.0)
    assert enlarge_box(b, 0.0) == b


@pytest.mark.parametrize("p", DEFAULT_STRIPE_FRACTIONS)
def test_layout_shape_and_tiling(p):
    layout = build_bev_layout(p)
    assert len(layout) == 160
    b = layout.bins
    assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    for side in range(4):
        block = b[side * 40:(side + 1) * 40]
        # each side's 40 bins exactly cover a band of depth p along that side
        assert areas[side * 40:(side + 1) * 40].sum() == pytest.approx(p, rel=1e-12)
        for i in range(40):
            for j in range(i + 1, 40):
                ox = min(block[i, 2], block[j, 2]) - max(block[i, 0], block[j, 0])
                oy = min(block[i, 3], block[j, 3]) - max(block[i, 1], block[j, 1])
                assert ox <= 1e-12 or oy <= 1e-12
    thickness = b[0, 3] - b[0, 1]
    assert thickness == pytest.approx(p / 8)


def test_layout_orders_stripes_from_edge_inward():
    b = build_bev_layout(0.16).bins
    assert b[0, 1] == 0.0 and b[5, 1] == pytest.approx(0.02)    # top: first stripe touches the edge
    assert b[40, 2] == 1.0 and b[45, 2] == pytest.approx(0.98)  # right
    assert b[80, 3] == 1.0                                      # bottom
    assert b[120, 0] == 0.0                                     # left


@pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.5])
def test_layout_rejects_bad_fraction(p):
    with pytest.raises(ValueError):
        build_bev_layout(p)


def test_bank_dimensions():
    bank = build_bev_bank()
    assert bank.n_bins == 1120
    assert bank.descriptor_length == 4480
    sub = bank.with_selection([3, 500, 1119])
    assert sub.descriptor_length == 12


def test_pooling_matches_naive_summation():
    rng = np.random.default_rng(2)
    em = random_edges(rng)
    ii = quantize_orientations(em)
    bank = build_bev_bank()
    for _ in range(150):
        x, y = rng.uniform(-5, 55, 2)
        w, h = rng.uniform(4, 50, 2)
        box = BoundingBox(x, y, w, h)
        pooled = pool_bins([box], ii, bank)[0]
        for k in rng.choice(bank.n_bins, 8, replace=False):
            np.testing.assert_allclose(pooled[k], naive_bin_sum(em, box, bank.bins[k]), atol=1e-6)


def test_descriptor_unit_norm_or_zero():
    rng = np.random.default_rng(3)
    ii = quantize_orientations(random_edges(rng))
    bank = build_bev_bank()
    boxes = np.column_stack([rng.uniform(0, 40, (20, 2)), rng.uniform(5, 30, (20, 2))])
    X = extract_bev_batch(boxes, ii, bank)
    assert X.shape == (20, 4480)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-9)
    blank = quantize_orientations(EdgeMap(np.zeros((64, 64)), np.zeros((64, 64))))
    assert not extract_bev(BoundingBox(5, 5, 20, 20), blank, bank).any()


def test_full_selection_reproduces_descriptor():
    rng = np.random.default_rng(4)
    ii = quantize_orientations(random_edges(rng))
    bank = build_bev_bank()
    box = BoundingBox(10, 12, 30, 25)
    full = extract_bev(box, ii, bank)
    np.testing.assert_array_equal(full, extract_bev(box, ii, bank.with_selection(np.arange(1120))))


def test_box_outside_image_gives_zero_descriptor():
    rng = np.random.default_rng(5)
    ii = quantize_orientations(random_edges(rng, 16, 16))
    assert not extract_bev(BoundingBox(100, 100, 5, 5), ii, build_bev_bank()).any()


def test_batch_extraction_is_deterministic():
    rng = np.random.default_rng(6)
    ii = quantize_orientations(random_edges(rng))
    boxes = np.column_stack([rng.uniform(0, 40, (10, 2)), rng.uniform(5, 30, (10, 2))])
    a = extract_bev_batch(boxes, ii, build_bev_bank())
    b = extract_bev_batch(boxes, ii, build_bev_bank())
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 40), st.floats(0, 40), st.floats(2, 40), st.floats(2, 40), st.floats(0.1, 10))
def test_descriptor_invariant_to_edge_scale(x, y, w, h, gain):
    rng = np.random.default_rng(7)
    em = random_edges(rng, 48, 48)
    bank = build_bev_bank()
    box = BoundingBox(x, y, w, h)
    base = extract_bev(box, quantize_orientations(em), bank)
    scaled = extract_bev(box, quantize_orientations(EdgeMap(em.magnitude * gain, em.orientation)), bank)
    np.testing.assert_allclose(base, scaled, atol=1e-6)
