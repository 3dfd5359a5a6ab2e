import math

import numpy as np
from hypothesis import given, settings, strategies as st

from sadiagram.candidates import INVALID_ID
from sadiagram.core import CandidateField, Site, SiteStore
from sadiagram.render import (boundary_map, pixel_weights, render_array, render_id_map,
                              render_reference, render_tau_map, forward)
from sadiagram.score import hard_owner_many

from conftest import converged_field, make_store


def test_pixel_weight_examples():
    a = Site((0.0, 0.0), 5.0, 2.0, (1, 0, 0))
    store = SiteStore.from_sites([a], 8, 8)
    assert pixel_weights((3.0, 3.0), [0], store) == [(0, 1.0)]
    b = Site((6.0, 0.0), 5.0, 2.0, (0, 0, 1))
    store = SiteStore.from_sites([a, b], 8, 8)
    w = pixel_weights((3.0, 0.0), [0, 1], store)
    assert abs(w[0][1] - 0.5) < 1e-15 and abs(w[1][1] - 0.5) < 1e-15


def test_softmax_three_to_one_blend():
    # site 0 at the pixel with r chosen so its logit is ln 3; site 1 has logit 0
    s = 1 / 8
    tau = 4.0
    r0 = math.log(3) / (tau * s)
    a = Site((2.0, 2.0), math.log(tau), r0, (1, 0, 0))
    b = Site((5.0, 2.0), math.log(tau), 3.0, (0, 0, 1))
    store = SiteStore.from_sites([a, b], 8, 8)
    w = dict(pixel_weights((2.0, 2.0), [0, 1], store))
    assert abs(w[0] - 0.75) < 1e-12 and abs(w[1] - 0.25) < 1e-12
    f = CandidateField(8, 8)
    f.ids[..., 0] = 0
    f.ids[..., 1] = 1
    img = render_array(store, f)
    np.testing.assert_allclose(img[2, 2], [0.75, 0.0, 0.25], atol=1e-12)


def test_single_site_constant():
    store = SiteStore.from_sites([Site((3.0, 4.0), 6.0, 2.0, (0.2, 0.4, 0.6))], 20, 10)
    img = render_array(store, converged_field(store))
    np.testing.assert_allclose(img, np.broadcast_to([0.2, 0.4, 0.6], img.shape), atol=1e-15)


def test_matches_reference_bitwise(rng):
    store = make_store(rng, 64, 64, 200)
    f = converged_field(store)
    np.testing.assert_array_equal(render_array(store, f), render_reference(store, f))


def test_id_map_k1_and_hard_owner(rng):
    store = make_store(rng, 128, 128, 150)
    store.log_tau[:150] = 6.0
    f = converged_field(store)
    ids = render_id_map(store, f)
    ys, xs = np.mgrid[0:128, 0:128]
    owner = hard_owner_many(np.stack([xs.ravel(), ys.ravel()], 1).astype(float),
                            store).reshape(128, 128)
    listed = (f.ids.astype(np.int64) == owner[..., None]).any(-1)
    assert listed.mean() > 0.99
    np.testing.assert_array_equal(ids[listed], owner[listed])
    f1 = CandidateField(128, 128, k=1)
    f1.ids[..., 0] = f.ids[..., 0]
    np.testing.assert_array_equal(render_id_map(store, f1), f.ids[..., 0].astype(np.int64))


def test_boundary_definition():
    ids = np.array([[0, 0, 1], [0, 0, 1], [2, 2, 2]])
    b = boundary_map(ids) > 0
    expected = np.zeros((3, 3), dtype=bool)
    for y in range(3):
        for x in range(3):
            nb = {ids[y, x]}
            for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                if 0 <= y + dy < 3 and 0 <= x + dx < 3:
                    nb.add(ids[y + dy, x + dx])
            expected[y, x] = len(nb) >= 2
    np.testing.assert_array_equal(b, expected)


def test_tau_map_constant_and_monotone():
    store = SiteStore.from_sites([Site((5.0, 5.0), 7.0, 2.0, (0, 0, 0)),
                                  Site((20.0, 5.0), 7.0, 2.0, (1, 1, 1))], 32, 12)
    np.testing.assert_allclose(render_tau_map(store, converged_field(store)), 7.0, atol=1e-12)
    store.log_tau[:2] = [2.0, 20.0]
    row = render_tau_map(store, converged_field(store))[5]
    assert row.min() >= 2.0 - 1e-12 and row.max() <= 20.0 + 1e-12
    assert np.all(np.diff(row[5:21]) >= -1e-12)


def test_tau_map_matches_loop(rng):
    store = make_store(rng, 64, 64, 80)
    f = converged_field(store)
    tmap = render_tau_map(store, f)
    for y, x in rng.integers(0, 64, (50, 2)):
        ids = [int(i) for i in f.ids[y, x] if i != INVALID_ID]
        w = pixel_weights((float(x), float(y)), ids, store)
        ref = sum(wi * store.log_tau[i] for i, wi in w)
        assert abs(tmap[y, x] - ref) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partition_and_convexity(seed):
    rng = np.random.default_rng(seed)
    store = make_store(rng, 24, 24, 30)
    f = converged_field(store)
    img = render_array(store, f)
    for y, x in rng.integers(0, 24, (20, 2)):
        ids = [int(i) for i in f.ids[y, x] if i != INVALID_ID]
        w = pixel_weights((float(x), float(y)), ids, store)
        assert abs(sum(wi for _, wi in w) - 1.0) < 1e-6
        cols = store.color[ids]
        assert np.all(img[y, x] >= cols.min(0) - 1e-12)
        assert np.all(img[y, x] <= cols.max(0) + 1e-12)


def test_temperature_sharpening():
    a = Site((4.0, 4.0), 3.0, 2.0, (1, 0, 0))
    b = Site((12.0, 4.0), 3.0, 2.0, (0, 0, 1))
    lo = SiteStore.from_sites([a, b], 16, 8)
    hi = lo.copy()
    hi.log_tau[:2] += math.log(10)
    for x in range(16):
        if x == 8:
            continue
        wl = max(w for _, w in pixel_weights((float(x), 4.0), [0, 1], lo))
        wh = max(w for _, w in pixel_weights((float(x), 4.0), [0, 1], hi))
        assert wh > wl


def test_candidate_sufficiency(rng):
    from sadiagram.candidates import exact_topk
    store = make_store(rng, 32, 32, 40)
    f = converged_field(store)
    exact = CandidateField(32, 32)
    for y in range(32):
        for x in range(32):
            exact.ids[y, x] = exact_topk((x, y), store, 8)
    assert np.mean(np.abs(render_array(store, f) - render_array(store, exact))) <= 1e-6


def test_forward_reports_empty_pixels():
    store = SiteStore.from_sites([Site((1.0, 1.0), 5.0, 2.0, (0, 0, 0))], 4, 4)
    f = CandidateField(4, 4)
    import pytest
    from sadiagram.core import EmptyModelError
    with pytest.raises(EmptyModelError):
        forward(store, f)
