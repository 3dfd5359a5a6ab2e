import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sadiagram.core import CandidateField, Site, SiteStore, N_ACCUM
from sadiagram.grad import (accumulate_naive, accumulate_tiled, backward, loss_only,
                            removal_delta_pixel, _contributions)
from sadiagram.render import pixel_weights, render_array

from conftest import converged_field, make_store


def fsum_oracle(ids, contrib, n):
    """Correctly rounded per-site sums, one pixel at a time."""
    ids = ids.reshape(-1)
    contrib = contrib.reshape(len(ids), -1)
    out = np.zeros((n, contrib.shape[1]))
    for i in range(n):
        rows = contrib[ids == i]
        for c in range(contrib.shape[1]):
            out[i, c] = math.fsum(rows[:, c])
    return out


def random_problem(seed, w=48, h=40, n=50):
    rng = np.random.default_rng(seed)
    store = make_store(rng, w, h, n, log_tau=(3.0, 6.0), radius=(0.0, 4.0), aniso=1.0)
    field = converged_field(store, passes=12)
    target = rng.uniform(0, 1, (h, w, 3))
    return rng, store, field, target


def fd_gradient(store, field, target, i, col, step=1e-5):
    def loss(delta):
        s = store.copy()
        s.params[i, col] += delta
        return loss_only(s, field, target)
    return (loss(step) - loss(-step)) / (2 * step)


def test_fd_spot_check_all_columns():
    _, store, field, target = random_problem(3)
    g, _ = backward(store, field, target)
    for i in (0, 17, 33):
        for col in range(10):
            fd = fd_gradient(store, field, target, i, col)
            a = g.params[i, col]
            if abs(a) < 1e-6:
                assert abs(a - fd) < 1e-8
            else:
                assert abs(a - fd) / abs(a) < 1e-4, (i, col, a, fd)


def test_perfect_reconstruction_is_stationary(rng):
    store = make_store(rng, 32, 32, 20)
    field = converged_field(store)
    target = render_array(store, field)
    g, loss = backward(store, field, target)
    assert loss == 0.0
    assert np.all(g.params == 0.0)


def test_single_site_color_gradient():
    store = SiteStore.from_sites([Site((5.0, 6.0), 6.0, 3.0, (0.7, 0.2, 0.4))], 16, 12)
    field = converged_field(store)
    target = np.broadcast_to([0.1, 0.5, 0.4], (12, 16, 3)).copy()
    g, _ = backward(store, field, target)
    np.testing.assert_allclose(g.color[0], 2 * (np.array([0.7, 0.2, 0.4]) - [0.1, 0.5, 0.4]),
                               atol=1e-12)
    assert np.all(g.pos[0] == 0) and g.log_tau[0] == 0 and g.radius[0] == 0
    assert np.all(g.dir[0] == 0) and g.aniso[0] == 0


def test_fused_path_matches_materialised():
    _, store, field, target = random_problem(5)
    fused, l1 = backward(store, field, target, want_removal=False)
    ids, contrib, _, l2 = _contributions(store, field, target=target)
    ref = accumulate_tiled(ids, contrib, field.width, field.height, store.capacity)
    np.testing.assert_array_equal(fused.params, ref[:, :10])
    assert l1 == pytest.approx(l2, rel=1e-14)


def test_ordered_mode_reproducible():
    _, store, field, target = random_problem(6)
    a, _ = backward(store, field, target)
    b, _ = backward(store, field, target)
    np.testing.assert_array_equal(a.data, b.data)


def _synthetic(rng, w, h, k, n, forced=0):
    ids = rng.integers(-1, n, (w * h, k))
    if forced:
        # one 16x16 tile touches `forced` distinct sites
        tile = np.arange(16 * 16)
        px = (tile // 16) * w + tile % 16
        ids[px, 0] = np.arange(16 * 16) % forced
        ids[px[: forced - 256], 1] = np.arange(256, forced) if forced > 256 else ids[px[:0], 1]
    contrib = rng.normal(size=(w * h, k, 3)) * 10.0 ** rng.integers(-8, 8, (w * h, k, 1))
    return ids, contrib


def test_exact_mode_equals_fsum(rng):
    ids, contrib = _synthetic(rng, 40, 33, 4, 30)
    got = accumulate_tiled(ids, contrib, 40, 33, 30, mode="exact")
    np.testing.assert_array_equal(got, fsum_oracle(ids, contrib, 30))


def test_overflow_tile(rng):
    ids, contrib = _synthetic(rng, 32, 32, 2, 400, forced=300)
    tile = ids.reshape(32, 32, 2)[:16, :16]
    assert len(np.unique(tile[tile >= 0])) >= 257
    got, stats = accumulate_tiled(ids, contrib, 32, 32, 400, mode="exact", return_stats=True)
    assert stats["fallbacks"] > 0
    np.testing.assert_array_equal(got, fsum_oracle(ids, contrib, 400))
    ordered = accumulate_tiled(ids, contrib, 32, 32, 400)
    np.testing.assert_allclose(ordered, accumulate_naive(ids, contrib, 400), rtol=1e-9,
                               atol=1e-9 * np.abs(contrib).max())


def test_single_key_and_empty_tiles():
    ids = np.full((32 * 32, 1), -1)
    ids[: 16 * 32, 0] = 0  # top half: one site
    contrib = np.ones((32 * 32, 1, 2))
    got, stats = accumulate_tiled(ids, contrib, 32, 32, 3, return_stats=True)
    np.testing.assert_array_equal(got, [[512, 512], [0, 0], [0, 0]])
    assert stats["flushes"] == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 40))
def test_tiled_equals_naive_property(seed, w, h):
    rng = np.random.default_rng(seed)
    ids, contrib = _synthetic(rng, w, h, 3, 25)
    exact = accumulate_tiled(ids, contrib, w, h, 25, mode="exact")
    np.testing.assert_array_equal(exact, fsum_oracle(ids, contrib, 25))


def test_removal_delta_examples():
    assert removal_delta_pixel([0.3, 0.2, 0.1], [0, 0, 0], 0.0, [1, 1, 1]) == 0.0
    d = removal_delta_pixel([0.5, 0.5, 0.5], [0, 0, 0], 0.5, [1, 1, 1])
    assert d == pytest.approx(-0.75, abs=1e-15)
    assert removal_delta_pixel([0.5, 0.5, 0.5], [0, 0, 0], 1.0, [0.5, 0.5, 0.5]) == math.inf


def test_removal_delta_random_softmax_pixels():
    rng = np.random.default_rng(21)
    for _ in range(2000):
        n = rng.integers(2, 9)
        l = rng.uniform(-5, 5, n)
        w = np.exp(l - l.max())
        w /= w.sum()
        cols = rng.uniform(0, 1, (n, 3))
        tgt = rng.uniform(0, 1, 3)
        c = w @ cols
        k = rng.integers(n)
        rest = np.delete(np.arange(n), k)
        wr = np.exp(l[rest] - l[rest].max())
        direct = np.sum(((wr / wr.sum()) @ cols[rest] - tgt) ** 2) - np.sum((c - tgt) ** 2)
        assert abs(removal_delta_pixel(c, tgt, w[k], cols[k]) - direct) < 1e-10


def test_removal_delta_matches_rerender():
    _, store, field, target = random_problem(9, n=40)
    rng = np.random.default_rng(10)
    from sadiagram.candidates import INVALID_ID
    for y, x in rng.integers(0, 40, (200, 2)):
        ids = [int(i) for i in field.ids[y, x] if i != INVALID_ID]
        w = pixel_weights((float(x), float(y)), ids, store)
        c = sum(wi * store.color[i] for i, wi in w)
        base = np.sum((c - target[y, x]) ** 2)
        for j, (k, wk) in enumerate(w):
            rest = [i for i in ids if i != k]
            if not rest:
                continue
            w2 = pixel_weights((float(x), float(y)), rest, store)
            c2 = sum(wi * store.color[i] for i, wi in w2)
            direct = np.sum((c2 - target[y, x]) ** 2) - base
            got = removal_delta_pixel(c, target[y, x], wk, store.color[k])
            if wk >= 1.0 - 1e-6:
                assert got == math.inf  # sole-explainer surrogate
                continue
            err = abs(got - direct)
            if 1.0 - wk >= 1e-5:
                assert err < 1e-10
            else:
                # inputs rounded to 64 bits already move the answer by ~eps / (1 - w_k)
                assert err < 1e-10 + 64 * np.finfo(float).eps / (1.0 - wk)


def test_zero_weight_site_has_zero_removal(rng):
    store = make_store(rng, 24, 24, 10)
    store.params[9] = store.params[0]
    store.pos[9] = (23.0, 23.0)
    store.radius[9] = 0.0
    store.log_tau[9] = 20.0
    field = converged_field(store)
    field.ids[field.ids == 9] = field.ids[field.ids == 9]  # keep lists as they are
    g, _ = backward(store, field, rng.uniform(0, 1, (24, 24, 3)))
    listed = (field.ids == 9).any()
    if not listed:
        assert g.removal_delta[9] == 0.0


def test_small_step_decreases_loss():
    _, store, field, target = random_problem(11)
    g, loss = backward(store, field, target)
    s = store.copy()
    s.params[:50] -= 1e-4 * g.params[:50] / np.abs(g.params[:50]).max()
    assert loss_only(s, field, target) < loss
