"""The numba kernels and their numpy fallbacks agree."""

import numpy as np
import pytest

from tip import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not available or disabled")


def test_min_dist():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5, 20, 2)) * 10
    b = rng.normal(size=(5, 20, 2)) * 10
    valid = rng.random((3, 5, 20)) < 0.8
    valid[0, 0] = False
    d1, i1 = K.min_dist_numpy(a, b, valid)
    d2, i2 = K.min_dist_numba(a, b, valid)
    assert np.allclose(d1, d2, rtol=1e-14, atol=0) and np.isinf(d2[0, 0])
    assert np.array_equal(i1, i2) and i2[0, 0] == -1


def test_auc_numerator_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.integers(0, 6, 300).astype(float)
        y = rng.random(300) < 0.3
        assert K.auc_numerator_numpy(s, y) == K.auc_numerator_numba(s, y)


@pytest.mark.parametrize("factor", [0.5, 0.8, 1.0, 1.2, 2.5])
def test_rescale_progress(factor):
    rng = np.random.default_rng(2)
    s = np.cumsum(rng.uniform(0.0, 2.5, 60))
    args = (factor, 0.0, 30.0, 3.0, 0.1)
    assert np.array_equal(K.rescale_progress_numpy(s, *args), K.rescale_progress_numba(s, *args))


@pytest.mark.parametrize("stopped_tail", [False, True])
def test_interp_path(stopped_tail):
    rng = np.random.default_rng(3)
    verts = np.cumsum(rng.normal(size=(15, 2)), axis=0)
    if stopped_tail:
        verts = np.vstack([verts, verts[-1], verts[-1]])
    cum = np.r_[0.0, np.cumsum(np.hypot(*np.diff(verts, axis=0).T))]
    q = np.sort(rng.uniform(-1.0, cum[-1] + 10.0, 200))
    assert np.allclose(K.interp_path_numpy(verts, cum, q), K.interp_path_numba(verts, cum, q),
                       rtol=0, atol=1e-12)


def test_idm_rollout():
    active = np.zeros(100, bool)
    active[:70] = True
    obstacle = np.full(100, 55.0)
    args = (0.0, 12.0, 12.0, obstacle, active, 1.5, 1.4, 2.0, 2.0, 4.0, 0.1)
    assert np.allclose(K.idm_rollout_numpy(*args), K.idm_rollout_numba(*args), rtol=1e-13, atol=0)
