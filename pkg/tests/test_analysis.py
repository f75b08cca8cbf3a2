import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from siftlab.analysis import (AnalysisError, energy_captured, epsilon_for_tau, grad_histogram,
                              mask_capture_series, min_subspace_cosine, sparsity_profile,
                              verify_descent_bound)
from siftlab.sift import MaskSelection, calibrate_mask, topk_indices
from siftlab.tasks import BatchStream

from helpers import mlp_setup

G = np.array([3.0, -4.0, 0.1, 0.2])


def test_profile_example():
    prof = sparsity_profile(G, [0.5, 1.0])
    assert prof.energy_fraction[0] == pytest.approx(25 / 25.05, rel=1e-15)
    assert prof.energy_fraction[1] == 1.0
    assert prof.abs_fraction[0] == pytest.approx(7 / 7.3, rel=1e-15)


def test_profile_one_hot_and_uniform():
    g = np.zeros(50)
    g[7] = -2.0
    assert sparsity_profile(g, [0.01, 0.5, 1.0]).energy_fraction == [1.0, 1.0, 1.0]
    assert sparsity_profile(np.full(100, 0.3), [0.25]).energy_fraction[0] == pytest.approx(0.25, rel=1e-14)


def test_profile_rejects_zero_and_bad_fractions():
    with pytest.raises(AnalysisError):
        sparsity_profile(np.zeros(4), [0.5])
    with pytest.raises(AnalysisError):
        sparsity_profile(G, [0.5, 0.1])


def test_epsilon_examples():
    assert epsilon_for_tau(G, 2) == pytest.approx(0.04 / 25, rel=1e-14)
    assert epsilon_for_tau(np.array([0.0, 5.0, 0.0]), 1) == 0.0
    assert epsilon_for_tau(np.array([2.0, -2.0]), 1) == 1.0
    with pytest.raises(AnalysisError):
        epsilon_for_tau(G, 4)


def test_cosine_examples():
    assert min_subspace_cosine(G, [0, 1]) == pytest.approx(-5 / math.sqrt(25.05), rel=1e-15)
    assert min_subspace_cosine(G, range(4)) == pytest.approx(-1.0, rel=1e-15)
    assert min_subspace_cosine(np.array([1.0, 0.0, 0.0]), [1, 2]) == 0.0


def test_bound_example_chain():
    rep = verify_descent_bound(G, 2)
    assert rep.cosine_min == pytest.approx(-0.99900, abs=5e-6)
    assert rep.bound == pytest.approx(-1 / math.sqrt(1 + 0.0016 * 2), rel=1e-14)
    assert rep.bound == pytest.approx(-0.99840, abs=5e-6)
    assert rep.holds and rep.tau_over_n_bound == -0.5


def test_bound_one_hot_equality():
    rep = verify_descent_bound(np.array([0.0, 0.0, 7.0]), 1)
    assert rep.cosine_min == -1.0 and rep.bound == -1.0 and rep.holds


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 200),
                  elements=st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)),
       st.floats(0.001, 0.999))
def test_bound_holds_property(g, frac):
    if not np.any(g):
        return
    tau = min(g.size - 1, max(1, math.ceil(frac * g.size)))
    assert verify_descent_bound(g, tau).holds


def _brute_force_best(g, k):
    best = -1.0
    for s in itertools.combinations(range(g.size), k):
        best = max(best, float(np.linalg.norm(g[list(s)])))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_topk_maximizes_projection(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    g = rng.standard_normal(n) * rng.choice([1e-3, 1.0, 1e3])
    for k in range(1, n + 1):
        top = float(np.linalg.norm(g[topk_indices(g, k)]))
        assert top == _brute_force_best(g, k)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3, allow_nan=False)),
       st.integers(-20, 20))
def test_profile_scale_invariant(g, power):
    # powers of two scale exactly, so the fractions must agree bit for bit
    if not np.any(g):
        return
    fr = [0.1, 0.5, 1.0]
    a = sparsity_profile(g, fr)
    b = sparsity_profile(g * 2.0 ** power, fr)
    assert a.energy_fraction == b.energy_fraction and a.abs_fraction == b.abs_fraction


def test_energy_captured_bounds():
    assert energy_captured(G, [0, 1]) == pytest.approx(25 / 25.05)
    with pytest.raises(AnalysisError):
        energy_captured(np.zeros(3), [0])


def test_histogram_examples():
    h = grad_histogram(np.array([-1.0, 0.0, 1.0]), bins=2, value_range=(-1.0, 1.0))
    assert h.counts.tolist() == [1, 2]
    g = np.random.default_rng(0).standard_normal(1001)
    h = grad_histogram(g, bins=30)
    assert h.counts.sum() == g.size
    sym = np.concatenate([g, -g])
    assert abs(grad_histogram(sym).mean) < 1e-12
    logh = grad_histogram(np.array([0.0, 1e-3, 1.0, 10.0]), bins=4, log_scale=True)
    assert logh.counts.sum() == 4


def _capture(names_rate=0.2, same=False):
    model, params, data = mlp_setup(3)
    names = sorted(params)
    stream = list(BatchStream(data, 8, 3))
    if same:
        stream = [stream[0]] * 4
    mask = calibrate_mask(model, params, names, iter(stream), names_rate)
    return mask_capture_series(model, params, names, mask, stream, len(stream))


def test_capture_fixed_never_beats_own():
    for own, fixed in _capture():
        assert fixed <= own


def test_capture_identical_batches():
    for own, fixed in _capture(same=True):
        assert own == fixed
