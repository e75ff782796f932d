import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridval.case_io import build_network, synthetic_case
from gridval.lindistflow import predict_voltages, sensitivity_matrices

from oracles import oracle_matrices, recursion_oracle


def _pu_net(parents, r_pu, x_pu):
    # base 1 MVA at 1 kV makes ohms equal per-unit
    return build_network(synthetic_case(parents, r_pu, x_pu, base_mva=1.0, base_kv=1.0))


def test_single_line():
    s = sensitivity_matrices(_pu_net([1], 0.1, 0.2))
    assert np.allclose(s.R, [[0.2]]) and np.allclose(s.B, [[0.4]]) and np.allclose(s.a, [1.0])
    assert predict_voltages(s, [0.1], [0.05]) == pytest.approx([1.04])


def test_two_node_chain():
    s = sensitivity_matrices(_pu_net([1, 2], 0.1, 0.1))
    assert np.allclose(s.R, [[0.2, 0.2], [0.2, 0.4]], atol=1e-15)


def test_zero_impedance():
    s = sensitivity_matrices(_pu_net([1, 2, 2], 0.0, 0.0), v0_sq=1.05)
    assert not s.R.any() and not s.B.any() and np.all(s.a == 1.05)


def test_bad_inputs():
    s = sensitivity_matrices(_pu_net([1], 0.1, 0.2))
    with pytest.raises(ValueError):
        predict_voltages(s, [0.1, 0.2], [0.0])
    with pytest.raises(ValueError):
        sensitivity_matrices(_pu_net([1], 0.1, 0.2), v0_sq=0.0)


def _check_against_oracle(net):
    s = sensitivity_matrices(net)
    R, B, a = oracle_matrices(net)
    assert np.abs(s.R - R).max() <= 1e-10
    assert np.abs(s.B - B).max() <= 1e-10
    assert np.abs(s.a - a).max() <= 1e-10
    for M in (s.R, s.B):
        assert np.array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-12
        assert np.all(np.diag(M)[:, None] >= M - 1e-15) and M.min() >= 0
    return s


def test_case33_oracle(net33):
    _check_against_oracle(net33)


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_chain_and_star(n):
    rng = np.random.default_rng(n)
    _check_against_oracle(_pu_net(list(range(1, n + 1)), rng.uniform(0.01, 0.3, n), rng.uniform(0.01, 0.3, n)))
    _check_against_oracle(_pu_net([1] * n, rng.uniform(0.01, 0.3, n), rng.uniform(0.01, 0.3, n)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 99), min_size=1, max_size=15), st.integers(0, 2**31 - 1))
def test_random_trees(parent_seeds, seed):
    parents = [1 + (s % (k + 1)) for k, s in enumerate(parent_seeds)]
    rng = np.random.default_rng(seed)
    n = len(parents)
    s = _check_against_oracle(_pu_net(parents, rng.uniform(0, 0.5, n), rng.uniform(0, 0.5, n)))
    p = rng.normal(size=n)
    q = rng.normal(size=n)
    dp = np.abs(rng.normal(size=n))
    # affinity and monotonicity in active injection
    assert np.allclose(predict_voltages(s, p + dp, q) - predict_voltages(s, p, q), s.R @ dp)
    assert np.all(predict_voltages(s, p + dp, q) >= predict_voltages(s, p, q) - 1e-12)


def test_batched_prediction(net33):
    s = sensitivity_matrices(net33)
    rng = np.random.default_rng(0)
    p = rng.normal(size=(4, 32)) * 0.01
    q = rng.normal(size=(4, 32)) * 0.01
    v = predict_voltages(s, p, q)
    for k in range(4):
        assert np.allclose(v[k], recursion_oracle(net33, p[k], q[k]), atol=1e-12)
