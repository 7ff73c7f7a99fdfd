import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delta_uq import nn_core, oracle
from delta_uq.data import DatasetSource, ingest
from delta_uq.nn_core import Dataset, NetworkConfig
from delta_uq.spectral import (
    BundleInvariantError,
    LanczosConfig,
    LanczosNotConverged,
    LinearOperator,
    bundle_from_matrix,
    hessian_topk,
    lanczos_topk,
    linearize_gap,
    make_bundle,
    opg_topk,
    spectrum_report,
)


def random_spd(p, seed, lam=0.01):
    a = np.random.default_rng(seed).standard_normal((p, p))
    return a @ a.T / p + lam * np.eye(p)


# -- Lanczos ------------------------------------------------------------------


def test_lanczos_diagonal_top3():
    res = lanczos_topk(LinearOperator.from_matrix(np.diag(np.arange(1.0, 11.0))), LanczosConfig(3))
    np.testing.assert_allclose(res.eigenvalues, [10, 9, 8], rtol=0, atol=1e-12)
    # eigenvectors are the trailing unit vectors, sign-normalised to a positive largest entry
    np.testing.assert_allclose(np.abs(res.eigenvectors), np.eye(10)[:, [9, 8, 7]], atol=1e-8)
    assert np.all(res.residuals <= 1e-8)


def test_lanczos_random_matrix_against_dense():
    a = random_spd(50, 0)
    res = lanczos_topk(LinearOperator.from_matrix(a), LanczosConfig(10))
    ref_vals, ref_vecs = oracle.dense_eig(a)
    np.testing.assert_allclose(res.eigenvalues, ref_vals[:10], rtol=1e-10)
    overlap = np.abs(np.sum(res.eigenvectors * ref_vecs[:, :10], axis=0))
    np.testing.assert_allclose(overlap, 1.0, atol=1e-8)
    resid = np.linalg.norm(a @ res.eigenvectors - res.eigenvectors * res.eigenvalues, axis=0)
    assert resid.max() <= 1e-8


def test_lanczos_full_dimension_and_determinism():
    a = random_spd(12, 1)
    r1 = lanczos_topk(LinearOperator.from_matrix(a), LanczosConfig(11, seed=3))
    r2 = lanczos_topk(LinearOperator.from_matrix(a), LanczosConfig(11, seed=3))
    np.testing.assert_allclose(r1.eigenvalues, np.sort(np.linalg.eigvalsh(a))[::-1][:11], rtol=1e-12)
    np.testing.assert_array_equal(r1.eigenvectors, r2.eigenvectors)


def test_lanczos_rejects_k_equal_dimension():
    with pytest.raises(ValueError):
        lanczos_topk(LinearOperator.from_matrix(np.eye(4)), LanczosConfig(4))


def test_lanczos_not_converged_carries_partial_result():
    a = np.diag(np.linspace(1.0, 1.001, 200))  # tightly clustered, hard in few steps
    with pytest.raises(LanczosNotConverged) as info:
        lanczos_topk(LinearOperator.from_matrix(a), LanczosConfig(5, max_iters=6, tol=1e-14))
    assert info.value.partial.eigenvalues.shape == (5,)


@pytest.mark.parametrize("kwargs", [{"k": 0}, {"k": 2, "tol": 0.0}, {"k": 2, "reorthogonalization": "none"}])
def test_lanczos_config_validation(kwargs):
    with pytest.raises(ValueError):
        LanczosConfig(**kwargs)


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=20, deadline=None)
def test_lanczos_vectors_orthonormal_and_sorted(seed, k):
    a = random_spd(25, seed)
    res = lanczos_topk(LinearOperator.from_matrix(a), LanczosConfig(k, max_iters=25, seed=seed))
    q = res.eigenvectors
    assert np.abs(q.T @ q - np.eye(k)).max() <= 1e-10
    assert np.all(np.diff(res.eigenvalues) <= 0)


# -- gap linearisation and bundles --------------------------------------------


def test_gap_linearisation_hand_values():
    lam_tilde, eps = linearize_gap(0.01, 0.03)
    assert lam_tilde == pytest.approx(0.015, rel=1e-14)
    assert eps == pytest.approx(100 / 3, rel=1e-14)
    assert linearize_gap(0.5, 0.5) == (0.5, 0.0)


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 10.0))
def test_gap_linearisation_properties(lam, lam_k):
    lt, eps = linearize_gap(lam, lam_k)
    assert min(lam, lam_k) * (1 - 1e-12) <= lt <= max(lam, lam_k) * (1 + 1e-12)
    # the reciprocal interval is centred on 1/lam_tilde
    assert 1 / lt - eps == pytest.approx(min(1 / lam, 1 / lam_k), rel=1e-9)
    assert 1 / lt + eps == pytest.approx(max(1 / lam, 1 / lam_k), rel=1e-9)


def test_linearize_gap_rejects_nonpositive():
    with pytest.raises(ValueError):
        linearize_gap(0.01, 0.0)


def test_bundle_from_matrix_complete_and_flags():
    b = bundle_from_matrix("hessian", np.diag([3.0, 1.0, 2.0]), 0.5, 10)
    np.testing.assert_array_equal(b.eigenvalues, [3.0, 2.0, 1.0])
    assert (b.k, b.n_params, b.lam_k, b.flags) == (3, 3, 1.0, ())
    low = bundle_from_matrix("hessian", np.diag([3.0, 0.2]), 0.5, 10)
    assert low.bound_degraded
    neg = bundle_from_matrix("hessian", np.diag([3.0, -0.2]), 0.5, 10)
    assert "indefinite" in neg.flags and np.isnan(neg.lam_tilde)


def corrupt(bundle, **changes):
    return dataclasses.replace(bundle, **changes)


@pytest.mark.parametrize(
    "name, change",
    [
        ("kind", lambda b: corrupt(b, kind="fisher")),
        ("shape", lambda b: corrupt(b, vectors=b.vectors[:, :2])),
        ("finite", lambda b: corrupt(b, eigenvalues=np.array([np.nan, *b.eigenvalues[1:]]))),
        ("positivity", lambda b: corrupt(b, n_examples=0)),
        ("ordering", lambda b: corrupt(b, eigenvalues=b.eigenvalues[::-1].copy())),
        ("orthonormality", lambda b: corrupt(b, vectors=b.vectors * 1.01)),
        ("gap_linearization", lambda b: corrupt(b, lam_tilde=b.lam_tilde * 1.1)),
        ("bound_flag", lambda b: corrupt(b, flags=("bound_degraded",))),
    ],
)
def test_validate_names_the_failed_invariant(name, change):
    b = bundle_from_matrix("hessian", random_spd(6, 2, lam=1.0), 0.1, 20, k=3)
    with pytest.raises(BundleInvariantError, match=f"^{name}:"):
        change(b).validate()


def test_opg_lower_bound_invariant():
    b = bundle_from_matrix("opg", np.diag([2.0, 1.0]), 0.5, 5)
    with pytest.raises(BundleInvariantError, match="^opg_lower_bound:"):
        corrupt(b, eigenvalues=np.array([2.0, 0.4]), lam_tilde=linearize_gap(0.5, 0.4)[0],
                eps_lambda=linearize_gap(0.5, 0.4)[1], flags=("bound_degraded",)).validate()


def test_make_bundle_strips_stale_flags():
    b = make_bundle("hessian", [2.0, 1.0], np.eye(2), 0.5, 3, flags=("bound_degraded", "padded"))
    assert b.flags == ("padded",)


# -- Hessian and OPG bundles on networks --------------------------------------


@pytest.fixture(scope="module")
def problem():
    net = NetworkConfig((3, 5, 3), 0.05)
    data = ingest(DatasetSource("synthetic_blobs", n_classes=3, n_examples=50, dims=3, separation=2.0))
    omega = nn_core.init_params(net, 1) + 0.1 * np.random.default_rng(1).standard_normal(net.n_params)
    return net, omega, data


def test_hessian_topk_against_dense(problem):
    net, omega, data = problem
    b = hessian_topk(net, omega, data, 8)
    ref = np.sort(np.linalg.eigvalsh(oracle.dense_hessian(net, omega, data)))[::-1][:8]
    np.testing.assert_allclose(b.eigenvalues, ref, rtol=1e-8)
    assert b.kind == "hessian" and b.iterations is not None


def test_linear_softmax_hessian_shift():
    # single-layer softmax regression: H(lam2) - H(lam1) = (lam2 - lam1) I exactly
    data = Dataset.from_labels(np.random.default_rng(0).standard_normal((30, 2)), np.arange(30) % 2, 2)
    omega = np.random.default_rng(1).standard_normal(6)
    b1 = hessian_topk(NetworkConfig((2, 2), 0.01), omega, data, 3)
    b2 = hessian_topk(NetworkConfig((2, 2), 0.11), omega, data, 3)
    np.testing.assert_allclose(b2.eigenvalues - b1.eigenvalues, 0.1, atol=1e-10)


def test_opg_topk_against_dense(problem):
    net, omega, data = problem
    b = opg_topk(net, omega, data, 10)
    vals, vecs = np.linalg.eigh(oracle.dense_opg(net, omega, data))
    np.testing.assert_allclose(b.eigenvalues, vals[::-1][:10], rtol=1e-9)
    g = oracle.dense_opg(net, omega, data)
    assert np.linalg.norm(g @ b.vectors - b.vectors * b.eigenvalues, axis=0).max() <= 1e-8
    assert np.all(b.eigenvalues >= net.l2_rate)


@pytest.mark.parametrize("block_size", [7, 64, 50])
def test_opg_block_size_invariance(problem, block_size):
    net, omega, data = problem
    ref = opg_topk(net, omega, data, 6, block_size=1)
    b = opg_topk(net, omega, data, 6, block_size=block_size)
    np.testing.assert_allclose(b.eigenvalues, ref.eigenvalues, rtol=1e-9)
    np.testing.assert_allclose(np.abs(np.sum(b.vectors * ref.vectors, axis=0)), 1.0, atol=1e-6)


def test_opg_single_example_is_rank_one(problem):
    net, omega, data = problem
    one = data.subset([0])
    b = opg_topk(net, omega, one, 3)
    j = nn_core.per_example_grads(net, omega, one)[0]
    assert b.eigenvalues[0] == pytest.approx(j @ j + net.l2_rate, rel=1e-12)
    np.testing.assert_allclose(b.eigenvalues[1:], net.l2_rate)
    assert "padded" in b.flags
    np.testing.assert_allclose(np.abs(b.vectors[:, 0]), np.abs(j) / np.linalg.norm(j), atol=1e-12)
    assert np.abs(b.vectors.T @ b.vectors - np.eye(3)).max() <= 1e-12


def test_opg_argument_checks(problem):
    net, omega, data = problem
    with pytest.raises(ValueError):
        opg_topk(net, omega, data, 0)
    with pytest.raises(ValueError):
        opg_topk(net, omega, data, 2, block_size=0)


def test_spectrum_report_counts_negative_curvature(problem):
    net, omega, data = problem
    h = oracle.dense_hessian(net, omega, data)
    b = bundle_from_matrix("hessian", h, net.l2_rate, len(data))
    rep = spectrum_report(b)
    vals = b.eigenvalues
    assert rep["n_negative"] == int(np.sum(vals < 0)) > 0
    assert rep["n_below_l2_rate"] == int(np.sum(vals < net.l2_rate))
    assert (rep["K"], rep["P"], rep["N"]) == (net.n_params, net.n_params, len(data))
