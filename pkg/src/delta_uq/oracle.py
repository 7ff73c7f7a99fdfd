"""Dense brute-force references for small networks.

These are the ground truth the matrix-free code is checked against, so they
deliberately avoid the main code paths: per-example gradients come from a
plain per-example loop, eigendecompositions from cyclic Jacobi rotations, and
variances from explicit inverses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .nn_core import Dataset, NetworkConfig

MAX_DENSE_PARAMS = 2000


class OracleGuardError(ValueError):
    """Raised when a dense computation is requested for too many parameters."""


class SingularCurvatureError(np.linalg.LinAlgError):
    def __init__(self, smallest: float):
        super().__init__(f"curvature matrix is not positive definite (smallest eigenvalue {smallest:.6g})")
        self.smallest = smallest


@dataclass(frozen=True)
class DenseCurvature:
    H: np.ndarray
    G: np.ndarray
    omega: np.ndarray
    l2_rate: float
    n_examples: int


def _guard(config: NetworkConfig):
    p = nn_core.param_count(config)
    if p > MAX_DENSE_PARAMS:
        raise OracleGuardError(f"P={p} exceeds the dense oracle limit of {MAX_DENSE_PARAMS}")
    return p


# -- straight-line reference evaluation ------------------------------------


def _layers(config, omega):
    sizes = config.layer_sizes
    omega = np.asarray(omega, dtype=np.float64)
    out, k = [], 0
    for l in range(1, len(sizes)):
        rows, cols = sizes[l], sizes[l - 1]
        w = np.empty((rows, cols))
        for i in range(rows):
            w[i, :] = omega[k:k + cols]
            k += cols
        b = omega[k:k + rows].copy()
        k += rows
        out.append((w, b))
    return out


def reference_forward(config: NetworkConfig, omega, x) -> np.ndarray:
    """Probabilities for a single input, evaluated layer by layer without batching."""
    layers = _layers(config, omega)
    a = np.asarray(x, dtype=np.float64)
    for w, b in layers[:-1]:
        a = np.maximum(w.dot(a) + b, 0.0)
    w, b = layers[-1]
    z = w.dot(a) + b
    e = np.exp(z - z.max())
    return e / e.sum()


def reference_example_grad(config: NetworkConfig, omega, x, y) -> np.ndarray:
    """Gradient of ``-sum(y * log softmax)`` for one example, by explicit backprop."""
    layers = _layers(config, omega)
    acts = [np.asarray(x, dtype=np.float64)]
    pre = []
    for w, b in layers[:-1]:
        z = w.dot(acts[-1]) + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0))
    w, b = layers[-1]
    z = w.dot(acts[-1]) + b
    e = np.exp(z - z.max())
    delta = e / e.sum() - np.asarray(y, dtype=np.float64)
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        grads.append((np.outer(delta, acts[l]).ravel(), delta.copy()))
        if l > 0:
            delta = layers[l][0].T.dot(delta) * (pre[l - 1] > 0.0)
    grads.reverse()
    return np.concatenate([np.concatenate(pair) for pair in grads])


def fd_gradient(fun, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar (or vector) valued ``fun`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def activation_pattern(config: NetworkConfig, omega, inputs) -> np.ndarray:
    """Boolean (N, hidden units) matrix of which ReLUs are active."""
    layers = _layers(config, omega)
    a = np.asarray(inputs, dtype=np.float64).T
    pattern = []
    for w, b in layers[:-1]:
        z = w.dot(a) + b[:, None]
        pattern.append(z > 0.0)
        a = np.maximum(z, 0.0)
    if not pattern:
        return np.zeros((a.shape[1], 0), dtype=bool)
    return np.vstack(pattern).T


def crosses_kink(config: NetworkConfig, omega, inputs, directions, h: float = 1e-5) -> bool:
    """True if a central-difference probe ``omega +- h d`` changes any ReLU state.

    ``directions`` is one vector or a (m, P) stack.  Finite differences taken
    across a kink measure a jump rather than a derivative, so such probes are
    excluded from derivative comparisons.
    """
    base = activation_pattern(config, omega, inputs)
    for d in np.atleast_2d(np.asarray(directions, dtype=np.float64)):
        for sign in (1.0, -1.0):
            if not np.array_equal(activation_pattern(config, omega + sign * h * d, inputs), base):
                return True
    return False


# -- dense curvature ---------------------------------------------------------


def dense_hessian(config: NetworkConfig, omega, data: Dataset) -> np.ndarray:
    """Hessian of the cost including ``l2_rate * I``, assembled column by column from HVPs."""
    p = _guard(config)
    cols = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        cols[:, j] = nn_core.hvp(config, omega, data, e)
        e[j] = 0.0
    asym = np.abs(cols - cols.T).max()
    scale = max(1.0, np.abs(cols).max())
    if asym > 1e-9 * scale:
        raise AssertionError(f"assembled Hessian asymmetric by {asym:.3g}")
    return 0.5 * (cols + cols.T)


def dense_opg(config: NetworkConfig, omega, data: Dataset) -> np.ndarray:
    """``(1/N) sum_n g_n g_n^T + l2_rate * I`` accumulated one example at a time."""
    p = _guard(config)
    acc = np.zeros((p, p))
    for x, y in zip(data.inputs, data.targets):
        g = reference_example_grad(config, omega, x, y)
        acc += np.outer(g, g)
    return acc / len(data) + config.l2_rate * np.eye(p)


def dense_curvature(config: NetworkConfig, omega, data: Dataset) -> DenseCurvature:
    return DenseCurvature(
        dense_hessian(config, omega, data),
        dense_opg(config, omega, data),
        np.asarray(omega, dtype=np.float64).copy(),
        config.l2_rate,
        len(data),
    )


# -- Jacobi eigensolver ------------------------------------------------------


def _round_robin(m: int):
    order = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array([order[i] for i in range(m // 2)])
        q = np.array([order[m - 1 - i] for i in range(m // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        order = [order[0], order[-1]] + order[1:-1]
    return rounds


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def dense_eig(a, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Disjoint rotation pairs from a round-robin schedule are applied together.
    Returns eigenvalues in descending order and matching orthonormal columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    n = a.shape[0]
    scale = max(1.0, np.abs(a).max())
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    if n == 1:
        return a[0].copy(), np.ones((1, 1))
    m = n + n % 2
    A = np.zeros((m, m))
    A[:n, :n] = 0.5 * (a + a.T)
    V = np.eye(m)
    rounds = _round_robin(m)
    fro = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * fro:
            break
        for p, q in rounds:
            app, aqq, apq = A[p, p], A[q, q], A[p, q]
            c = np.ones_like(apq)
            s = np.zeros_like(apq)
            nz = np.abs(apq) > 1e-300
            tau = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
            with np.errstate(over="ignore"):
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c[nz] = 1.0 / np.sqrt(1.0 + t * t)
            s[nz] = t * c[nz]
            cp, cq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = c * cp - s * cq
            A[:, q] = s * cp + c * cq
            rp, rq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            A[p, q] = 0.0
            A[q, p] = 0.0
            vp, vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
    vals = np.diag(A)[:n].copy()
    vecs = V[:n, :n]
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


# -- exact Delta-method variances ------------------------------------------


def _inverse(vals, vecs):
    if vals.min() <= 0.0:
        raise SingularCurvatureError(float(vals.min()))
    return (vecs / vals) @ vecs.T


def _clamped_eig(mat, lam, clamp):
    vals, vecs = dense_eig(mat)
    if clamp is not None:
        k, lam_k = clamp
        vals = vals.copy()
        vals[k:] = np.clip(vals[k:], min(lam, lam_k), max(lam, lam_k))
    return vals, vecs


def exact_delta_variance(kind: str, curv: DenseCurvature, F, clamp=None) -> np.ndarray:
    """Per-class variance ``diag(F Sigma F^T)`` with the dense covariance of ``kind``.

    ``clamp=(K, lambda_K)`` projects eigenvalues beyond position K onto
    ``[lambda, lambda_K]`` before inversion (applied to H for the Hessian and
    sandwich kinds, to G for the OPG kind).  ``F`` is (T, P) or (n, T, P).
    """
    if kind == "hessian":
        cov = _inverse(*_clamped_eig(curv.H, curv.l2_rate, clamp))
    elif kind == "opg":
        cov = _inverse(*_clamped_eig(curv.G, curv.l2_rate, clamp))
    elif kind == "sandwich":
        hinv = _inverse(*_clamped_eig(curv.H, curv.l2_rate, clamp))
        cov = hinv @ curv.G @ hinv
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    cov = cov / curv.n_examples
    F = np.asarray(F, dtype=np.float64)
    return np.einsum("...ip,pq,...iq->...i", F, cov, F)


# -- H versus G under model-sampled labels -----------------------------------


def fisher_equality_gap(
    config: NetworkConfig,
    omega,
    n_examples: int,
    seeds=(0, 1, 2, 3, 4),
    input_scale: float = 1.0,
) -> float:
    """Relative Frobenius gap between the data terms of H and G, averaged over seeds.

    Inputs are standard normal (times ``input_scale``); labels are drawn from
    the model's own predictive distribution at ``omega``.
    """
    p = _guard(config)
    data_cfg = config.with_l2_rate(0.0)
    gaps = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = input_scale * rng.standard_normal((n_examples, config.n_inputs))
        probs = nn_core.forward(config, omega, x)
        u = rng.random(n_examples)[:, None]
        labels = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), config.n_classes - 1)
        data = Dataset.from_labels(x, labels, config.n_classes)
        h = dense_hessian(data_cfg, omega, data)
        g = dense_opg(data_cfg, omega, data)
        gaps.append(np.linalg.norm(h - g) / np.linalg.norm(h))
    return float(np.mean(gaps))


def sandwich_dense(hb, gb, F) -> tuple[np.ndarray, np.ndarray]:
    """Sandwich variance and worst-case bound built from the eight explicit P x P products.

    ``hb``/``gb`` are Hessian and OPG bundles; only their stored fields are
    used.  Intended for P of a few hundred at most.
    """
    p = hb.vectors.shape[0]
    eye = np.eye(p)
    qh, qg = hb.vectors, gb.vectors
    a_h = qh @ np.diag(1.0 / hb.eigenvalues) @ qh.T
    b_g = qg @ np.diag(gb.eigenvalues) @ qg.T
    r_h = eye - qh @ qh.T
    r_g = eye - qg @ qg.T
    S = a_h @ b_g @ a_h
    A = a_h @ r_g @ a_h
    N_ = r_h @ b_g @ a_h
    D = r_h @ r_g @ a_h
    W = a_h @ b_g @ r_h
    # transpose of D; the product a_h @ r_h @ r_g is identically zero
    I_ = a_h @ r_g @ r_h
    C = r_h @ b_g @ r_h
    Hm = r_h @ r_g @ r_h
    lam, n = hb.l2_rate, hb.n_examples
    lt_h, lt_g = hb.lam_tilde, gb.lam_tilde
    lk_h, lk_g = float(hb.eigenvalues[-1]), float(gb.eigenvalues[-1])
    body = (
        S + lt_g * A + (N_ + W) / lt_h + lt_g / lt_h * (D + I_) + C / lt_h**2 + lt_g / lt_h**2 * Hm
    )
    err = (
        (lk_g - lam) * A
        + (1 / lam - 1 / lk_h) * (N_ + W)
        + (lk_g / lam - lam / lk_h) * (D + I_)
        + (1 / lam**2 - 1 / lk_h**2) * C
        + (lk_g / lam**2 - lam / lk_h**2) * Hm
    )
    F = np.asarray(F, dtype=np.float64)
    var = np.einsum("...ip,pq,...iq->...i", F, body, F) / n
    delta = np.einsum("...ip,pq,...iq->...i", F, err, F) / (2 * n)
    return var, delta
