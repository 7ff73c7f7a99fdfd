"""Top-K eigenpairs of the curvature matrices without forming them.

The Hessian is reached through exact Hessian-vector products inside a
Lanczos iteration; the OPG matrix ``G = J^T J / N + lambda I`` through a
streaming SVD of the per-example gradient matrix ``J``, one block of rows at a
time.  Both produce a :class:`SpectralBundle`, which also carries the
harmonic-mean linearisation of the uncomputed part of the spectrum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import nn_core
from .nn_core import Dataset, NetworkConfig

__all__ = [
    "LinearOperator",
    "LanczosConfig",
    "LanczosResult",
    "LanczosNotConverged",
    "BundleInvariantError",
    "SpectralBundle",
    "lanczos_topk",
    "hessian_operator",
    "hessian_topk",
    "opg_topk",
    "make_bundle",
    "bundle_from_matrix",
    "linearize_gap",
    "spectrum_report",
]


@dataclass(frozen=True)
class LinearOperator:
    """Symmetric linear map on R^dim given only through ``apply``."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, a) -> "LinearOperator":
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape[0], lambda v: a @ v)


@dataclass(frozen=True)
class LanczosConfig:
    k: int
    max_iters: int | None = None  # default min(P, 10 k)
    tol: float = 1e-8
    seed: int = 0
    check_every: int = 10
    reorthogonalization: str = "full"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.reorthogonalization != "full":
            raise ValueError("only full reorthogonalization is supported")


@dataclass
class LanczosResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    iterations: int
    residuals: np.ndarray


class LanczosNotConverged(RuntimeError):
    def __init__(self, partial: LanczosResult, tol: float):
        worst = float(np.max(partial.residuals)) if partial.residuals.size else float("nan")
        super().__init__(
            f"Lanczos did not converge in {partial.iterations} iterations "
            f"(worst residual {worst:.3g}, tol {tol:.3g})"
        )
        self.partial = partial


class BundleInvariantError(ValueError):
    """A spectral bundle violates one of its invariants; the message names it."""


def _fix_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _ritz(alpha, beta, k):
    theta, s = eigh_tridiagonal(np.asarray(alpha), np.asarray(beta))
    top = np.argsort(-theta, kind="stable")[:k]
    return theta[top], s[:, top]


def lanczos_topk(op: LinearOperator, cfg: LanczosConfig) -> LanczosResult:
    """The ``cfg.k`` algebraically largest eigenpairs of a symmetric operator.

    Plain Lanczos with full (twice-applied Gram-Schmidt) reorthogonalisation.
    Ritz pairs are tested every ``cfg.check_every`` steps; a pair is accepted
    when ``||A q - theta q|| <= tol * max(1, |theta|)``, and the final pairs
    are re-verified with explicit products before returning.  On exhaustion
    of the Krylov space the iteration restarts from a fresh vector orthogonal
    to the basis, so repeated eigenvalues are found with full multiplicity.
    """
    p, k = op.dim, cfg.k
    if k >= p:
        raise ValueError(f"k={k} must be smaller than the dimension {p}")
    s_max = min(p, cfg.max_iters if cfg.max_iters is not None else 10 * k)
    if s_max < k:
        raise ValueError(f"max_iters={s_max} is smaller than k={k}")
    rng = np.random.default_rng(cfg.seed)
    basis = np.empty((s_max, p))
    alpha: list[float] = []
    beta: list[float] = []

    q = rng.standard_normal(p)
    q /= np.linalg.norm(q)
    b_prev = 0.0
    scale = 0.0
    theta = vecs = res = None
    for j in range(s_max):
        basis[j] = q
        w = np.asarray(op(q), dtype=np.float64)
        a = float(q @ w)
        w = w - a * q
        if j > 0:
            w -= b_prev * basis[j - 1]
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        b = float(np.linalg.norm(w))
        alpha.append(a)
        scale = max(scale, abs(a) + b + b_prev)
        m = j + 1
        breakdown = b <= 1e-12 * max(scale, 1e-300)

        if m >= k and (m % cfg.check_every == 0 or m == s_max or breakdown):
            theta, s = _ritz(alpha, beta, k)
            res = np.abs((0.0 if breakdown else b) * s[-1, :])
            if np.all(res <= cfg.tol * np.maximum(1.0, np.abs(theta))):
                vecs = basis[:m].T @ s
                true_res = np.linalg.norm(
                    np.column_stack([op(vecs[:, i]) for i in range(k)]) - vecs * theta, axis=0
                )
                if np.all(true_res <= cfg.tol * np.maximum(1.0, np.abs(theta))):
                    return LanczosResult(theta, _fix_signs(vecs), m, true_res)
                res = true_res
        if m == s_max:
            break
        if breakdown:
            q = rng.standard_normal(p)
            for _ in range(2):
                q -= basis[:m].T @ (basis[:m] @ q)
            q /= np.linalg.norm(q)
            beta.append(0.0)
            b_prev = 0.0
        else:
            q = w / b
            beta.append(b)
            b_prev = b

    m = len(alpha)
    theta, s = _ritz(alpha, beta, k)
    vecs = basis[:m].T @ s
    true_res = np.linalg.norm(
        np.column_stack([op(vecs[:, i]) for i in range(k)]) - vecs * theta, axis=0
    )
    raise LanczosNotConverged(LanczosResult(theta, _fix_signs(vecs), m, true_res), cfg.tol)


@dataclass(frozen=True)
class SpectralBundle:
    """Top-K eigenpairs of H or G plus the gap linearisation.

    ``vectors`` is (P, K) with orthonormal columns, ``eigenvalues`` descending.
    ``lam_tilde`` is the harmonic mean of ``l2_rate`` and the smallest computed
    eigenvalue; ``eps_lambda`` is half the width of the reciprocal interval.
    """

    kind: str
    eigenvalues: np.ndarray
    vectors: np.ndarray
    l2_rate: float
    lam_tilde: float
    eps_lambda: float
    n_examples: int
    flags: tuple[str, ...] = ()
    iterations: int | None = None
    residuals: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_params(self) -> int:
        return self.vectors.shape[0]

    @property
    def lam_k(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def bound_degraded(self) -> bool:
        return "bound_degraded" in self.flags

    def validate(self) -> "SpectralBundle":
        """Check every bundle invariant; raise :class:`BundleInvariantError` naming the first failure."""
        vals, q = self.eigenvalues, self.vectors
        if self.kind not in ("hessian", "opg"):
            raise BundleInvariantError(f"kind: unknown bundle kind {self.kind!r}")
        if vals.ndim != 1 or q.ndim != 2 or q.shape[1] != vals.shape[0]:
            raise BundleInvariantError("shape: eigenvectors do not match eigenvalues")
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(q))):
            raise BundleInvariantError("finite: bundle contains non-finite values")
        if self.n_examples < 1 or self.l2_rate <= 0:
            raise BundleInvariantError("positivity: N and lambda must be positive")
        if np.any(np.diff(vals) > 0):
            raise BundleInvariantError("ordering: eigenvalues are not sorted in descending order")
        ortho = np.abs(q.T @ q - np.eye(q.shape[1])).max()
        if ortho > 1e-8:
            raise BundleInvariantError(f"orthonormality: |Q^T Q - I|_max = {ortho:.3g} exceeds 1e-8")
        if self.kind == "opg" and vals[-1] < self.l2_rate - 1e-12:
            raise BundleInvariantError(
                f"opg_lower_bound: smallest eigenvalue {vals[-1]:.6g} below lambda {self.l2_rate:.6g}"
            )
        if self.lam_k <= 0:
            if "indefinite" not in self.flags or not np.isnan(self.lam_tilde):
                raise BundleInvariantError("gap_linearization: nonpositive lambda_K must be flagged indefinite")
            return self
        lt, eps = linearize_gap(self.l2_rate, self.lam_k)
        if not (np.isclose(lt, self.lam_tilde, rtol=1e-12, atol=0) and np.isclose(eps, self.eps_lambda, rtol=1e-12, atol=1e-300)):
            raise BundleInvariantError("gap_linearization: lam_tilde/eps_lambda inconsistent with lambda and lambda_K")
        if (self.lam_k < self.l2_rate) != self.bound_degraded:
            raise BundleInvariantError("bound_flag: bound_degraded flag inconsistent with lambda_K < lambda")
        return self


def linearize_gap(l2_rate: float, lam_k: float) -> tuple[float, float]:
    """Harmonic mean of ``l2_rate`` and ``lam_k`` and half-width of the reciprocal interval."""
    if lam_k <= 0:
        raise ValueError(f"smallest computed eigenvalue {lam_k:.6g} is not positive; the gap cannot be linearised")
    lam_tilde = 2.0 / (1.0 / l2_rate + 1.0 / lam_k)
    eps = abs(1.0 / l2_rate - 1.0 / lam_k) / 2.0
    return lam_tilde, eps


def make_bundle(kind, eigenvalues, vectors, l2_rate, n_examples, flags=(), iterations=None, residuals=None):
    vals = np.asarray(eigenvalues, dtype=np.float64)
    vecs = np.asarray(vectors, dtype=np.float64)
    flags = set(flags) - {"bound_degraded", "indefinite"}
    if vals[-1] < l2_rate:
        flags.add("bound_degraded")
    if vals[-1] <= 0:
        # no harmonic mean exists; such a bundle can be reported but not used for prediction
        flags.add("indefinite")
        lam_tilde = eps = float("nan")
    else:
        lam_tilde, eps = linearize_gap(float(l2_rate), float(vals[-1]))
    flags = tuple(sorted(flags))
    return SpectralBundle(
        kind, vals, vecs, float(l2_rate), lam_tilde, eps, int(n_examples), flags, iterations,
        None if residuals is None else np.asarray(residuals, dtype=np.float64),
    ).validate()


def bundle_from_matrix(kind: str, matrix, l2_rate: float, n_examples: int, k: int | None = None) -> SpectralBundle:
    """Bundle from an explicit symmetric matrix (small P only); ``k=None`` keeps all P pairs."""
    vals, vecs = np.linalg.eigh(np.asarray(matrix, dtype=np.float64))
    order = np.argsort(-vals, kind="stable")[: (k or len(vals))]
    return make_bundle(kind, vals[order], _fix_signs(vecs[:, order]), l2_rate, n_examples)


def hessian_operator(config: NetworkConfig, omega, data: Dataset, chunk_size: int | None = None) -> LinearOperator:
    return LinearOperator(
        nn_core.param_count(config), lambda v: nn_core.hvp(config, omega, data, v, chunk_size)
    )


def hessian_topk(
    config: NetworkConfig,
    omega,
    data: Dataset,
    k: int,
    lanczos: LanczosConfig | None = None,
    chunk_size: int | None = None,
) -> SpectralBundle:
    """Lanczos bundle for the regularised Hessian of the cost at ``omega``."""
    cfg = lanczos if lanczos is not None else LanczosConfig(k)
    if cfg.k != k:
        cfg = LanczosConfig(k, cfg.max_iters, cfg.tol, cfg.seed, cfg.check_every)
    res = lanczos_topk(hessian_operator(config, omega, data, chunk_size), cfg)
    return make_bundle(
        "hessian", res.eigenvalues, res.eigenvectors, config.l2_rate, len(data),
        iterations=res.iterations, residuals=res.residuals,
    )


def _streamed_gram_product(config, omega, data, block_size, v):
    """``J^T J v`` accumulated block by block over the per-example gradient rows."""
    out = np.zeros_like(v)
    n = len(data)
    for start in range(0, n, block_size):
        block = nn_core.per_example_grads(config, omega, data, slice(start, min(start + block_size, n)))
        out += block.T @ (block @ v)
    return out


def opg_topk(
    config: NetworkConfig,
    omega,
    data: Dataset,
    k: int,
    block_size: int = 64,
    buffer_rank: int | None = None,
    refine_tol: float | None = 1e-10,
    max_passes: int = 100,
    seed: int = 0,
) -> SpectralBundle:
    """Bundle for ``G = J^T J / N + lambda I`` from a streaming SVD of ``J``.

    Each block of per-example gradient rows is stacked under the current
    ``diag(s) V^T`` factor and re-decomposed, keeping at most ``buffer_rank``
    (default ``2k``) right singular vectors between blocks.  Truncation makes
    this single pass approximate, so unless ``refine_tol`` is None the
    retained subspace is then polished by further streamed passes of subspace
    iteration with Rayleigh-Ritz until every top-k residual satisfies
    ``||J^T J v / N - theta v|| <= refine_tol * max(1, theta)``.  Memory stays
    O(buffer_rank * P) throughout.

    Eigenvalues are ``s^2 / N + lambda``.  If ``J`` has rank below ``k`` the
    remaining slots get eigenvalue ``lambda`` and an orthonormal complement,
    and the bundle is flagged ``padded``.
    """
    if config.l2_rate <= 0:
        raise ValueError("the OPG estimator needs l2_rate > 0")
    if block_size < 1:
        raise ValueError("block_size must be positive")
    p = nn_core.param_count(config)
    if not 1 <= k <= p:
        raise ValueError(f"k must lie in [1, {p}]")
    keep_max = min(p, max(k, buffer_rank if buffer_rank is not None else 2 * k))
    n = len(data)
    s = np.zeros(0)
    vt = np.zeros((0, p))
    for start in range(0, n, block_size):
        block = nn_core.per_example_grads(config, omega, data, slice(start, min(start + block_size, n)))
        stacked = np.vstack([s[:, None] * vt, block])
        _, s, vt = np.linalg.svd(stacked, full_matrices=False)
        keep = min(keep_max, s.shape[0])
        s, vt = s[:keep], vt[:keep]
    theta = s**2 / n
    vecs = vt.T

    passes = 0
    if refine_tol is not None and 0 < vecs.shape[1] < p:
        kk = min(k, vecs.shape[1])
        while True:
            y = _streamed_gram_product(config, omega, data, block_size, vecs) / n
            t, w = np.linalg.eigh(vecs.T @ y)
            order = np.argsort(-t, kind="stable")
            t, w = t[order], w[:, order]
            ritz = vecs @ w
            res = np.linalg.norm(y @ w[:, :kk] - ritz[:, :kk] * t[:kk], axis=0)
            theta, vecs = t, ritz
            if np.all(res <= refine_tol * np.maximum(1.0, t[:kk])) or passes >= max_passes:
                break
            vecs = np.linalg.qr(y @ w)[0]
            passes += 1

    rank_tol = max(n, p) * np.finfo(float).eps * (theta[0] if theta.size else 0.0)
    rank = int(np.sum(theta > rank_tol))
    flags = []
    if rank >= k:
        vals = theta[:k] + config.l2_rate
        out = vecs[:, :k]
    else:
        flags.append("padded")
        out = np.zeros((p, k))
        out[:, :rank] = vecs[:, :rank]
        rng = np.random.default_rng(seed)
        extra = rng.standard_normal((p, k - rank))
        for _ in range(2):
            extra -= out[:, :rank] @ (out[:, :rank].T @ extra)
        out[:, rank:] = np.linalg.qr(extra)[0]
        vals = np.full(k, config.l2_rate)
        vals[:rank] = theta[:rank] + config.l2_rate
    return make_bundle("opg", vals, _fix_signs(out), config.l2_rate, n, flags, iterations=passes)


def spectrum_report(bundle: SpectralBundle) -> dict:
    """Machine-readable summary of a bundle's computed spectrum."""
    vals = bundle.eigenvalues
    lam = bundle.l2_rate
    below = np.flatnonzero(vals < lam)
    return {
        "kind": bundle.kind,
        "K": bundle.k,
        "P": bundle.n_params,
        "N": bundle.n_examples,
        "l2_rate": lam,
        "lambda_K": bundle.lam_k,
        "lam_tilde": bundle.lam_tilde,
        "eps_lambda": bundle.eps_lambda,
        "gap_width": bundle.lam_k - lam,
        "n_below_l2_rate": int(below.size),
        "n_negative": int(np.sum(vals < 0)),
        "lambda_crossing": int(below[0]) + 1 if below.size else None,
        "iterations": bundle.iterations,
        "flags": list(bundle.flags),
        "eigenvalues": [float(v) for v in vals],
    }
