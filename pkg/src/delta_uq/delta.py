"""Prediction-phase uncertainty from spectral bundles.

For an input with probability Jacobian ``F`` (T_L x P) and a bundle holding
the top-K eigenpairs ``(Q, Lambda)`` of H or G, the covariance is the full-rank
approximation

    Sigma ~= (1/N) [Q Lambda^-1 Q^T + lam_tilde^-1 (I - Q Q^T)]

and everything is evaluated through ``B = F Q`` and the row norms of ``F``,
so no P x P matrix is ever formed.  The Sandwich estimator combines an H
bundle and a G bundle through the K x K cross matrix ``Q_H^T Q_G``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .nn_core import Sensitivity
from .spectral import SpectralBundle

__all__ = [
    "UncertaintyReport",
    "SandwichCross",
    "RegressionStats",
    "predict_uncertainty",
    "predict_uncertainty_sandwich",
    "predict_batch",
    "score",
    "rank_by_score",
    "compare_estimators",
    "fp_tp_split_stats",
    "lowrank_uncertainty",
]

KINDS = ("hessian", "opg", "sandwich")


@dataclass(frozen=True)
class UncertaintyReport:
    input_id: int | None
    kind: str
    k: int
    variance: np.ndarray
    delta: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    score: float
    eps_score: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class SandwichCross:
    """Cross matrix ``M = Q_H^T Q_G`` shared by every Sandwich evaluation."""

    m: np.ndarray

    @classmethod
    def from_bundles(cls, hb: SpectralBundle, gb: SpectralBundle) -> "SandwichCross":
        _check_pair(hb, gb)
        m = hb.vectors.T @ gb.vectors
        norm = np.linalg.norm(m, 2)
        if norm > 1 + 1e-8:
            raise ValueError(f"cross matrix has spectral norm {norm:.6g} > 1; bases are not orthonormal")
        return cls(m)


@dataclass(frozen=True)
class RegressionStats:
    alpha: float
    beta: float
    r2: float
    n_points: int


def _check_pair(hb: SpectralBundle, gb: SpectralBundle):
    if hb.kind != "hessian" or gb.kind != "opg":
        raise ValueError("sandwich needs a hessian bundle and an opg bundle")
    if hb.n_params != gb.n_params or hb.n_examples != gb.n_examples or hb.l2_rate != gb.l2_rate:
        raise ValueError("bundles disagree on P, N or lambda")


def _as_f(F, p) -> tuple[np.ndarray, bool]:
    if isinstance(F, Sensitivity):
        F = F.matrix
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    F3 = F[None] if single else F
    if F3.ndim != 3 or F3.shape[2] != p:
        raise ValueError(f"sensitivity has shape {F.shape}, expected (..., T_L, {p})")
    return F3, single


def _usable(bundle: SpectralBundle):
    if "indefinite" in bundle.flags:
        raise ValueError(
            f"{bundle.kind} bundle has nonpositive lambda_K={bundle.lam_k:.6g}; it cannot define a covariance"
        )


def _std_and_eps(var, delta):
    lower = var - delta
    clamped = lower < 0
    eps = 0.5 * (np.sqrt(var + delta) - np.sqrt(np.where(clamped, 0.0, lower)))
    return np.sqrt(var), eps, clamped


def score(report_or_variance, delta=None) -> tuple[float, float]:
    """Uncertainty score ``sqrt(sum_m var_m)`` and its worst-case error.

    The lower end of the error interval is clamped at zero when the summed
    variance minus the summed bound is negative.
    """
    if isinstance(report_or_variance, UncertaintyReport):
        var, delta = report_or_variance.variance, report_or_variance.delta
    else:
        var = np.asarray(report_or_variance, dtype=np.float64)
        delta = np.zeros_like(var) if delta is None else np.asarray(delta, dtype=np.float64)
    total, dtotal = float(var.sum()), float(delta.sum())
    return float(np.sqrt(total)), 0.5 * (np.sqrt(total + dtotal) - np.sqrt(max(total - dtotal, 0.0)))


def _reports(kind, k, var, delta, ids, extra_flags=()):
    std, eps, clamped = _std_and_eps(var, delta)
    out = []
    for i in range(var.shape[0]):
        flags = set(extra_flags)
        if clamped[i].any():
            flags.add("clamped")
        sc, esc = score(var[i], delta[i])
        if var[i].sum() - delta[i].sum() < 0:
            flags.add("score_clamped")
        out.append(UncertaintyReport(
            None if ids is None else int(ids[i]), kind, k, var[i], delta[i], std[i], eps[i], sc, esc,
            tuple(sorted(flags)),
        ))
    return out


def _single_kind_terms(bundle: SpectralBundle, F3):
    b = F3 @ bundle.vectors
    ff = np.einsum("ntp,ntp->nt", F3, F3)
    bb = np.einsum("ntk,ntk->nt", b, b)
    low = np.einsum("ntk,k,ntk->nt", b, 1.0 / bundle.eigenvalues, b)
    # rounding can push the complement energy a hair below zero
    comp = np.maximum(ff - bb, 0.0)
    return low, comp


def _variance_single(bundle: SpectralBundle, F3):
    _usable(bundle)
    low, comp = _single_kind_terms(bundle, F3)
    n = bundle.n_examples
    return (low + comp / bundle.lam_tilde) / n, bundle.eps_lambda * comp / n


def _variance_sandwich(hb, gb, cross, F3):
    _usable(hb)
    _usable(gb)
    lam, n = hb.l2_rate, hb.n_examples
    lh, lg = hb.eigenvalues, gb.eigenvalues
    lt_h, lt_g = hb.lam_tilde, gb.lam_tilde
    lk_h, lk_g = hb.lam_k, gb.lam_k
    m = cross.m

    bh = F3 @ hb.vectors
    bg = F3 @ gb.vectors
    u = bh / lh
    um = u @ m
    v = bg - bh @ m
    ff = np.einsum("ntp,ntp->nt", F3, F3)
    # row diagonals of F X F^T for the eight product matrices (N, D and their transposes paired)
    s_ = np.einsum("ntk,k,ntk->nt", um, lg, um)
    a_ = np.einsum("ntk,ntk->nt", u, u) - np.einsum("ntk,ntk->nt", um, um)
    n_ = 2.0 * np.einsum("ntk,k,ntk->nt", v, lg, um)
    d_ = -2.0 * np.einsum("ntk,ntk->nt", v, um)
    c_ = np.einsum("ntk,k,ntk->nt", v, lg, v)
    h_ = ff - np.einsum("ntk,ntk->nt", bh, bh) - np.einsum("ntk,ntk->nt", v, v)

    var = (
        s_ + lt_g * a_ + n_ / lt_h + (lt_g / lt_h) * d_ + c_ / lt_h**2 + (lt_g / lt_h**2) * h_
    ) / n
    delta = (
        (lk_g - lam) * a_
        + (1 / lam - 1 / lk_h) * n_
        + (lk_g / lam - lam / lk_h) * d_
        + (1 / lam**2 - 1 / lk_h**2) * c_
        + (lk_g / lam**2 - lam / lk_h**2) * h_
    ) / (2 * n)
    return var, delta


def predict_batch(bundle, F, ids=None, opg_bundle: SpectralBundle | None = None, cross: SandwichCross | None = None):
    """Reports for a stack of sensitivities ``F`` of shape (n, T_L, P).

    Passing ``opg_bundle`` (with ``bundle`` the Hessian bundle) selects the
    Sandwich estimator.
    """
    F3, _ = _as_f(F, bundle.n_params)
    if opg_bundle is None:
        var, delta = _variance_single(bundle, F3)
        kind, k = bundle.kind, bundle.k
        flags = tuple(f for f in bundle.flags if f in ("bound_degraded", "padded"))
    else:
        cross = cross if cross is not None else SandwichCross.from_bundles(bundle, opg_bundle)
        var, delta = _variance_sandwich(bundle, opg_bundle, cross, F3)
        kind, k = "sandwich", bundle.k
        flags = tuple(sorted({f for b in (bundle, opg_bundle) for f in b.flags if f in ("bound_degraded", "padded")}))
    return _reports(kind, k, var, delta, ids, flags)


def predict_uncertainty(bundle: SpectralBundle, F, input_id: int | None = None) -> UncertaintyReport:
    """Per-class variance, worst-case error and score for one input (Hessian or OPG bundle)."""
    if isinstance(F, Sensitivity) and input_id is None:
        input_id = F.input_id
    F3, _ = _as_f(F, bundle.n_params)
    return predict_batch(bundle, F3, None if input_id is None else [input_id])[0]


def predict_uncertainty_sandwich(
    hb: SpectralBundle, gb: SpectralBundle, cross: SandwichCross | None, F, input_id: int | None = None
) -> UncertaintyReport:
    if isinstance(F, Sensitivity) and input_id is None:
        input_id = F.input_id
    _check_pair(hb, gb)
    F3, _ = _as_f(F, hb.n_params)
    return predict_batch(hb, F3, None if input_id is None else [input_id], opg_bundle=gb, cross=cross)[0]


def lowrank_uncertainty(bundle: SpectralBundle, F) -> np.ndarray:
    """Per-class variance from the computed eigenpairs only (no complement term)."""
    F3, single = _as_f(F, bundle.n_params)
    low, _ = _single_kind_terms(bundle, F3)
    var = low / bundle.n_examples
    return var[0] if single else var


def rank_by_score(reports, order: str = "desc", top: int | None = None) -> list[int]:
    """Input ids sorted by score; ties go to the smaller id."""
    if order not in ("asc", "desc"):
        raise ValueError("order must be 'asc' or 'desc'")
    sign = -1.0 if order == "desc" else 1.0
    ranked = sorted(reports, key=lambda r: (sign * r.score, r.input_id))
    ids = [r.input_id for r in ranked]
    return ids if top is None else ids[:top]


def compare_estimators(reports_a, reports_b) -> RegressionStats:
    """Least-squares fit ``sigma_b = alpha + beta * sigma_a`` over every (input, class) pair."""
    a = {r.input_id: r.std for r in reports_a}
    b = {r.input_id: r.std for r in reports_b}
    if set(a) != set(b) or len(a) != len(reports_a) or len(b) != len(reports_b):
        raise ValueError("report sets cover different (or duplicated) input ids")
    ids = sorted(a)
    xa = np.concatenate([a[i] for i in ids])
    xb = np.concatenate([b[i] for i in ids])
    if np.ptp(xa) == 0:
        raise ValueError("no variance in the regressor")
    fit = stats.linregress(xa, xb)
    return RegressionStats(float(fit.intercept), float(fit.slope), float(fit.rvalue**2), xa.size)


def fp_tp_split_stats(reports, predictions, targets) -> dict:
    """Mean score over correctly and wrongly classified inputs.

    A group without members reports ``None`` as its mean.
    """
    scores = np.array([r.score for r in reports])
    correct = np.asarray(predictions) == np.asarray(targets)
    if correct.shape != scores.shape:
        raise ValueError("predictions and targets must align with reports")
    tp, fp = scores[correct], scores[~correct]
    return {
        "tp_mean": float(tp.mean()) if tp.size else None,
        "fp_mean": float(fp.mean()) if fp.size else None,
        "tp_count": int(tp.size),
        "fp_count": int(fp.size),
    }
