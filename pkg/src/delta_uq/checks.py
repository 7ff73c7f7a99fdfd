"""Dense cross-check suite run by the ``oracle-check`` command.

Every check compares a matrix-free code path against the brute-force
references in :mod:`delta_uq.oracle` on a tiny trained network and returns a
:class:`CheckResult`.  Nothing here raises on a numerical mismatch; failures
are reported and the caller decides the exit status.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import delta, nn_core, oracle, spectral
from .config import OracleSettings
from .data import DatasetSource, ingest
from .io import load_bundle
from .nn_core import Dataset, NetworkConfig
from .trainer import TrainConfig, train

# slack for comparisons that should hold exactly in real arithmetic
ENCLOSURE_RTOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class Fixture:
    network: NetworkConfig
    omega: np.ndarray
    train: Dataset
    test: Dataset
    curv: oracle.DenseCurvature


def blob_source(s: OracleSettings, n: int, sample_seed: int) -> DatasetSource:
    return DatasetSource(
        "synthetic_blobs", n_classes=s.n_classes, n_examples=n, dims=s.dims,
        separation=s.separation, noise=s.noise, seed=0, sample_seed=sample_seed,
    )


def build_fixture(s: OracleSettings = OracleSettings()) -> Fixture:
    """Train the tiny oracle network and assemble its dense curvature."""
    network = NetworkConfig(tuple(s.layer_sizes), s.l2_rate)
    if network.n_inputs != s.dims or network.n_classes != s.n_classes:
        raise ValueError("oracle layer_sizes must start with dims and end with n_classes")
    data = ingest(blob_source(s, s.n_train, 1))
    test = ingest(blob_source(s, s.n_test, 2))
    omega = train(network, data, TrainConfig(seed=s.train_seed, log_every=0)).omega
    return Fixture(network, omega, data, test, oracle.dense_curvature(network, omega, data))


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def _random_point(fx: Fixture, rng) -> np.ndarray:
    return nn_core.init_params(fx.network, int(rng.integers(1 << 31)))


def check_gradient(fx: Fixture, n_points: int = 20, seed: int = 0, h: float = 1e-5) -> CheckResult:
    """Gradient against central differences at random parameter points.

    Points whose coordinate probes would cross a ReLU kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    eye = np.eye(fx.network.n_params)
    worst, done = 0.0, 0
    while done < n_points:
        w = _random_point(fx, rng)
        if oracle.crosses_kink(fx.network, w, fx.train.inputs, eye, h):
            continue
        g = nn_core.grad(fx.network, w, fx.train)
        fd = oracle.fd_gradient(lambda x: nn_core.cost(fx.network, x, fx.train), w, h)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
        done += 1
    return CheckResult("gradient_vs_fd", worst <= 1e-5, f"max relative error {worst:.2e} (tol 1e-5)")


def check_hvp(fx: Fixture, n_points: int = 20, seed: int = 0, h: float = 1e-5) -> CheckResult:
    """HVP against central differences of the gradient at random parameter points.

    A trained point is avoided on purpose: units that L2 has collapsed sit on
    the ReLU kink.  Probes that cross a kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n_points:
        w = _random_point(fx, rng)
        v = rng.standard_normal(fx.network.n_params)
        if oracle.crosses_kink(fx.network, w, fx.train.inputs, v, h):
            continue
        hv = nn_core.hvp(fx.network, w, fx.train, v)
        fd = (nn_core.grad(fx.network, w + h * v, fx.train) - nn_core.grad(fx.network, w - h * v, fx.train)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(hv - fd) / np.linalg.norm(fd)))
        done += 1
    return CheckResult("hvp_vs_fd", worst <= 1e-5, f"max relative error {worst:.2e} (tol 1e-5)")


def check_per_example(fx: Fixture) -> CheckResult:
    rows = nn_core.per_example_grads(fx.network, fx.omega, fx.train)
    g = nn_core.grad(fx.network, fx.omega, fx.train)
    err = float(np.abs(rows.mean(axis=0) + fx.network.l2_rate * fx.omega - g).max())
    return CheckResult("per_example_mean", err <= 1e-10, f"max abs error {err:.2e} (tol 1e-10)")


def check_forward(fx: Fixture) -> CheckResult:
    ref = np.array([oracle.reference_forward(fx.network, fx.omega, x) for x in fx.test.inputs])
    err = float(np.abs(nn_core.forward(fx.network, fx.omega, fx.test.inputs) - ref).max())
    return CheckResult("forward_vs_reference", err <= 1e-12, f"max abs error {err:.2e} (tol 1e-12)")


def _eig_check(name, bundle, dense_mat) -> CheckResult:
    ref_vals, _ = oracle.dense_eig(dense_mat)
    k = bundle.k
    ev_err = _rel(bundle.eigenvalues, ref_vals[:k])
    q = bundle.vectors
    res = np.linalg.norm(dense_mat @ q - q * bundle.eigenvalues, axis=0) / np.maximum(1.0, np.abs(bundle.eigenvalues))
    worst_res = float(res.max())
    ok = ev_err <= 1e-6 and worst_res <= 1e-8
    return CheckResult(name, ok, f"K={k}: eigenvalue rel error {ev_err:.2e} (tol 1e-6), residual {worst_res:.2e} (tol 1e-8)")


def check_lanczos(fx: Fixture, k: int = 20) -> CheckResult:
    k = min(k, fx.network.n_params - 1)
    bundle = spectral.hessian_topk(fx.network, fx.omega, fx.train, k)
    return _eig_check("lanczos_vs_dense", bundle, fx.curv.H)


def check_opg(fx: Fixture, k: int = 20) -> CheckResult:
    k = min(k, fx.network.n_params - 1)
    bundle = spectral.opg_topk(fx.network, fx.omega, fx.train, k)
    return _eig_check("opg_svd_vs_dense", bundle, fx.curv.G)


def check_opg_lower_bound(fx: Fixture, k: int = 20) -> CheckResult:
    k = min(k, fx.network.n_params - 1)
    bundle = spectral.opg_topk(fx.network, fx.omega, fx.train, k)
    shifted, _ = oracle.dense_eig(fx.curv.G - fx.curv.l2_rate * np.eye(fx.network.n_params))
    ok = bundle.lam_k >= bundle.l2_rate and shifted[-1] >= -1e-10
    return CheckResult(
        "opg_lower_bound", ok,
        f"min bundle eigenvalue - lambda = {bundle.lam_k - bundle.l2_rate:.2e}, min eig(G - lambda I) = {shifted[-1]:.2e}",
    )


def _variances(reports):
    return np.array([r.variance for r in reports]), np.array([r.delta for r in reports])


def check_complete_bundles(fx: Fixture) -> CheckResult:
    F = nn_core.sensitivities(fx.network, fx.omega, fx.test.inputs)
    n = len(fx.train)
    hb = spectral.bundle_from_matrix("hessian", fx.curv.H, fx.curv.l2_rate, n)
    gb = spectral.bundle_from_matrix("opg", fx.curv.G, fx.curv.l2_rate, n)
    if "indefinite" in hb.flags:
        return CheckResult("complete_bundle_exactness", False, f"H is not positive definite (lambda_P = {hb.lam_k:.3e})")
    errs = {}
    for kind, args in (("hessian", (hb,)), ("opg", (gb,)), ("sandwich", (hb,))):
        reports = delta.predict_batch(*args, F, opg_bundle=gb if kind == "sandwich" else None)
        var, _ = _variances(reports)
        errs[kind] = float(np.abs(var - oracle.exact_delta_variance(kind, fx.curv, F)).max())
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
    return CheckResult("complete_bundle_exactness", worst <= 1e-8, f"max abs error {detail} (tol 1e-8)")


def check_enclosure(fx: Fixture, k_values=(5, 10, 20)) -> CheckResult:
    F = nn_core.sensitivities(fx.network, fx.omega, fx.test.inputs)
    p = fx.network.n_params
    worst = -np.inf
    monotone = True
    lines = []
    for kind in ("opg", "hessian"):
        prev = None
        for k in [k for k in k_values if k < p]:
            if kind == "opg":
                b = spectral.opg_topk(fx.network, fx.omega, fx.train, k)
            else:
                b = spectral.hessian_topk(fx.network, fx.omega, fx.train, k)
            var, dl = _variances(delta.predict_batch(b, F))
            exact = oracle.exact_delta_variance(kind, fx.curv, F, clamp=(k, b.lam_k))
            excess = np.abs(exact - var) - dl - ENCLOSURE_RTOL * np.abs(exact)
            worst = max(worst, float(excess.max()))
            if prev is not None and np.any(dl > prev * (1 + 1e-12)):
                monotone = False
            prev = dl
            lines.append(f"{kind} K={k} max excess {excess.max():.2e}")
    ok = worst <= 0 and monotone
    return CheckResult("enclosure", ok, "; ".join(lines) + ("" if monotone else "; delta not monotone in K"))


def check_sandwich_algebra(s: OracleSettings, seed: int = 0) -> CheckResult:
    network = NetworkConfig(tuple(s.sandwich_layer_sizes), s.l2_rate)
    src = DatasetSource("synthetic_blobs", n_classes=network.n_classes, n_examples=200, dims=network.n_inputs, seed=0, sample_seed=1)
    data = ingest(src)
    omega = train(network, data, TrainConfig(seed=seed, log_every=0, max_steps=2000)).omega
    k = max(2, network.n_params // 6)
    hb = spectral.hessian_topk(network, omega, data, k)
    gb = spectral.opg_topk(network, omega, data, k)
    F = nn_core.sensitivities(network, omega, data.inputs[:20])
    var, dl = _variances(delta.predict_batch(hb, F, opg_bundle=gb))
    dvar, ddl = oracle.sandwich_dense(hb, gb, F)
    err = max(float(np.abs(var - dvar).max()), float(np.abs(dl - ddl).max()))
    # G = H: the same eigenpairs relabelled as an OPG bundle
    curv = oracle.dense_curvature(network, omega, data)
    shifted = curv.H + max(0.0, s.l2_rate - np.linalg.eigvalsh(curv.H)[0]) * np.eye(network.n_params)
    hb2 = spectral.bundle_from_matrix("hessian", shifted, s.l2_rate, len(data), k)
    gb2 = spectral.make_bundle("opg", hb2.eigenvalues, hb2.vectors, s.l2_rate, len(data))
    v_h, _ = _variances(delta.predict_batch(hb2, F))
    v_s, _ = _variances(delta.predict_batch(hb2, F, opg_bundle=gb2))
    err2 = float(np.abs(v_h - v_s).max())
    ok = err <= 1e-10 and err2 <= 1e-10
    return CheckResult(
        "sandwich_algebra", ok,
        f"P={network.n_params}: factored vs dense {err:.2e}, G=H collapse {err2:.2e} (tol 1e-10)",
    )


def check_fisher_gap(fx: Fixture, sizes=(100, 1000, 10000)) -> CheckResult:
    gaps = [oracle.fisher_equality_gap(fx.network, fx.omega, n) for n in sizes]
    ok = all(b < a for a, b in zip(gaps, gaps[1:]))
    return CheckResult("fisher_gap_decreasing", ok, ", ".join(f"N={n}: {g:.4f}" for n, g in zip(sizes, gaps)))


def check_bundle_file(path) -> CheckResult:
    try:
        b, _ = load_bundle(path)
    except (spectral.BundleInvariantError, ValueError) as exc:
        return CheckResult(f"bundle_file {Path(path).name}", False, str(exc))
    return CheckResult(f"bundle_file {Path(path).name}", True, f"kind={b.kind} K={b.k} P={b.n_params} invariants hold")


def run_suite(s: OracleSettings = OracleSettings(), bundle_files=()) -> list[CheckResult]:
    fx = build_fixture(s)
    results = [
        check_forward(fx),
        check_gradient(fx),
        check_hvp(fx),
        check_per_example(fx),
        check_lanczos(fx),
        check_opg(fx),
        check_opg_lower_bound(fx),
        check_complete_bundles(fx),
        check_enclosure(fx, s.k_values),
        check_sandwich_algebra(s),
        check_fisher_gap(fx, s.fisher_n),
    ]
    results += [check_bundle_file(p) for p in bundle_files]
    return results
