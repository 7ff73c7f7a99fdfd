"""File formats: checkpoints, spectral bundles, report and ranking tables.

Checkpoints and bundles are zip containers (stored, not compressed) holding
``meta.json`` plus one ``.npy`` member per array.  Every member carries the
fixed timestamp 1980-01-01 so identical contents give identical bytes.  Tables
are comma-separated text with a header row; floats are written with
``repr`` so they read back bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .delta import UncertaintyReport
from .nn_core import NetworkConfig
from .spectral import BundleInvariantError, SpectralBundle, make_bundle

CHECKPOINT_FORMAT = "delta-uq-checkpoint"
BUNDLE_FORMAT = "delta-uq-bundle"
FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class ContainerError(ValueError):
    pass


def omega_digest(omega) -> str:
    """sha256 of the little-endian float64 parameter bytes."""
    return hashlib.sha256(np.ascontiguousarray(omega, dtype="<f8").tobytes()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write_container(path, meta: dict, arrays: dict):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE), _dumps(meta))
        for name in sorted(arrays):
            raw = io.BytesIO()
            np.save(raw, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_DATE), raw.getvalue())
    Path(path).write_bytes(buf.getvalue())


def _read_container(path, expected_format: str):
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ContainerError(f"{path}: not a {expected_format} container ({exc})") from None
    with zf:
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise ContainerError(f"{path}: missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != expected_format:
            raise ContainerError(f"{path}: format {meta.get('format')!r}, expected {expected_format!r}")
        if meta.get("format_version") != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format_version {meta.get('format_version')!r}")
        arrays = {}
        for name in sorted(names - {"meta.json"}):
            arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, network: NetworkConfig, omega, seed: int, extra: dict | None = None):
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (network.n_params,):
        raise ValueError(f"omega has shape {omega.shape}, network needs ({network.n_params},)")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": FORMAT_VERSION,
        "network": network.to_dict(),
        "seed": int(seed),
        "n_params": network.n_params,
        "omega_sha256": omega_digest(omega),
        "extra": extra or {},
    }
    _write_container(path, meta, {"omega": omega})


def load_checkpoint(path) -> tuple[NetworkConfig, np.ndarray, dict]:
    meta, arrays = _read_container(path, CHECKPOINT_FORMAT)
    network = NetworkConfig.from_dict(meta["network"])
    omega = arrays.get("omega")
    if omega is None or omega.shape != (network.n_params,):
        raise ContainerError(f"{path}: parameter vector missing or of the wrong length")
    if omega_digest(omega) != meta.get("omega_sha256"):
        raise ContainerError(f"{path}: parameter digest mismatch")
    return network, omega, meta


# -- bundles ------------------------------------------------------------------


def save_bundle(path, bundle: SpectralBundle, omega_sha256: str | None = None):
    meta = {
        "format": BUNDLE_FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": bundle.kind,
        "P": bundle.n_params,
        "K": bundle.k,
        "N": bundle.n_examples,
        "l2_rate": bundle.l2_rate,
        "lam_tilde": bundle.lam_tilde,
        "eps_lambda": bundle.eps_lambda,
        "flags": list(bundle.flags),
        "iterations": bundle.iterations,
        "omega_sha256": omega_sha256,
    }
    arrays = {"eigenvalues": bundle.eigenvalues, "eigenvectors": bundle.vectors}
    if bundle.residuals is not None:
        arrays["residuals"] = bundle.residuals
    _write_container(path, meta, arrays)


def load_bundle(path) -> tuple[SpectralBundle, dict]:
    """Read and re-validate a bundle; stored λ̃ and ε_λ must match the recomputed ones."""
    meta, arrays = _read_container(path, BUNDLE_FORMAT)
    vals, vecs = arrays.get("eigenvalues"), arrays.get("eigenvectors")
    if vals is None or vecs is None:
        raise ContainerError(f"{path}: eigenpairs missing")
    if vecs.shape != (meta["P"], meta["K"]) or vals.shape != (meta["K"],):
        raise ContainerError(f"{path}: array shapes disagree with the (P, K) header")
    bundle = make_bundle(
        meta["kind"], vals, vecs, meta["l2_rate"], meta["N"],
        flags=meta.get("flags", ()), iterations=meta.get("iterations"), residuals=arrays.get("residuals"),
    )
    stored = (meta["lam_tilde"], meta["eps_lambda"])
    fresh = (bundle.lam_tilde, bundle.eps_lambda)
    for s, f in zip(stored, fresh):
        if not (s == f or (s != s and f != f)):
            raise BundleInvariantError(f"gap_linearization: stored values {stored} disagree with {fresh}")
    if set(meta.get("flags", ())) != set(bundle.flags):
        raise BundleInvariantError(f"bound_flag: stored flags {meta.get('flags')} disagree with {list(bundle.flags)}")
    return bundle, meta


# -- tables -------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def report_header(n_classes: int) -> list[str]:
    cols = ["id", "kind", "k", "label", "pred"]
    for name in ("prob", "var", "delta", "std", "eps"):
        cols += [f"{name}_{m}" for m in range(n_classes)]
    return cols + ["score", "eps_score", "flags"]


def write_reports(path, reports, probs, labels):
    """One row per input: id, kind, K, label, arg-max prediction, then per-class columns."""
    probs = np.asarray(probs)
    t = probs.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(report_header(t))
        for r, p, y in zip(reports, probs, labels):
            row = [r.input_id, r.kind, r.k, int(y), int(np.argmax(p))]
            for arr in (p, r.variance, r.delta, r.std, r.eps):
                row += [_fmt(v) for v in arr]
            row += [_fmt(r.score), _fmt(r.eps_score), ";".join(r.flags)]
            w.writerow(row)


def read_reports(path):
    """Inverse of :func:`write_reports`: (reports, probs, labels, preds)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty report file")
    header = rows[0]
    t = sum(1 for c in header if c.startswith("var_"))
    if header != report_header(t):
        raise ValueError(f"{path}: unexpected report header")
    reports, probs, labels, preds = [], [], [], []
    for row in rows[1:]:
        vals = [np.array([float(v) for v in row[5 + i * t:5 + (i + 1) * t]]) for i in range(5)]
        tail = row[5 + 5 * t:]
        flags = tuple(x for x in tail[2].split(";") if x)
        reports.append(UncertaintyReport(
            int(row[0]), row[1], int(row[2]), vals[1], vals[2], vals[3], vals[4],
            float(tail[0]), float(tail[1]), flags,
        ))
        labels.append(int(row[3]))
        preds.append(int(row[4]))
        probs.append(vals[0])
    return reports, np.array(probs).reshape(len(reports), t), np.array(labels, dtype=np.int64), np.array(preds, dtype=np.int64)


def write_ranking(path, ids, scores_by_id: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "score", "rank"])
        for rank, i in enumerate(ids, start=1):
            w.writerow([i, _fmt(scores_by_id[i]), rank])


def write_train_log(path, log):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "cost", "grad_norm"])
        for step, lr, c, g in log:
            w.writerow([step, _fmt(lr), _fmt(c), _fmt(g)])


def write_spectrum(csv_path, json_path, summary: dict):
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "eigenvalue"])
        for i, v in enumerate(summary["eigenvalues"], start=1):
            w.writerow([i, _fmt(v)])
    write_json(json_path, summary)


def write_json(path, obj):
    Path(path).write_text(_dumps(obj))
