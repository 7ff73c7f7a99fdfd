"""Command-line front end.

    delta-uq train|spectrum|uncertainty|rank|compare|oracle-check --config run.toml
             [--out DIR] [--kind hessian|opg|sandwich] [--k K] [--split train|test]
             [--seed S] [--overwrite]

Exit status: 0 on success, 1 when an internal invariant fails (including a
failed oracle check), 2 for configuration or input errors.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import checks, delta, io, nn_core, spectral
from .config import KINDS, ConfigError, RunConfig, load_config
from .data import ingest
from .spectral import BundleInvariantError, LanczosNotConverged
from .trainer import TrainingError, train

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

PAIRS = (("hessian", "opg"), ("hessian", "sandwich"), ("opg", "sandwich"))


def _dataset_digest(data) -> str:
    h = hashlib.sha256()
    for arr in (data.inputs, data.targets, data.ids):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class Outputs:
    """Output directory that refuses to replace files unless told to."""

    def __init__(self, root: Path, overwrite: bool):
        self.root = Path(root)
        self.overwrite = overwrite
        self.root.mkdir(parents=True, exist_ok=True)

    def new(self, name: str) -> Path:
        path = self.root / name
        if path.exists() and not self.overwrite:
            raise ConfigError(f"{path} already exists (use --overwrite or a fresh --out directory)")
        return path

    def existing(self, name: str, hint: str) -> Path:
        path = self.root / name
        if not path.exists():
            raise ConfigError(f"{path} not found; run `{hint}` first")
        return path


def _load_split(cfg: RunConfig, split: str):
    data = ingest(cfg.dataset(split))
    net = cfg.network
    if data.inputs.shape[1] != net.n_inputs or data.targets.shape[1] != net.n_classes:
        raise ConfigError(
            f"{split} data has {data.inputs.shape[1]} features / {data.targets.shape[1]} classes, "
            f"network expects {net.n_inputs} / {net.n_classes}"
        )
    return data


def _load_checkpoint(cfg: RunConfig, out: Outputs):
    network, omega, meta = io.load_checkpoint(out.existing("checkpoint.zip", "train"))
    if network != cfg.network:
        raise ConfigError("checkpoint network differs from the [network] section")
    return network, omega, meta


def _check_train_data(meta: dict, data):
    if meta["extra"].get("train_sha256") != _dataset_digest(data):
        raise ConfigError("training data differ from the data the checkpoint was trained on")


# -- commands -----------------------------------------------------------------


def cmd_train(cfg: RunConfig, args, out: Outputs) -> int:
    data = _load_split(cfg, "train")
    test = _load_split(cfg, "test") if cfg.test_data is not None else None
    paths = [out.new(n) for n in ("checkpoint.zip", "train_report.json", "train_log.csv")]
    report = train(cfg.network, data, cfg.training, test_data=test)
    extra = {"n_train": len(data), "train_sha256": _dataset_digest(data)}
    io.save_checkpoint(paths[0], cfg.network, report.omega, cfg.seed, extra)
    summary = report.summary()
    summary.update({
        "network": cfg.network.to_dict(),
        "n_params": cfg.network.n_params,
        "n_train": len(data),
        "n_test": None if test is None else len(test),
        "seed": cfg.seed,
        "omega_sha256": io.omega_digest(report.omega),
    })
    io.write_json(paths[1], summary)
    io.write_train_log(paths[2], report.log)
    print(f"trained P={cfg.network.n_params} for {report.steps_run} steps: cost {report.cost:.6g}, "
          f"|grad| {report.grad_norm:.3g}, train acc {report.train_accuracy:.4f}"
          + ("" if report.test_accuracy is None else f", test acc {report.test_accuracy:.4f}"))
    return EXIT_OK


def _spectrum_kinds(kind):
    if kind is None or kind == "sandwich":
        return ("hessian", "opg")
    return (kind,)


def cmd_spectrum(cfg: RunConfig, args, out: Outputs) -> int:
    network, omega, meta = _load_checkpoint(cfg, out)
    data = _load_split(cfg, "train")
    _check_train_data(meta, data)
    sp = cfg.spectral
    k = args.k if args.k is not None else sp.k
    p = network.n_params
    for kind in _spectrum_kinds(args.kind):
        if not 1 <= k < p:
            raise ConfigError(f"K={k} must satisfy 1 <= K < P={p}")
        targets = [out.new(f"{stem}_{kind}.{ext}") for stem, ext in (("bundle", "zip"), ("spectrum", "csv"), ("spectrum", "json"))]
        if kind == "hessian":
            lcfg = spectral.LanczosConfig(k, sp.max_iters, sp.tol, cfg.seed, sp.check_every)
            bundle = spectral.hessian_topk(network, omega, data, k, lcfg, sp.chunk_size)
        else:
            bundle = spectral.opg_topk(
                network, omega, data, k, sp.block_size, sp.buffer_rank, sp.refine_tol, seed=cfg.seed
            )
        io.save_bundle(targets[0], bundle, io.omega_digest(omega))
        report = spectral.spectrum_report(bundle)
        io.write_spectrum(targets[1], targets[2], report)
        print(f"{kind}: K={k} P={p} lambda_K={bundle.lam_k:.6g} lam_tilde={bundle.lam_tilde:.6g} "
              f"eps_lambda={bundle.eps_lambda:.6g} below_lambda={report['n_below_l2_rate']} "
              f"iterations={bundle.iterations} flags={list(bundle.flags)}")
    return EXIT_OK


def _load_bundles(kinds, omega, meta, out: Outputs):
    need = set()
    for kind in kinds:
        need |= {"hessian", "opg"} if kind == "sandwich" else {kind}
    bundles = {}
    for kind in sorted(need):
        b, bmeta = io.load_bundle(out.existing(f"bundle_{kind}.zip", f"spectrum --kind {kind}"))
        if b.n_params != omega.size:
            raise ConfigError(f"{kind} bundle has P={b.n_params}, checkpoint has P={omega.size}")
        if bmeta.get("omega_sha256") != io.omega_digest(omega):
            raise ConfigError(f"{kind} bundle was computed at different parameters than the checkpoint")
        if b.n_examples != meta["extra"].get("n_train"):
            raise ConfigError(f"{kind} bundle has N={b.n_examples}, checkpoint was trained on {meta['extra'].get('n_train')}")
        bundles[kind] = b
    return bundles


def cmd_uncertainty(cfg: RunConfig, args, out: Outputs) -> int:
    network, omega, meta = _load_checkpoint(cfg, out)
    kinds = (args.kind,) if args.kind else cfg.delta.kinds
    splits = (args.split,) if args.split else cfg.splits
    bundles = _load_bundles(kinds, omega, meta, out)
    cross = None
    if "sandwich" in kinds:
        cross = delta.SandwichCross.from_bundles(bundles["hessian"], bundles["opg"])
    for split in splits:
        data = _load_split(cfg, split)
        targets = {kind: out.new(f"report_{kind}_{split}.csv") for kind in kinds}
        order = np.argsort(data.ids, kind="stable")
        ids, x, labels = data.ids[order], data.inputs[order], data.labels[order]
        probs = nn_core.forward(network, omega, x)
        reports = {kind: [] for kind in kinds}
        step = cfg.delta.batch
        for start in range(0, len(ids), step):
            sl = slice(start, start + step)
            # F is shared by every estimator kind
            F = nn_core.sensitivities(network, omega, x[sl])
            for kind in kinds:
                if kind == "sandwich":
                    batch = delta.predict_batch(bundles["hessian"], F, ids[sl], opg_bundle=bundles["opg"], cross=cross)
                else:
                    batch = delta.predict_batch(bundles[kind], F, ids[sl])
                reports[kind] += batch
        for kind in kinds:
            io.write_reports(targets[kind], reports[kind], probs, labels)
            scores = np.array([r.score for r in reports[kind]])
            print(f"{kind}/{split}: {len(ids)} inputs, mean score {scores.mean():.6g}, "
                  f"clamped {sum('clamped' in r.flags for r in reports[kind])}")
    return EXIT_OK


def cmd_rank(cfg: RunConfig, args, out: Outputs) -> int:
    kinds = (args.kind,) if args.kind else cfg.delta.kinds
    splits = (args.split,) if args.split else cfg.splits
    for kind in kinds:
        for split in splits:
            src = out.existing(f"report_{kind}_{split}.csv", f"uncertainty --kind {kind} --split {split}")
            reports, *_ = io.read_reports(src)
            ids = delta.rank_by_score(reports, cfg.delta.order, cfg.delta.top)
            io.write_ranking(out.new(f"ranking_{kind}_{split}.csv"), ids, {r.input_id: r.score for r in reports})
            print(f"{kind}/{split}: top ids {ids[:5]}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args, out: Outputs) -> int:
    splits = (args.split,) if args.split else cfg.splits
    targets = (out.new("compare.csv"), out.new("compare.json"))
    rows, summary = [], {"regressions": [], "fp_tp": []}
    for split in splits:
        loaded = {}
        for kind in KINDS:
            reports, _, labels, preds = io.read_reports(
                out.existing(f"report_{kind}_{split}.csv", f"uncertainty --kind {kind} --split {split}")
            )
            loaded[kind] = reports
            stats = delta.fp_tp_split_stats(reports, preds, labels)
            summary["fp_tp"].append({"split": split, "kind": kind, **stats})
        for a, b in PAIRS:
            fit = delta.compare_estimators(loaded[a], loaded[b])
            mean_a = float(np.mean([r.std for r in loaded[a]]))
            row = {"split": split, "x": a, "y": b, "alpha": fit.alpha, "beta": fit.beta, "r2": fit.r2,
                   "n_points": fit.n_points, "mean_sigma_x": mean_a}
            rows.append(row)
            summary["regressions"].append(row)
            print(f"{split}: {b} on {a}: alpha={fit.alpha:.4g} beta={fit.beta:.4g} R2={fit.r2:.6f}")
    with open(targets[0], "w") as f:
        cols = ["split", "x", "y", "alpha", "beta", "r2", "n_points", "mean_sigma_x"]
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    io.write_json(targets[1], summary)
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig, args, out: Outputs) -> int:
    bundle_files = sorted(out.root.glob("bundle_*.zip"))
    results = checks.run_suite(cfg.oracle, bundle_files)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    io.write_json(out.new("oracle_check.json"), [
        {"name": r.name, "passed": bool(r.passed), "detail": r.detail} for r in results
    ])
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_INTERNAL if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "spectrum": cmd_spectrum,
    "uncertainty": cmd_uncertainty,
    "rank": cmd_rank,
    "compare": cmd_compare,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delta-uq", description="Delta-method predictive uncertainty for dense classifiers.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", help="output directory (default: out_dir from the config)")
    parser.add_argument("--kind", choices=KINDS)
    parser.add_argument("--k", type=int, help="number of eigenpairs (default: [spectral] k)")
    parser.add_argument("--split", choices=("train", "test"))
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--overwrite", action="store_true", help="replace existing output files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.seed)
        out = Outputs(Path(args.out) if args.out else cfg.out_dir, args.overwrite)
        return COMMANDS[args.command](cfg, args, out)
    except (BundleInvariantError, LanczosNotConverged, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
