"""End-to-end run on the desk-scale blobs problem through the library API.

Trains the 16-64-32-4 classifier, computes K=64 Hessian and OPG bundles,
evaluates all three estimators on the test split and prints the pairwise
regressions, the FP/TP split and the most uncertain test inputs.

    python3 demos/blobs_walkthrough.py [--config configs/blobs.toml]
"""
import argparse
import time
from pathlib import Path

from delta_uq import delta, nn_core, spectral
from delta_uq.config import load_config
from delta_uq.data import ingest
from delta_uq.trainer import train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "blobs.toml")
    args = ap.parse_args()
    cfg = load_config(args.config)
    net = cfg.network
    tr, te = ingest(cfg.dataset("train")), ingest(cfg.dataset("test"))
    print(f"network {net.layer_sizes}, P={net.n_params}, N={len(tr)} train / {len(te)} test")

    t0 = time.perf_counter()
    rep = train(net, tr, cfg.training, test_data=te)
    print(f"trained in {time.perf_counter() - t0:.1f} s: cost {rep.cost:.4f}, |grad| {rep.grad_norm:.2e}, "
          f"accuracy {rep.train_accuracy:.3f} / {rep.test_accuracy:.3f}")

    k = cfg.spectral.k
    t0 = time.perf_counter()
    hb = spectral.hessian_topk(net, rep.omega, tr, k)
    gb = spectral.opg_topk(net, rep.omega, tr, k)
    print(f"spectra in {time.perf_counter() - t0:.1f} s")
    for b in (hb, gb):
        print(f"  {b.kind:8s} lambda_1={b.eigenvalues[0]:.4g} lambda_K={b.lam_k:.4g} "
              f"lam_tilde={b.lam_tilde:.4g} eps_lambda={b.eps_lambda:.4g} flags={list(b.flags)}")

    F = nn_core.sensitivities(net, rep.omega, te.inputs)
    reports = {
        "hessian": delta.predict_batch(hb, F, te.ids),
        "opg": delta.predict_batch(gb, F, te.ids),
        "sandwich": delta.predict_batch(hb, F, te.ids, opg_bundle=gb),
    }
    print("\nregressions of per-class std (y on x)")
    for a, b in (("hessian", "opg"), ("hessian", "sandwich"), ("opg", "sandwich")):
        fit = delta.compare_estimators(reports[a], reports[b])
        print(f"  {b:8s} on {a:8s}: alpha={fit.alpha:+.2e} beta={fit.beta:.3f} R2={fit.r2:.4f}")

    pred = nn_core.forward(net, rep.omega, te.inputs).argmax(axis=1)
    print("\nmean uncertainty score, true vs false positives")
    for kind, reps in reports.items():
        s = delta.fp_tp_split_stats(reps, pred, te.labels)
        print(f"  {kind:8s} TP {s['tp_mean']:.4f} (n={s['tp_count']})  FP {s['fp_mean']:.4f} (n={s['fp_count']})")

    top = delta.rank_by_score(reports["opg"], "desc", 5)
    by_id = {r.input_id: r for r in reports["opg"]}
    print("\nmost uncertain test inputs (OPG)")
    for i in top:
        r = by_id[i]
        print(f"  id {i:4d} label {te.labels[i]} pred {pred[i]} score {r.score:.4f} +- {r.eps_score:.1e}")
    print(f"\nmax relative score error (OPG): {max(r.eps_score / r.score for r in reports['opg'] if r.score > 0):.2e}")


if __name__ == "__main__":
    main()
