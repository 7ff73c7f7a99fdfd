"""How the number of computed eigenpairs K controls lambda_K and the error bound.

Needs a checkpoint from ``delta-uq train``.  For each K the Hessian and OPG
bundles are recomputed, and the mean per-input score and score error over the
test split are printed.  As lambda_K approaches lambda the bound shrinks to 0.

    delta-uq train --config configs/blobs.toml --out runs/blobs
    python3 demos/spectrum_gap.py --run runs/blobs
"""
import argparse
from pathlib import Path

import numpy as np

from delta_uq import delta, io, nn_core, spectral
from delta_uq.config import load_config
from delta_uq.data import ingest

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "blobs.toml")
    ap.add_argument("--run", required=True, help="directory holding checkpoint.zip")
    ap.add_argument("--ks", default="8,16,32,64,128,256")
    args = ap.parse_args()
    cfg = load_config(args.config)
    net, omega, _ = io.load_checkpoint(Path(args.run) / "checkpoint.zip")
    tr, te = ingest(cfg.dataset("train")), ingest(cfg.dataset("test"))
    F = nn_core.sensitivities(net, omega, te.inputs)
    print(f"P={net.n_params} lambda={net.l2_rate}")
    print(f"{'kind':8s} {'K':>5s} {'lambda_K':>10s} {'eps_lambda':>11s} {'score':>9s} {'eps_score':>10s} {'rel':>8s}")
    for kind in ("hessian", "opg"):
        for k in (int(x) for x in args.ks.split(",")):
            if kind == "hessian":
                lz = spectral.LanczosConfig(k, max_iters=min(net.n_params - 1, 20 * k))
                b = spectral.hessian_topk(net, omega, tr, k, lz)
            else:
                b = spectral.opg_topk(net, omega, tr, k)
            reps = delta.predict_batch(b, F)
            s = np.mean([r.score for r in reps])
            e = np.mean([r.eps_score for r in reps])
            print(f"{kind:8s} {k:5d} {b.lam_k:10.4g} {b.eps_lambda:11.4g} {s:9.4g} {e:10.3g} {e / s:8.2%}")


if __name__ == "__main__":
    main()
