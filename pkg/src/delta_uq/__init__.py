"""Delta-method epistemic uncertainty for L2-regularised dense softmax classifiers.

The initial phase computes top-K eigenpairs of the Hessian or of the outer
product of gradients without forming either matrix (:mod:`~delta_uq.spectral`);
the prediction phase turns an input's probability Jacobian into per-class
variances with worst-case error bounds (:mod:`~delta_uq.delta`).  Dense
brute-force references for small networks live in :mod:`~delta_uq.oracle`.
"""
from .delta import (
    SandwichCross,
    UncertaintyReport,
    compare_estimators,
    fp_tp_split_stats,
    lowrank_uncertainty,
    predict_batch,
    predict_uncertainty,
    predict_uncertainty_sandwich,
    rank_by_score,
    score,
)
from .nn_core import Dataset, NetworkConfig, Sensitivity
from .spectral import SpectralBundle, hessian_topk, opg_topk
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"
