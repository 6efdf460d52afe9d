"""Post-training diagnostics: translation, energy distance, parameter counts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .alignment import AlignmentModel, aub_metric


def translate(model: AlignmentModel, x, from_j: int, to_j: int) -> np.ndarray:
    """Map samples of domain ``from_j`` into domain ``to_j`` through the shared latent."""
    for j in (from_j, to_j):
        if not 0 <= j < model.k:
            raise IndexError(f"domain index {j} out of range for k={model.k}")
    z, _ = model.flows[from_j].forward(x)
    return model.flows[to_j].inverse(z)


def _mean_pairwise_distance(a, b, chunk=2048):
    total = 0.0
    b_sq = np.sum(b * b, axis=1)
    for start in range(0, a.shape[0], chunk):
        blk = a[start:start + chunk]
        d2 = np.sum(blk * blk, axis=1)[:, None] + b_sq[None, :] - 2.0 * blk @ b.T
        total += np.sqrt(np.maximum(d2, 0.0)).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """Biased (V-statistic) energy distance ``2E|A-B| - E|A-A'| - E|B-B'|``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"width mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("energy distance needs at least two rows per sample")
    ab = _mean_pairwise_distance(a, b)
    aa = _mean_pairwise_distance(a, a)
    bb = _mean_pairwise_distance(b, b)
    return float(max(2.0 * ab - aa - bb, 0.0))


def cross_domain_energy(model, test_sets, i, j) -> float:
    """Symmetrized translation mismatch between domains ``i`` and ``j``."""
    if i == j:
        return 0.0
    ij = energy_distance(translate(model, test_sets[i], i, j), test_sets[j])
    ji = energy_distance(translate(model, test_sets[j], j, i), test_sets[i])
    return 0.5 * (ij + ji)


def pairwise_energy_matrix(model, test_sets) -> np.ndarray:
    k = model.k
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = cross_domain_energy(model, test_sets, i, j)
    return out


def parameter_count(model: AlignmentModel) -> dict:
    per_flow = [f.n_params for f in model.flows]
    density = model.density.n_params
    return {"per_flow": per_flow, "flows": sum(per_flow), "density": density, "total": sum(per_flow) + density}


def roundtrip_max_error(model, test_sets) -> float:
    worst = 0.0
    for i, x in enumerate(test_sets):
        for j in range(model.k):
            back = translate(model, translate(model, x, i, j), j, i)
            worst = max(worst, float(np.max(np.abs(back - x))))
    return worst


@dataclass
class EvalReport:
    test_aub: float
    pairwise_energy_distance: list
    parameter_counts: dict
    roundtrip_max_err: float
    fingerprint: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(model, test_sets, fingerprint: str = "", energy: bool = True, roundtrip: bool = True) -> EvalReport:
    k = model.k
    ed = pairwise_energy_matrix(model, test_sets) if energy else np.zeros((k, k))
    return EvalReport(
        test_aub=aub_metric(model, test_sets),
        pairwise_energy_distance=ed.tolist(),
        parameter_counts=parameter_count(model),
        roundtrip_max_err=roundtrip_max_error(model, test_sets) if roundtrip else 0.0,
        fingerprint=fingerprint,
    )
