"""Risks, OOD objectives, feature distances, and convergence-constant estimates."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .nn import LoraAdapter, ModelParts, backward, encode, loss
from .regularizers import dist_rows

SCHEMA_VERSION = 1


def empirical_risk(model: ModelParts, adapter: Optional[LoraAdapter], data: Dataset) -> Tuple[float, float]:
    """Mean logistic loss and sign accuracy (a zero logit predicts +1)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    logits = encode(model.enc, adapter, data.xs) @ model.head.W_head[0]
    risk = float(np.mean(loss(logits, data.ys)))
    pred = np.where(logits >= 0.0, 1.0, -1.0)
    return risk, float(np.mean(pred == data.ys))


def worst_case_ood(model: ModelParts, pairs: Sequence[Tuple[LoraAdapter, Dataset]]) -> float:
    """Largest empirical risk over ``(adapter, env data)`` pairs.

    Callers decide the pairing: personalized adapters go with their own
    intra-client shift, the global adapter with every test env.
    """
    if not pairs:
        raise ValueError("need at least one environment")
    return max(empirical_risk(model, ad, data)[0] for ad, data in pairs)


def mean_feature_distance(enc, phi_e: LoraAdapter, phi_g: LoraAdapter, data: Dataset, kind: str = "l2sq") -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    zp = encode(enc, phi_e, data.xs)
    zg = encode(enc, phi_g, data.xs)
    return float(np.mean(dist_rows(zp, zg, kind)))


def risk_gradient(model: ModelParts, adapter: LoraAdapter, data: Dataset) -> np.ndarray:
    """Full-batch gradient of the plain risk as one flat vector."""
    _, grads = backward(model.enc, adapter, model.head, data.xs, data.ys)
    return grads.flat()


@dataclass(frozen=True)
class Theorem4Inputs:
    L: float
    sigma: float
    G: float
    M: float

    def __post_init__(self):
        for name in ("L", "sigma", "G", "M"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")


def estimate_theorem4_inputs(
    model: ModelParts,
    datasets: Sequence[Dataset],
    center: LoraAdapter,
    rng: np.random.Generator,
    *,
    weights: Optional[Sequence[float]] = None,
    personalized: Optional[Sequence[LoraAdapter]] = None,
    global_adapter: Optional[LoraAdapter] = None,
    n_pairs: int = 100,
    radius: float = 0.1,
    batch_size: int = 32,
) -> Theorem4Inputs:
    """Empirical smoothness, gradient-bound, diversity, and gap constants.

    - ``L``: largest secant ratio ``||g(a) - g(b)|| / ||a - b||`` over random
      pairs ``a = center + radius*u``, ``b = a + radius*v`` (``u, v`` unit
      directions) on a randomly chosen client's full-batch risk.
    - ``sigma``: largest mini-batch risk-gradient norm seen at those probes.
    - ``G``: largest ``||grad R_e - grad R||`` at the global adapter, with ``R``
      the weighted mixture of client risks.
    - ``M``: largest ``||phi_e - phi_g||`` over the given personalized adapters
      (zero when none are given, matching the identical initialization).
    """
    if n_pairs < 2:
        raise ValueError("need at least two probe pairs")
    if not datasets:
        raise ValueError("need at least one client dataset")
    base = center.flat()
    dim = base.size

    def unit():
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    L = 0.0
    sigma = 0.0
    for _ in range(n_pairs):
        data = datasets[int(rng.integers(len(datasets)))]
        a = base + radius * unit()
        b = a + radius * unit()
        ga = risk_gradient(model, center.with_flat(a), data)
        gb = risk_gradient(model, center.with_flat(b), data)
        L = max(L, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b)))
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        g_batch = risk_gradient(model, center.with_flat(a), data.subset(idx))
        sigma = max(sigma, float(np.linalg.norm(g_batch)))

    phi_g = center if global_adapter is None else global_adapter
    w = np.asarray(weights if weights is not None else [len(d) for d in datasets], dtype=np.float64)
    w = w / w.sum()
    local = [risk_gradient(model, phi_g, d) for d in datasets]
    mixture = sum(wi * g for wi, g in zip(w, local))
    G = max(float(np.linalg.norm(g - mixture)) for g in local)

    M = 0.0
    if personalized:
        g_flat = phi_g.flat()
        M = max(float(np.linalg.norm(p.flat() - g_flat)) for p in personalized)
    return Theorem4Inputs(L, sigma, G, M)


# -- run reports --------------------------------------------------------------


@dataclass
class ClientTrace:
    client_id: int
    risk: Optional[float]
    grad_norm_sq: Optional[float]
    feat_dist: Optional[float]


@dataclass
class RoundTrace:
    round: int
    entries: List[ClientTrace]
    global_risk: Optional[float]
    bytes_communicated: int

    def mean(self, attr: str) -> Optional[float]:
        vals = [getattr(e, attr) for e in self.entries if getattr(e, attr) is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class RunReport:
    config: Dict[str, Any]
    seed: int
    rounds: List[RoundTrace]
    personalized_ood: Optional[List[Dict[str, float]]]
    personalized_ood_acc_mean: Optional[float]
    personalized_test_acc_mean: Optional[float]
    ood_feature_distance: Optional[List[float]]
    global_inter_ood: Optional[Dict[str, float]]
    global_intra_ood_acc_mean: Optional[float]
    worst_case_ood_risk: float
    bytes_communicated: int
    adapter_param_count: int
    wall_clock_s: float = 0.0
    schema_version: int = SCHEMA_VERSION
    # not serialized: final adapters for checkpointing
    adapters: Dict[str, LoraAdapter] = field(default_factory=dict, repr=False)

    @property
    def feature_distance_trajectory(self) -> List[Optional[float]]:
        return [r.mean("feat_dist") for r in self.rounds]

    @property
    def grad_norm_trajectory(self) -> List[Optional[float]]:
        return [r.mean("grad_norm_sq") for r in self.rounds]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready document; wall-clock time is left out so reruns compare byte-for-byte."""
        out = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "adapter_param_count": self.adapter_param_count,
            "bytes_communicated": self.bytes_communicated,
            "personalized_ood_acc_mean": self.personalized_ood_acc_mean,
            "personalized_test_acc_mean": self.personalized_test_acc_mean,
            "personalized_ood": self.personalized_ood,
            "ood_feature_distance": self.ood_feature_distance,
            "global_inter_ood": self.global_inter_ood,
            "global_intra_ood_acc_mean": self.global_intra_ood_acc_mean,
            "worst_case_ood_risk": self.worst_case_ood_risk,
            "feature_distance_trajectory": self.feature_distance_trajectory,
            "grad_norm_sq_trajectory": self.grad_norm_trajectory,
            "rounds": [asdict(r) for r in self.rounds],
        }
        return out
