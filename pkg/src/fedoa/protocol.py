"""Federated rounds with a personalized and a global adapter per client.

Each round the server samples clients and broadcasts a snapshot of the global
adapter. A sampled client runs ``K`` mini-batch steps on its personalized
adapter, penalizing the distance between its features and the snapshot's
features on the same batch, and separately takes plain risk steps on a copy of
the snapshot. Only the latter goes back to the server, which averages the
returned copies factor by factor.

Baseline modes reuse the same machinery:

=============  ==============================================================
``fedoa``      both paths, feature-distance penalty on the personalized path
``fedit``      global path only
``local_only`` personalized path only, no penalty, nothing communicated
``prox``       personalized path with ``lam * ||phi_e - phi_g||^2`` instead
``finetune``   ``fedit`` for ``T`` rounds, then ``K*T`` local steps from ``phi_g``
=============  ==============================================================
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Benchmark, Dataset, FederationLayout, build_benchmark
from .errors import DivergenceError, NumericError, ShapeError
from .metrics import (
    ClientTrace,
    RoundTrace,
    RunReport,
    empirical_risk,
    mean_feature_distance,
    worst_case_ood,
)
from .nn import GradBundle, LoraAdapter, ModelParts, axpy_params, backward, encode
from .regularizers import RegSpec
from .rng import stream

BASELINES = ("fedoa", "fedit", "local_only", "prox", "finetune")

# which adapter paths each mode trains during the federated rounds
_PERSONAL_PATH = {"fedoa", "local_only", "prox"}
_GLOBAL_PATH = {"fedoa", "fedit", "prox", "finetune"}


@dataclass(frozen=True)
class FedConfig:
    T: int = 20
    K: int = 2
    eta_l: float = 0.1
    eta_g: float = 0.1
    reg: RegSpec = field(default_factory=lambda: RegSpec("l2sq", 0.5))
    alpha: Optional[Tuple[float, ...]] = None
    sample_frac: float = 1.0
    batch_size: int = 32
    global_steps: int = 1
    global_full_batch: bool = True
    baseline: str = "fedoa"
    seed: int = 0
    local_epochs: bool = False

    def __post_init__(self):
        if self.T < 1 or self.K < 1:
            raise ValueError("T and K must be >= 1")
        if not (self.eta_l >= 0 and self.eta_g >= 0 and math.isfinite(self.eta_l) and math.isfinite(self.eta_g)):
            raise ValueError("step sizes must be finite and non-negative")
        if not 0 < self.sample_frac <= 1:
            raise ValueError("sample_frac must lie in (0, 1]")
        if self.batch_size < 1 or self.global_steps < 1:
            raise ValueError("batch_size and global_steps must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(a < 0 for a in self.alpha) or sum(self.alpha) <= 0:
                raise ValueError("alpha weights must be non-negative with a positive sum")

    def local_steps(self, n: int) -> int:
        if self.local_epochs:
            return self.K * math.ceil(n / self.batch_size)
        return self.K

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["reg"] = {"kind": self.reg.kind, "lam": self.reg.lam}
        out["alpha"] = None if self.alpha is None else list(self.alpha)
        return out


class BatchSampler:
    """Sequential passes over a shuffled permutation, reshuffled each round and on exhaustion."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = np.arange(n)
        self._pos = n

    def start_round(self) -> None:
        self._perm = self.rng.permutation(self.n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self.start_round()
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class ClientState:
    client_id: int
    personalized: Optional[LoraAdapter]
    data: Dataset
    batches: BatchSampler
    global_batches: BatchSampler
    probe: Optional[Dataset] = None  # inputs for the feature-distance trace

    @classmethod
    def create(cls, client_id, personalized, data, cfg: FedConfig, probe=None) -> "ClientState":
        n = len(data)
        return cls(
            client_id,
            personalized,
            data,
            BatchSampler(n, cfg.batch_size, stream(cfg.seed, "client", client_id, "batches")),
            BatchSampler(n, cfg.batch_size, stream(cfg.seed, "client", client_id, "global-batches")),
            probe,
        )


@dataclass
class ServerState:
    round: int
    global_adapter: LoraAdapter


@dataclass
class ClientResult:
    client_id: int
    personalized: Optional[LoraAdapter]
    global_update: Optional[LoraAdapter]
    risk: Optional[float] = None
    grad_norm_sq: Optional[float] = None
    step_losses: List[float] = field(default_factory=list)


def _prox_grad(grads: GradBundle, phi: LoraAdapter, ref: LoraAdapter, lam: float) -> GradBundle:
    return GradBundle(
        [
            (dA + 2.0 * lam * (A - rA), dB + 2.0 * lam * (B - rB))
            for (dA, dB), (A, B), (rA, rB) in zip(grads.layers, phi.layers, ref.layers)
        ]
    )


def _checked_backward(model, phi, xs, ys, reg=None, z_ref=None, *, where):
    try:
        return backward(model.enc, phi, model.head, xs, ys, reg, z_ref)
    except NumericError as exc:
        raise DivergenceError(f"training diverged: {exc}", **where) from exc


def personalized_sgd(
    model: ModelParts,
    client: ClientState,
    phi: LoraAdapter,
    steps: int,
    eta: float,
    *,
    mode: str = "local_only",
    reg: Optional[RegSpec] = None,
    reference: Optional[LoraAdapter] = None,
    round_idx: Optional[int] = None,
) -> Tuple[LoraAdapter, List[float]]:
    """``steps`` mini-batch SGD steps on the personalized adapter.

    ``mode`` picks the penalty: ``fedoa`` adds the feature-distance term
    against ``reference`` evaluated on the same batch, ``prox`` adds the
    parameter-space proximal term, anything else trains on the plain risk.
    """
    client.batches.start_round()
    losses = []
    feature_reg = mode == "fedoa" and reg is not None and reg.active
    param_reg = mode == "prox" and reg is not None and reg.active
    for k in range(steps):
        where = {"round": round_idx, "client": client.client_id, "step": k}
        idx = client.batches.next()
        xb, yb = client.data.xs[idx], client.data.ys[idx]
        if feature_reg:
            z_ref = encode(model.enc, reference, xb)
            value, grads = _checked_backward(model, phi, xb, yb, reg, z_ref, where=where)
        else:
            value, grads = _checked_backward(model, phi, xb, yb, where=where)
            if param_reg:
                grads = _prox_grad(grads, phi, reference, reg.lam)
        phi = axpy_params(phi, grads, -eta)
        if not phi.is_finite():
            raise DivergenceError("personalized adapter became non-finite", **where)
        losses.append(value)
    return phi, losses


def global_path(
    model: ModelParts, client: ClientState, snapshot: LoraAdapter, cfg: FedConfig, round_idx: Optional[int] = None
) -> LoraAdapter:
    """Plain risk steps on a copy of the broadcast adapter; restarts from the broadcast every round."""
    phi = snapshot.copy()
    if not cfg.global_full_batch:
        client.global_batches.start_round()
    for s in range(cfg.global_steps):
        where = {"round": round_idx, "client": client.client_id, "step": f"global-{s}"}
        if cfg.global_full_batch:
            xs, ys = client.data.xs, client.data.ys
        else:
            idx = client.global_batches.next()
            xs, ys = client.data.xs[idx], client.data.ys[idx]
        _, grads = _checked_backward(model, phi, xs, ys, where=where)
        phi = axpy_params(phi, grads, -cfg.eta_g)
        if not phi.is_finite():
            raise DivergenceError("global adapter became non-finite", **where)
    return phi


def client_update(
    client: ClientState,
    snapshot: LoraAdapter,
    cfg: FedConfig,
    model: ModelParts,
    round_idx: Optional[int] = None,
) -> ClientResult:
    """One client's work in a round: personalized path, then global path.

    The squared norm recorded in the result is the full-batch risk gradient at
    the personalized adapter *before* this round's steps.
    """
    mode = cfg.baseline
    result = ClientResult(client.client_id, None, None)
    if mode in _PERSONAL_PATH:
        phi0 = client.personalized
        _, g0 = _checked_backward(
            model, phi0, client.data.xs, client.data.ys, where={"round": round_idx, "client": client.client_id}
        )
        result.grad_norm_sq = g0.norm_sq()
        phi, result.step_losses = personalized_sgd(
            model,
            client,
            phi0,
            cfg.local_steps(len(client.data)),
            cfg.eta_l,
            mode=mode,
            reg=cfg.reg,
            reference=snapshot,
            round_idx=round_idx,
        )
        result.personalized = phi
        result.risk = empirical_risk(model, phi, client.data)[0]
    if mode in _GLOBAL_PATH:
        result.global_update = global_path(model, client, snapshot, cfg, round_idx)
    return result


def aggregate(updates: Sequence[Tuple[LoraAdapter, float]]) -> LoraAdapter:
    """Weighted mean of adapters, each factor averaged on its own.

    Weights are renormalized to sum to one. The mean is accumulated as
    ``first + sum_i w_i (phi_i - first)`` so identical inputs return exactly.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    weights = np.array([w for _, w in updates], dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    weights = weights / weights.sum()
    first = updates[0][0]
    for ad, _ in updates[1:]:
        if len(ad.layers) != len(first.layers) or any(
            a.shape != fa.shape or b.shape != fb.shape for (a, b), (fa, fb) in zip(ad.layers, first.layers)
        ):
            raise ShapeError("adapters being aggregated have different shapes")
    layers = []
    for j, (A0, B0) in enumerate(first.layers):
        A_acc = np.zeros_like(A0)
        B_acc = np.zeros_like(B0)
        for (ad, _), w in zip(updates, weights):
            A, B = ad.layers[j]
            A_acc += w * (A - A0)
            B_acc += w * (B - B0)
        layers.append((A0 + A_acc, B0 + B_acc))
    return LoraAdapter(layers, first.rank, first.scale)


def client_weights(clients: Sequence[ClientState], cfg: FedConfig) -> Dict[int, float]:
    if cfg.alpha is not None:
        if len(cfg.alpha) != len(clients):
            raise ValueError(f"alpha has {len(cfg.alpha)} entries for {len(clients)} clients")
        return {c.client_id: a for c, a in zip(sorted(clients, key=lambda c: c.client_id), cfg.alpha)}
    return {c.client_id: float(len(c.data)) for c in clients}


def sample_clients(clients: Sequence[ClientState], frac: float, rng: np.random.Generator) -> List[ClientState]:
    """Shuffle ids (Fisher-Yates via ``rng.permutation``), take ``ceil(frac*n)``, return sorted by id."""
    ids = sorted(c.client_id for c in clients)
    m = math.ceil(frac * len(ids))
    if m < 1:
        raise ValueError("no client would be sampled")
    order = rng.permutation(len(ids))
    chosen = {ids[i] for i in order[:m]}
    return sorted((c for c in clients if c.client_id in chosen), key=lambda c: c.client_id)


def communicated_bytes(n_sampled: int, param_count: int) -> int:
    """Down- plus up-link traffic of one round with float64 adapters."""
    return n_sampled * 2 * param_count * 8


def mixture_risk(model, adapter, clients, weights) -> float:
    total = sum(weights[c.client_id] for c in clients)
    return float(sum(weights[c.client_id] * empirical_risk(model, adapter, c.data)[0] for c in clients) / total)


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: FedConfig,
    model: ModelParts,
    rng: np.random.Generator,
) -> Tuple[ServerState, RoundTrace]:
    """Advance one round; mutates the sampled clients' personalized adapters."""
    mode = cfg.baseline
    sampled = sample_clients(clients, cfg.sample_frac, rng)
    weights = client_weights(clients, cfg)
    snapshot = server.global_adapter.copy()
    results = [client_update(c, snapshot.copy(), cfg, model, server.round) for c in sampled]

    new_global = server.global_adapter
    if mode in _GLOBAL_PATH:
        new_global = aggregate([(r.global_update, weights[r.client_id]) for r in results])
    for c, r in zip(sampled, results):
        if r.personalized is not None:
            c.personalized = r.personalized

    entries = []
    for c, r in zip(sampled, results):
        feat = None
        if r.personalized is not None and c.probe is not None:
            feat = mean_feature_distance(model.enc, r.personalized, new_global, c.probe, cfg.reg.kind)
        entries.append(ClientTrace(c.client_id, r.risk, r.grad_norm_sq, feat))
    global_risk = mixture_risk(model, new_global, clients, weights) if mode in _GLOBAL_PATH else None
    comm = 0 if mode == "local_only" else communicated_bytes(len(sampled), new_global.param_count)
    trace = RoundTrace(server.round, entries, global_risk, comm)
    return ServerState(server.round + 1, new_global), trace


def theorem4_stepsizes(L: float, sigma: float, lam: float, K: int, T: int) -> Tuple[float, float]:
    """Largest constant local and global step sizes covered by the convergence bound.

    ``eta_l <= 1 / (8 sqrt(3 (1+3T) T (1+2K) K) lam sigma L)`` and
    ``eta_g <= 1 / (2 sqrt(6 (1+3T) T) L)``.
    """
    for name, v in (("L", L), ("sigma", sigma), ("lambda", lam), ("K", K), ("T", T)):
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")
    eta_l = 1.0 / (8.0 * math.sqrt(3.0 * (1 + 3 * T) * T * (1 + 2 * K) * K) * lam * sigma * L)
    eta_g = 1.0 / (2.0 * math.sqrt(6.0 * (1 + 3 * T) * T) * L)
    return eta_l, eta_g


# -- whole experiments --------------------------------------------------------


@dataclass
class Federation:
    """Live state of one experiment: server, clients, and the round RNG."""

    server: ServerState
    clients: List[ClientState]
    rng: np.random.Generator


def init_federation(cfg: FedConfig, bench: Benchmark, model: ModelParts) -> Federation:
    phi0 = model.new_adapter(stream(cfg.seed, "adapter-init"))
    clients = []
    for i, split in enumerate(bench.clients):
        personalized = phi0.copy() if cfg.baseline != "fedit" else None
        clients.append(ClientState.create(i, personalized, split.train, cfg, probe=split.ood))
    return Federation(ServerState(0, phi0), clients, stream(cfg.seed, "sampling"))


def _evaluate(cfg, model, bench, fed, rounds, started, config_echo) -> RunReport:
    mode = cfg.baseline
    phi_g = fed.server.global_adapter
    has_personal = mode != "fedit"
    has_global = mode != "local_only"
    kind = cfg.reg.kind

    personal_ood = ood_dist = None
    p_ood_mean = p_test_mean = None
    worst_pairs = []
    if has_personal:
        personal_ood, ood_dist, test_acc = [], [], []
        for c, split in zip(fed.clients, bench.clients):
            risk, acc = empirical_risk(model, c.personalized, split.ood)
            personal_ood.append({"client_id": c.client_id, "risk": risk, "acc": acc})
            ood_dist.append(mean_feature_distance(model.enc, c.personalized, phi_g, split.ood, kind))
            test_acc.append(empirical_risk(model, c.personalized, split.test)[1])
            worst_pairs.append((c.personalized, split.ood))
        p_ood_mean = float(np.mean([r["acc"] for r in personal_ood]))
        p_test_mean = float(np.mean(test_acc))

    g_inter = g_intra = None
    if has_global:
        risk, acc = empirical_risk(model, phi_g, bench.heldout)
        g_inter = {"risk": risk, "acc": acc}
        g_intra = float(np.mean([empirical_risk(model, phi_g, s.ood)[1] for s in bench.clients]))
        worst_pairs.append((phi_g, bench.heldout))
        worst_pairs.extend((phi_g, s.ood) for s in bench.clients)

    adapters = {"global": phi_g}
    if has_personal:
        adapters.update({f"client-{c.client_id}": c.personalized for c in fed.clients})
    return RunReport(
        config=config_echo,
        seed=cfg.seed,
        rounds=rounds,
        personalized_ood=personal_ood,
        personalized_ood_acc_mean=p_ood_mean,
        personalized_test_acc_mean=p_test_mean,
        ood_feature_distance=ood_dist,
        global_inter_ood=g_inter,
        global_intra_ood_acc_mean=g_intra,
        worst_case_ood_risk=worst_case_ood(model, worst_pairs),
        bytes_communicated=int(sum(r.bytes_communicated for r in rounds)),
        adapter_param_count=phi_g.param_count,
        wall_clock_s=time.perf_counter() - started,
        adapters=adapters,
    )


def run_experiment(
    cfg: FedConfig,
    bench: Benchmark,
    model: ModelParts,
    config_echo: Optional[Dict] = None,
) -> RunReport:
    """Run ``cfg.T`` rounds in the configured mode and evaluate the final adapters."""
    started = time.perf_counter()
    fed = init_federation(cfg, bench, model)
    round_cfg = replace(cfg, baseline="fedit") if cfg.baseline == "finetune" else cfg
    rounds = []
    for _ in range(cfg.T):
        fed.server, trace = run_round(fed.server, fed.clients, round_cfg, model, fed.rng)
        rounds.append(trace)
    if cfg.baseline == "finetune":
        for c in fed.clients:
            c.personalized, _ = personalized_sgd(
                model, c, fed.server.global_adapter.copy(), cfg.local_steps(len(c.data)) * cfg.T, cfg.eta_l
            )
    echo = config_echo if config_echo is not None else {"fed": cfg.to_dict()}
    return _evaluate(cfg, model, bench, fed, rounds, started, echo)
