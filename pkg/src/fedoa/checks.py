"""Fast self-verification: gradient checks, reduction identities, oracles.

Each check returns ``(passed, detail)``. :func:`run_checks` runs them all and
never lets one check's exception hide the others.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import nn, protocol, regularizers
from .data import build_benchmark, make_layout
from .rng import stream

CheckResult = Tuple[bool, str]


def _random_instance(seed: int, layers: int = 2, activation: str = "tanh", n: int = 8):
    rng = np.random.default_rng(seed)
    dims = [6] + [5] * (layers - 1) + [4]
    enc = nn.init_encoder(dims, rng, activation)
    head = nn.init_head(4, rng)
    ad = nn.init_adapter(enc, 2, rng)
    ad = nn.LoraAdapter([(A, 0.3 * rng.standard_normal(B.shape)) for A, B in ad.layers], ad.rank, ad.scale)
    X = rng.standard_normal((n, 6))
    y = np.where(rng.standard_normal(n) >= 0, 1.0, -1.0)
    other = nn.LoraAdapter(
        [(A + 0.2 * rng.standard_normal(A.shape), B + 0.2 * rng.standard_normal(B.shape)) for A, B in ad.layers],
        ad.rank,
        ad.scale,
    )
    z_ref = nn.encode(enc, other, X)
    return enc, head, ad, X, y, z_ref


def check_model_gradients(kind: str, draws: int = 6) -> CheckResult:
    worst = 0.0
    for s in range(draws):
        layers = 1 + s % 2
        act = ("tanh", "identity")[(s // 2) % 2]
        lam = (0.0, 0.5, 2.0)[s % 3]
        enc, head, ad, X, y, z_ref = _random_instance(1000 + s, layers, act)
        reg = regularizers.RegSpec(kind, lam)
        worst = max(worst, nn.fd_check(enc, ad, head, X, y, reg, z_ref if lam > 0 else None, 1e-5))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def check_distance_gradient(kind: str, draws: int = 20, step: float = 1e-6) -> CheckResult:
    rng = stream(7, "check", kind)
    worst = 0.0
    for _ in range(draws):
        zp, zg = rng.standard_normal(5), rng.standard_normal(5)
        g = regularizers.dist_grad_zp(zp, zg, kind)
        for i in range(5):
            e = np.zeros(5)
            e[i] = step
            num = (regularizers.dist(zp + e, zg, kind) - regularizers.dist(zp - e, zg, kind)) / (2 * step)
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-8))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_distance_properties() -> CheckResult:
    rng = stream(7, "check", "props")
    problems = []
    for _ in range(20):
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        c, m = float(rng.uniform(0.1, 10)), float(rng.normal(0, 5))
        for kind in regularizers.KINDS:
            if regularizers.dist(a, a, kind) > 1e-12:
                problems.append(f"{kind} self-distance")
            if regularizers.dist(a, b, kind) < 0:
                problems.append(f"{kind} negative")
        if regularizers.dist(a, b, "l2sq") != regularizers.dist(b, a, "l2sq"):
            problems.append("l2sq symmetry")
        if abs(regularizers.dist(c * a, a, "cosine")) > 1e-12:
            problems.append("cosine scale invariance")
        if abs(regularizers.dist(c * a + m, a, "pearson")) > 1e-12:
            problems.append("pearson affine invariance")
    return not problems, "ok" if not problems else ", ".join(sorted(set(problems)))


def check_zero_adapter() -> CheckResult:
    enc, _, ad, X, _, _ = _random_instance(3)
    zero_b = nn.LoraAdapter([(A, np.zeros_like(B)) for A, B in ad.layers], ad.rank, ad.scale)
    same = np.array_equal(nn.encode(enc, zero_b, X), nn.encode(enc, None, X))
    return same, "bitwise equal" if same else "zero adapter changed the backbone output"


def _tiny_federation(baseline: str, lam: float, seed: int = 5):
    layout = make_layout(3, (0.6, 0.9), -0.9, (2, 2), (64, 32))
    bench = build_benchmark(layout, seed)
    model = nn.build_model(4, 4, 1, stream(seed, "model"), rank=2)
    cfg = protocol.FedConfig(T=3, K=3, eta_l=0.2, eta_g=0.2, batch_size=16, seed=seed, baseline=baseline,
                             reg=regularizers.RegSpec("l2sq", lam))
    return cfg, bench, model


def _personalized_after(cfg, bench, model):
    report = protocol.run_experiment(cfg, bench, model)
    return [report.adapters[f"client-{i}"] for i in range(len(bench.clients))]


def _bitwise_same(xs, ys) -> bool:
    return all(np.array_equal(a.flat(), b.flat()) for a, b in zip(xs, ys))


def check_lambda_zero_reduction() -> CheckResult:
    cfg, bench, model = _tiny_federation("fedoa", 0.0)
    ok = _bitwise_same(_personalized_after(cfg, bench, model),
                       _personalized_after(replace(cfg, baseline="local_only"), bench, model))
    return ok, "bitwise equal" if ok else "fedoa with lambda=0 differs from local_only"


def check_prox_zero_reduction() -> CheckResult:
    cfg, bench, model = _tiny_federation("prox", 0.0)
    ok = _bitwise_same(_personalized_after(cfg, bench, model),
                       _personalized_after(replace(cfg, baseline="local_only"), bench, model))
    return ok, "bitwise equal" if ok else "prox with lambda=0 differs from local_only"


def check_aggregation_oracle() -> CheckResult:
    cfg, bench, model = _tiny_federation("fedit", 0.5)
    fed = protocol.init_federation(cfg, bench, model)
    before = fed.server.global_adapter
    server, _ = protocol.run_round(fed.server, fed.clients, replace(cfg, T=1), model, fed.rng)
    # centralized step on the size-weighted mixture of client risks
    X = np.vstack([c.data.xs for c in fed.clients])
    y = np.concatenate([c.data.ys for c in fed.clients])
    _, g = nn.backward(model.enc, before, model.head, X, y)
    expected = nn.axpy_params(before, g, -cfg.eta_g)
    err = float(np.max(np.abs(server.global_adapter.flat() - expected.flat())))
    return err <= 1e-12, f"max abs diff {err:.1e}"


def check_stepsize_helper() -> CheckResult:
    eta_l, eta_g = protocol.theorem4_stepsizes(1.0, 1.0, 0.5, 2, 20)
    ok = abs(eta_l - 1.3068e-3) < 1e-6 and abs(eta_g - 5.844e-3) < 1e-6
    return ok, f"eta_l={eta_l:.6e}, eta_g={eta_g:.6e}"


def all_checks() -> Dict[str, Callable[[], CheckResult]]:
    checks: Dict[str, Callable[[], CheckResult]] = {}
    for kind in regularizers.KINDS:
        checks[f"model_gradient_{kind}"] = lambda k=kind: check_model_gradients(k)
    for kind in regularizers.KINDS:
        checks[f"distance_gradient_{kind}"] = lambda k=kind: check_distance_gradient(k)
    checks["distance_properties"] = check_distance_properties
    checks["zero_adapter_neutrality"] = check_zero_adapter
    checks["lambda_zero_reduction"] = check_lambda_zero_reduction
    checks["prox_zero_reduction"] = check_prox_zero_reduction
    checks["aggregation_oracle"] = check_aggregation_oracle
    checks["stepsize_helper"] = check_stepsize_helper
    return checks


def run_checks(echo: Callable[[str], None] = print) -> List[Tuple[str, bool, str]]:
    results = []
    width = max(len(name) for name in all_checks())
    for name, fn in all_checks().items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - t0
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {elapsed:6.2f}s  {detail}")
        results.append((name, ok, detail))
    return results
