import math

import numpy as np
import pytest

from fedoa.data import (
    Dataset,
    EnvSpec,
    bayes_invariant_accuracy,
    build_benchmark,
    invariant_direction,
    make_layout,
    sample_env,
)
from fedoa.rng import stream


def _sign_agreement(noise: float) -> float:
    # P(sign u == sign(u + e)) for u ~ N(0, 1), e ~ N(0, noise^2) is 1 - angle/pi
    return 1.0 - math.acos(1.0 / math.sqrt(1.0 + noise**2)) / math.pi


@pytest.mark.parametrize("noise", [0.25, 0.5])
def test_bayes_ceiling_matches_closed_form(noise):
    spec = EnvSpec("e", 0.7, label_noise=noise)
    w = invariant_direction(5, 0)
    acc = bayes_invariant_accuracy(spec, 200_000, stream(0, "mc", noise), w)
    assert acc == pytest.approx(_sign_agreement(noise), abs=0.004)


def test_closed_form_fixture_values():
    assert _sign_agreement(0.5) == pytest.approx(0.85242, abs=1e-5)
    assert _sign_agreement(0.25) == pytest.approx(0.92202, abs=1e-5)


def test_ceiling_requires_enough_samples():
    with pytest.raises(ValueError):
        bayes_invariant_accuracy(EnvSpec("e", 0.5), 10, np.random.default_rng(0), np.ones(5) / np.sqrt(5))


def test_spurious_shortcut_flips_under_intra_client_shift():
    layout = make_layout()
    bench = build_benchmark(layout, 0)
    split = bench.clients[-1]  # beta = 0.9

    def shortcut_acc(data):
        pred = np.where(data.xs[:, 5:].sum(axis=1) >= 0, 1.0, -1.0)
        return float(np.mean(pred == data.ys))

    assert shortcut_acc(split.train) > 0.9
    assert shortcut_acc(split.ood) < 0.1
    # the invariant block is unaffected by the shift
    w = bench.w_inv

    def invariant_acc(data):
        return float(np.mean(np.where(data.xs[:, :5] @ w >= 0, 1.0, -1.0) == data.ys))

    assert abs(invariant_acc(split.train) - invariant_acc(split.ood)) < 0.06


def test_layout_shape():
    layout = make_layout()
    betas = [e.beta for e in layout.train_envs]
    np.testing.assert_allclose(betas, np.linspace(0.6, 0.9, 6))
    assert [e.beta for e in layout.intra_ood] == [-b for b in betas]
    assert layout.heldout_env.beta == -0.9
    assert [e.env_id for e in layout.intra_ood][0] == "env-0-flip"


def test_layout_validation():
    with pytest.raises(ValueError):
        make_layout(n_clients=1)
    with pytest.raises(ValueError):
        make_layout(beta_range=(0.9, 0.6))
    with pytest.raises(ValueError):
        EnvSpec("e", 1.5)


def test_benchmark_is_deterministic_and_seed_dependent():
    a = build_benchmark(make_layout(), 7)
    b = build_benchmark(make_layout(), 7)
    c = build_benchmark(make_layout(), 8)
    np.testing.assert_array_equal(a.clients[2].train.xs, b.clients[2].train.xs)
    assert not np.array_equal(a.clients[2].train.xs, c.clients[2].train.xs)
    assert len(a.clients[0].train) == 1000 and len(a.clients[0].ood) == 200
    assert np.linalg.norm(a.w_inv) == pytest.approx(1.0)


def test_sample_env_label_rule():
    spec = EnvSpec("e", 0.0, label_noise=0.0)
    w = invariant_direction(5, 1)
    data = sample_env(spec, 500, np.random.default_rng(2), w)
    np.testing.assert_array_equal(data.ys, np.where(data.xs[:, :5] @ w >= 0, 1.0, -1.0))


def test_csv_round_trip(tmp_path):
    data = sample_env(EnvSpec("env-3", 0.8), 20, np.random.default_rng(0), invariant_direction(5, 0))
    path = tmp_path / "d.csv"
    data.to_csv(path)
    back = Dataset.from_csv(path)
    np.testing.assert_array_equal(back.xs, data.xs)
    np.testing.assert_array_equal(back.ys, data.ys)
    assert back.env_id == "env-3"
    assert path.read_text().splitlines()[0] == ",".join([f"x_{i}" for i in range(10)] + ["y", "env_id"])


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([1.0, 0.0]), "e")
