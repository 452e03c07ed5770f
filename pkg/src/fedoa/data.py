"""Synthetic environments with one invariant and one spurious feature block.

Each sample draws invariant coordinates ``z ~ N(0, I)`` and a label
``y = sign(w_inv . z + eps)``; the spurious block is ``y * beta * 1 + N(0, I)``.
``w_inv`` is shared by every environment of an experiment, so the label rule
given ``z`` never changes, while ``beta`` (and therefore how much the spurious
block predicts) differs per environment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .rng import stream


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    beta: float
    d_inv: int = 5
    d_spu: int = 5
    label_noise: float = 0.25
    n_train: int = 1000
    n_test: int = 200

    def __post_init__(self):
        if self.d_inv < 1 or self.d_spu < 0:
            raise ValueError(f"need d_inv >= 1 and d_spu >= 0, got {self.d_inv}, {self.d_spu}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if not -1.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [-1, 1], got {self.beta}")
        if not (math.isfinite(self.label_noise) and self.label_noise >= 0):
            raise ValueError(f"label_noise must be finite and >= 0, got {self.label_noise}")

    @property
    def dim(self) -> int:
        return self.d_inv + self.d_spu


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    env_id: str

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 2 or self.ys.shape != (self.xs.shape[0],):
            raise ValueError(f"xs {self.xs.shape} and ys {self.ys.shape} do not pair up")
        if not np.all(np.isfinite(self.xs)):
            raise ValueError("inputs must be finite")
        if not np.all(np.abs(self.ys) == 1.0):
            raise ValueError("labels must be -1 or +1")

    def __len__(self) -> int:
        return self.xs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.xs[idx], self.ys[idx], self.env_id)

    def to_csv(self, path) -> None:
        """Write ``x_0..x_{d-1}, y, env_id`` rows."""
        d = self.xs.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{i}" for i in range(d)] + ["y", "env_id"])
            for x, y in zip(self.xs, self.ys):
                writer.writerow([format(v, ".17g") for v in x] + [int(y), self.env_id])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = len(header) - 2
        xs = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        ys = np.array([float(r[d]) for r in body])
        env_ids = {r[d + 1] for r in body}
        if len(env_ids) > 1:
            raise ValueError(f"CSV mixes environments: {sorted(env_ids)}")
        return cls(xs, ys, env_ids.pop() if env_ids else Path(path).stem)


def invariant_direction(d_inv: int, seed: int) -> np.ndarray:
    """Unit vector defining the shared label rule of one experiment."""
    w = stream(seed, "w_inv").standard_normal(d_inv)
    return w / np.linalg.norm(w)


def invariant_labels(z: np.ndarray, w_inv: np.ndarray, noise: np.ndarray) -> np.ndarray:
    raw = z @ w_inv + noise
    return np.where(raw >= 0.0, 1.0, -1.0)


def sample_env(spec: EnvSpec, n: int, rng: np.random.Generator, w_inv: np.ndarray) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    w_inv = np.asarray(w_inv, dtype=np.float64)
    if w_inv.shape != (spec.d_inv,):
        raise ValueError(f"w_inv has shape {w_inv.shape}, expected ({spec.d_inv},)")
    z = rng.standard_normal((n, spec.d_inv))
    y = invariant_labels(z, w_inv, spec.label_noise * rng.standard_normal(n))
    s = spec.beta * y[:, None] + rng.standard_normal((n, spec.d_spu))
    return Dataset(np.hstack([z, s]), y, spec.env_id)


@dataclass(frozen=True)
class FederationLayout:
    train_envs: Tuple[EnvSpec, ...]
    heldout_env: EnvSpec
    intra_ood: Tuple[EnvSpec, ...]

    def __post_init__(self):
        ids = {e.env_id for e in self.train_envs}
        if self.heldout_env.env_id in ids:
            raise ValueError("held-out environment reuses a training env id")
        if len(self.intra_ood) != len(self.train_envs):
            raise ValueError("need one intra-client OOD env per training env")
        for train, shifted in zip(self.train_envs, self.intra_ood):
            if replace(shifted, env_id=train.env_id, beta=train.beta) != train:
                raise ValueError(f"intra-OOD env of {train.env_id} differs in more than beta")

    @property
    def n_clients(self) -> int:
        return len(self.train_envs)


def make_layout(
    n_clients: int = 6,
    beta_range: Sequence[float] = (0.6, 0.9),
    heldout_beta: float = -0.9,
    dims: Tuple[int, int] = (5, 5),
    ns: Tuple[int, int] = (1000, 200),
    label_noise: float = 0.25,
) -> FederationLayout:
    """Clients with evenly spaced betas, a held-out env, and sign-flipped per-client shifts."""
    lo, hi = beta_range
    if n_clients < 2:
        raise ValueError("need at least two clients")
    if not lo <= hi:
        raise ValueError(f"invalid beta range [{lo}, {hi}]")
    d_inv, d_spu = dims
    n_train, n_test = ns
    betas = np.linspace(lo, hi, n_clients)
    train = tuple(
        EnvSpec(f"env-{i}", float(b), d_inv, d_spu, label_noise, n_train, n_test) for i, b in enumerate(betas)
    )
    heldout = EnvSpec("heldout", float(heldout_beta), d_inv, d_spu, label_noise, n_train, n_test)
    flipped = tuple(replace(e, env_id=f"{e.env_id}-flip", beta=-e.beta) for e in train)
    return FederationLayout(train, heldout, flipped)


@dataclass
class ClientSplit:
    train: Dataset
    test: Dataset
    ood: Dataset


@dataclass
class Benchmark:
    """Concrete datasets for a layout under one experiment seed."""

    layout: FederationLayout
    seed: int
    w_inv: np.ndarray
    clients: List[ClientSplit]
    heldout: Dataset


def build_benchmark(layout: FederationLayout, seed: int) -> Benchmark:
    d_inv = layout.heldout_env.d_inv
    w_inv = invariant_direction(d_inv, seed)
    clients = []
    for env, shifted in zip(layout.train_envs, layout.intra_ood):
        clients.append(
            ClientSplit(
                train=sample_env(env, env.n_train, stream(seed, "data", env.env_id, "train"), w_inv),
                test=sample_env(env, env.n_test, stream(seed, "data", env.env_id, "test"), w_inv),
                ood=sample_env(shifted, shifted.n_test, stream(seed, "data", shifted.env_id, "test"), w_inv),
            )
        )
    held = layout.heldout_env
    heldout = sample_env(held, held.n_test, stream(seed, "data", held.env_id, "test"), w_inv)
    return Benchmark(layout, seed, w_inv, clients, heldout)


def bayes_invariant_accuracy(spec: EnvSpec, n_mc: int, rng: np.random.Generator, w_inv: np.ndarray) -> float:
    """Monte-Carlo accuracy of ``sign(w_inv . z)`` against sampled labels; ignores the spurious block."""
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    data = sample_env(spec, n_mc, rng, w_inv)
    z = data.xs[:, : spec.d_inv]
    pred = np.where(z @ np.asarray(w_inv) >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == data.ys))
