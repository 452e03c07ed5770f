"""Dense numeric core: frozen encoder, low-rank adapters, fixed head.

The encoder is a stack of dense layers ``u -> act((W0 + scale * B @ A) @ u + b)``
where ``W0`` and ``b`` never change and only the factor pairs ``(A, B)`` of
adapted layers are trained. A fixed linear head maps the final features to a
single logit, scored with the binary logistic loss on labels in {-1, +1}.

Backprop is written out by hand for the adapter factors only and checked
against central finite differences by :func:`fd_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericError, ShapeError
from . import regularizers
from .regularizers import RegSpec

ACTIVATIONS = ("tanh", "relu", "identity")


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "identity":
        return pre
    raise ValueError(f"unknown activation {kind!r}")


def _activation_slope(pre: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EncoderLayer:
    W0: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"
    adapted: bool = True

    def __post_init__(self):
        object.__setattr__(self, "W0", _frozen(self.W0))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.W0.ndim != 2 or self.bias.shape != (self.W0.shape[0],):
            raise ShapeError(f"layer weight {self.W0.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.W0)) and np.all(np.isfinite(self.bias))):
            raise NumericError("frozen layer contains non-finite entries")

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]


@dataclass(frozen=True)
class FrozenEncoder:
    """Backbone whose weights are read-only arrays after construction."""

    layers: Tuple[EncoderLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("encoder needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ShapeError(f"layer dims do not chain: {prev.d_out} -> {nxt.d_in}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def adapted_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapted]


@dataclass(frozen=True)
class FixedHead:
    W_head: np.ndarray

    def __post_init__(self):
        w = _frozen(self.W_head)
        if w.ndim == 1:
            w = _frozen(w[None, :])
        if w.ndim != 2 or w.shape[0] != 1:
            raise ShapeError(f"head must be 1 x h, got {w.shape}")
        object.__setattr__(self, "W_head", w)

    @property
    def feature_dim(self) -> int:
        return self.W_head.shape[1]


@dataclass
class LoraAdapter:
    """Factor pairs ``(A: r x d_in, B: d_out x r)``, one per adapted layer, in layer order."""

    layers: List[Tuple[np.ndarray, np.ndarray]]
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        self.layers = [
            (np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)) for A, B in self.layers
        ]
        if self.rank < 1:
            raise ShapeError(f"rank must be >= 1, got {self.rank}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        for A, B in self.layers:
            if A.ndim != 2 or B.ndim != 2 or A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise ShapeError(f"factor shapes {A.shape}, {B.shape} inconsistent with rank {self.rank}")

    def delta(self, i: int) -> np.ndarray:
        """Materialized weight update of the i-th adapted layer."""
        A, B = self.layers[i]
        return self.scale * (B @ A)

    @property
    def param_count(self) -> int:
        return sum(A.size + B.size for A, B in self.layers)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter([(A.copy(), B.copy()) for A, B in self.layers], self.rank, self.scale)

    def flat(self) -> np.ndarray:
        return _flatten(self.layers)

    def with_flat(self, vec: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(_unflatten(self.layers, vec), self.rank, self.scale)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(A)) and np.all(np.isfinite(B)) for A, B in self.layers)


@dataclass
class GradBundle:
    """Gradients ``(dA, dB)`` mirroring a :class:`LoraAdapter`."""

    layers: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return _flatten(self.layers)

    def norm_sq(self) -> float:
        return float(sum(np.sum(dA * dA) + np.sum(dB * dB) for dA, dB in self.layers))


def _flatten(layers) -> np.ndarray:
    if not layers:
        return np.zeros(0)
    return np.concatenate([np.concatenate([A.ravel(), B.ravel()]) for A, B in layers])


def _unflatten(template, vec):
    vec = np.asarray(vec, dtype=np.float64)
    out, pos = [], 0
    for A, B in template:
        a = vec[pos:pos + A.size].reshape(A.shape)
        pos += A.size
        b = vec[pos:pos + B.size].reshape(B.shape)
        pos += B.size
        out.append((a.copy(), b.copy()))
    if pos != vec.size:
        raise ShapeError(f"flat vector has {vec.size} entries, template needs {pos}")
    return out


# -- construction -------------------------------------------------------------


def init_encoder(
    dims: Sequence[int],
    rng: np.random.Generator,
    activation: str = "tanh",
    adapted: Optional[Sequence[bool]] = None,
) -> FrozenEncoder:
    """Random "pretrained" backbone: ``W0 ~ N(0, 1/fan_in)``, zero bias.

    ``dims`` lists layer widths from the input, e.g. ``[10, 16, 16]`` gives
    two layers. All layers are adapted unless ``adapted`` says otherwise.
    """
    if len(dims) < 2:
        raise ShapeError("dims needs an input width and at least one layer width")
    n_layers = len(dims) - 1
    adapted = [True] * n_layers if adapted is None else list(adapted)
    if len(adapted) != n_layers:
        raise ShapeError("adapted flags must have one entry per layer")
    layers = []
    for d_in, d_out, flag in zip(dims[:-1], dims[1:], adapted):
        W0 = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        layers.append(EncoderLayer(W0, np.zeros(d_out), activation, flag))
    return FrozenEncoder(tuple(layers))


def init_head(h: int, rng: np.random.Generator, scale: float = 1.0) -> FixedHead:
    return FixedHead(scale * rng.standard_normal((1, h)) / np.sqrt(h))


def init_adapter(enc: FrozenEncoder, rank: int, rng: np.random.Generator, scale: float = 1.0) -> LoraAdapter:
    """LoRA-style start: ``A ~ U(-1/sqrt(d_in), 1/sqrt(d_in))`` and ``B = 0``, so the delta is zero."""
    layers = []
    for i in enc.adapted_indices:
        layer = enc.layers[i]
        if rank > min(layer.d_in, layer.d_out):
            raise ShapeError(f"rank {rank} exceeds min(d_in, d_out) of layer {i}")
        bound = 1.0 / np.sqrt(layer.d_in)
        A = rng.uniform(-bound, bound, size=(rank, layer.d_in))
        layers.append((A, np.zeros((layer.d_out, rank))))
    return LoraAdapter(layers, rank, scale)


def zeros_like(ad: LoraAdapter) -> LoraAdapter:
    return LoraAdapter([(np.zeros_like(A), np.zeros_like(B)) for A, B in ad.layers], ad.rank, ad.scale)


def check_compatible(enc: FrozenEncoder, ad: LoraAdapter) -> None:
    idx = enc.adapted_indices
    if len(idx) != len(ad.layers):
        raise ShapeError(f"encoder has {len(idx)} adapted layers, adapter has {len(ad.layers)}")
    for i, (A, B) in zip(idx, ad.layers):
        layer = enc.layers[i]
        if A.shape[1] != layer.d_in or B.shape[0] != layer.d_out:
            raise ShapeError(
                f"adapter factors {A.shape}/{B.shape} do not fit layer {i} ({layer.d_out} x {layer.d_in})"
            )


# -- forward ------------------------------------------------------------------


def _effective_weights(enc: FrozenEncoder, ad: Optional[LoraAdapter]) -> List[np.ndarray]:
    weights = [layer.W0 for layer in enc.layers]
    if ad is not None:
        check_compatible(enc, ad)
        for j, i in enumerate(enc.adapted_indices):
            weights[i] = enc.layers[i].W0 + ad.delta(j)
    return weights


def _forward(enc: FrozenEncoder, ad: Optional[LoraAdapter], X: np.ndarray):
    weights = _effective_weights(enc, ad)
    cache = []
    u = X
    for layer, W in zip(enc.layers, weights):
        pre = u @ W.T + layer.bias
        out = _activate(pre, layer.activation)
        cache.append((u, pre, out))
        u = out
    return u, cache, weights


def _as_batch(x, d: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"input shape {x.shape} does not match encoder input dim {d}")
    return X, single


def encode(enc: FrozenEncoder, ad: Optional[LoraAdapter], x) -> np.ndarray:
    """Features of one input vector ``(d,)`` or a batch ``(n, d)``.

    ``ad=None`` runs the bare frozen backbone.
    """
    X, single = _as_batch(x, enc.input_dim)
    z, _, _ = _forward(enc, ad, X)
    if not np.all(np.isfinite(z)):
        raise NumericError("encoder produced non-finite features")
    return z[0] if single else z


def predict(head: FixedHead, z) -> Union[float, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != head.feature_dim or z.ndim not in (1, 2):
        raise ShapeError(f"feature shape {z.shape} does not match head width {head.feature_dim}")
    logits = z @ head.W_head[0]
    return float(logits) if z.ndim == 1 else logits


def loss(logit, y):
    """Logistic loss ``log(1 + exp(-y * logit))``; works elementwise on arrays."""
    val = np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * np.asarray(logit, dtype=np.float64))
    return float(val) if np.ndim(val) == 0 else val


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _loss_slope(logit, y):
    """d loss / d logit = -y * sigmoid(-y * logit)."""
    return -y * _sigmoid(-y * logit)


# -- backward -----------------------------------------------------------------


def backward(
    enc: FrozenEncoder,
    ad: LoraAdapter,
    head: FixedHead,
    xs,
    ys,
    reg: Optional[RegSpec] = None,
    z_ref=None,
) -> Tuple[float, GradBundle]:
    """Mean loss over a batch plus analytic gradients for every adapter factor.

    The objective is ``mean_i [loss(head(enc(x_i)), y_i) + lam * D(enc(x_i), z_ref_i)]``.
    ``z_ref`` holds constant reference features, one row per sample; it is
    required exactly when ``reg.lam > 0``.

    Returns:
        ``(total_loss, grads)`` where ``grads`` mirrors ``ad``.
    """
    X, _ = _as_batch(xs, enc.input_dim)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n == 0 or y.shape[0] != n:
        raise ShapeError(f"batch of {n} inputs with {y.shape[0]} labels")
    if head.feature_dim != enc.feature_dim:
        raise ShapeError("head width does not match encoder feature dim")
    use_reg = reg is not None and reg.active
    if use_reg != (z_ref is not None):
        raise ValueError("z_ref must be given exactly when the regularizer weight is positive")

    z, cache, weights = _forward(enc, ad, X)
    w_head = head.W_head[0]
    logits = z @ w_head
    per_sample = loss(logits, y)
    total = float(np.mean(per_sample))
    dz = np.outer(_loss_slope(logits, y) / n, w_head)
    if use_reg:
        z_ref = np.asarray(z_ref, dtype=np.float64)
        if z_ref.shape != z.shape:
            raise ShapeError(f"reference features {z_ref.shape} do not match {z.shape}")
        total += reg.lam * float(np.mean(regularizers.dist_rows(z, z_ref, reg.kind)))
        dz = dz + (reg.lam / n) * regularizers.dist_grad_rows(z, z_ref, reg.kind)
    if not np.isfinite(total):
        raise NumericError("non-finite loss")

    slot = {i: j for j, i in enumerate(enc.adapted_indices)}
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(ad.layers)  # type: ignore[list-item]
    d_out = dz
    for i in range(len(enc.layers) - 1, -1, -1):
        layer = enc.layers[i]
        u, pre, out = cache[i]
        d_pre = d_out * _activation_slope(pre, out, layer.activation)
        if i in slot:
            A, B = ad.layers[slot[i]]
            dW = d_pre.T @ u
            grads[slot[i]] = (ad.scale * (B.T @ dW), ad.scale * (dW @ A.T))
        if i > 0:
            d_out = d_pre @ weights[i]
    bundle = GradBundle(grads)
    if not all(np.all(np.isfinite(dA)) and np.all(np.isfinite(dB)) for dA, dB in grads):
        raise NumericError("non-finite gradient")
    return total, bundle


def objective(enc, ad, head, xs, ys, reg=None, z_ref=None) -> float:
    """Value of the :func:`backward` objective without the gradient work."""
    X, _ = _as_batch(xs, enc.input_dim)
    z, _, _ = _forward(enc, ad, X)
    total = float(np.mean(loss(z @ head.W_head[0], np.asarray(ys, dtype=np.float64))))
    if reg is not None and reg.active:
        total += reg.lam * float(np.mean(regularizers.dist_rows(z, z_ref, reg.kind)))
    if not np.isfinite(total):
        raise NumericError("non-finite loss")
    return total


def fd_check(enc, ad, head, xs, ys, reg=None, z_ref=None, step: float = 1e-5, which: str = "all") -> float:
    """Worst relative error between analytic and central-difference gradients.

    Each adapter entry is perturbed by ``+-step``. The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. ``which`` restricts the
    comparison to ``"A"`` or ``"B"`` factors.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if which not in ("all", "A", "B"):
        raise ValueError(f"which must be 'all', 'A' or 'B', got {which!r}")
    _, grads = backward(enc, ad, head, xs, ys, reg, z_ref)
    worst = 0.0
    probe = ad.copy()
    for j, (A, B) in enumerate(ad.layers):
        for part, (mat, analytic) in enumerate(((A, grads.layers[j][0]), (B, grads.layers[j][1]))):
            if (which == "A" and part == 1) or (which == "B" and part == 0):
                continue
            target = probe.layers[j][part]
            for idx in np.ndindex(mat.shape):
                target[idx] = mat[idx] + step
                up = objective(enc, probe, head, xs, ys, reg, z_ref)
                target[idx] = mat[idx] - step
                down = objective(enc, probe, head, xs, ys, reg, z_ref)
                target[idx] = mat[idx]
                numeric = (up - down) / (2.0 * step)
                a = analytic[idx]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    return worst


def axpy_params(dst: LoraAdapter, src: Union[LoraAdapter, GradBundle], coeff: float) -> LoraAdapter:
    """Return ``dst + coeff * src`` factor by factor; ``dst`` is left untouched."""
    if len(dst.layers) != len(src.layers):
        raise ShapeError("adapter and update have different layer counts")
    for (A, B), (sA, sB) in zip(dst.layers, src.layers):
        if A.shape != np.shape(sA) or B.shape != np.shape(sB):
            raise ShapeError(f"factor shapes differ: {A.shape}/{B.shape} vs {np.shape(sA)}/{np.shape(sB)}")
    if coeff == 0:
        return dst.copy()
    return LoraAdapter(
        [(A + coeff * sA, B + coeff * sB) for (A, B), (sA, sB) in zip(dst.layers, src.layers)],
        dst.rank,
        dst.scale,
    )


@dataclass(frozen=True)
class ModelParts:
    """Everything frozen about a hypothesis: backbone, head, adapter shape."""

    enc: FrozenEncoder
    head: FixedHead
    rank: int
    scale: float = 1.0

    def new_adapter(self, rng: np.random.Generator) -> LoraAdapter:
        return init_adapter(self.enc, self.rank, rng, self.scale)


def build_model(
    input_dim: int,
    hidden: int,
    layers: int,
    rng: np.random.Generator,
    activation: str = "tanh",
    rank: int = 8,
    scale: float = 1.0,
    head_scale: float = 1.0,
) -> ModelParts:
    enc = init_encoder([input_dim] + [hidden] * layers, rng, activation)
    head = init_head(hidden, rng, head_scale)
    return ModelParts(enc, head, rank, scale)
