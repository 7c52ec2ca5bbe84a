"""Minimal reverse-mode autodiff plus dense layers, losses, and Adam.

Everything runs in double precision on numpy arrays. The tape records a
small fixed vocabulary of operations (affine algebra, tanh, sigmoid,
softplus, reductions) which is enough to express the MLP and the recurrent
cells unrolled over a window. Gradients are validated against central
finite differences; see grad_check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "tanh",
    "sigmoid_t",
    "softplus_t",
    "mean_all",
    "sum_all",
    "slice_cols",
    "Mlp",
    "mlp_init",
    "sigmoid",
    "bce_loss",
    "bce_from_logits",
    "bce_logits_tensor",
    "TrainConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "train_binary_classifier",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if requires_grad and not parents and not np.all(np.isfinite(self.data)):
            raise ValueError("parameter tensor contains non-finite entries")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar node."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator helpers ------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = backward
        return out

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data @ other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        out._backward = backward
        return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out.data**2))

    out._backward = backward
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function; exact in both saturation tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_t(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_np(x.data), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out.data * (1.0 - out.data))

    out._backward = backward
    return out


def softplus_t(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid_np(x.data))

    out._backward = backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    out._backward = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g) / n))

    out._backward = backward
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice along the last axis, with zero-padded backward."""
    out = Tensor(x.data[..., lo:hi], parents=(x,))

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            x._accumulate(full)

    out._backward = backward
    return out


# -- dense network -------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected stack. weights[i] has shape (fan_in, fan_out)."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]  # per layer: "tanh" or "linear"

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must align")
        for act in self.activations:
            if act not in ("tanh", "linear"):
                raise ValueError(f"unknown activation {act!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.data.size for w in self.weights) + sum(b.data.size for b in self.biases)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} does not match layer dim {self.in_dim}")
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = h @ w + b
            if act == "tanh":
                h = tanh(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Inference path on plain arrays; mirrors forward exactly."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} does not match layer dim {self.in_dim}")
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = h @ w.data + b.data
            if act == "tanh":
                h = np.tanh(h)
        return h


def mlp_init(dims: list[int], rng: np.random.Generator, out_activation: str = "linear") -> Mlp:
    """Uniform fan-in init: U[-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        weights.append(Tensor(rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, size=(dims[i + 1],)), requires_grad=True))
        acts.append("tanh" if i < len(dims) - 2 else out_activation)
    return Mlp(weights=weights, biases=biases, activations=acts)


# -- losses ---------------------------------------------------------------


def sigmoid(d) -> np.ndarray | float:
    """Detection head: squash a decoder output into (0, 1)."""
    arr = _sigmoid_np(np.asarray(d, dtype=np.float64))
    return float(arr) if arr.ndim == 0 else arr


def bce_loss(z_hat, z) -> float:
    """Mean binary cross-entropy from probabilities.

    Rejects probabilities that are exactly 0 or 1: those need the log-space
    path (bce_from_logits) to stay finite.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z_hat.shape != z.shape:
        raise ValueError(f"shape mismatch: z_hat {z_hat.shape} vs z {z.shape}")
    if np.any((z_hat <= 0.0) | (z_hat >= 1.0)):
        raise ValueError("z_hat hit {0, 1}; compute the loss from logits instead")
    return float(np.mean(-(z * np.log(z_hat) + (1.0 - z) * np.log(1.0 - z_hat))))


def bce_from_logits(d, z) -> float:
    """Mean BCE computed in log space from pre-sigmoid outputs; safe at any |d|."""
    d = np.asarray(d, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return float(np.mean(z * np.logaddexp(0.0, -d) + (1.0 - z) * np.logaddexp(0.0, d)))


def bce_logits_tensor(d: Tensor, z: np.ndarray) -> Tensor:
    """Graph version of bce_from_logits; z is a constant array shaped like d."""
    z = np.asarray(z, dtype=np.float64)
    pos = softplus_t(-d)
    neg = softplus_t(d)
    return mean_all(Tensor(z) * pos + Tensor(1.0 - z) * neg)


# -- optimizer ------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    clip_norm: float = 0.0  # 0 disables global-norm gradient clipping
    lr_decay: float = 1.0
    decay_patience: int = 0  # 0 disables plateau decay


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: Iterable[Tensor]) -> AdamState:
    params = list(params)
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> list[Tensor]:
    """One bias-corrected Adam update, applied in place and returned.

    lr overrides cfg.lr when given (plateau decay schedules pass it).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    step_lr = cfg.lr if lr is None else lr
    state.t += 1
    b1t = 1.0 - cfg.beta1**state.t
    b2t = 1.0 - cfg.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[i] / b1t
        v_hat = state.v[i] / b2t
        p.data -= step_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params


# -- shared fitting loop ----------------------------------------------------


def train_binary_classifier(
    logits_fn: Callable[[np.ndarray], "Tensor"],
    params: list["Tensor"],
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: "TrainConfig",
) -> tuple[list[dict], tuple[int, float, list[np.ndarray]]]:
    """Minibatch Adam on BCE-from-logits with validation early stopping.

    logits_fn maps a raw input batch to a (B, 1) Tensor built on the tape.
    Returns the per-epoch curve records and the best-validation snapshot
    (epoch index, val loss, copied parameter arrays). Fully deterministic
    for a fixed cfg.seed.
    """
    import math as _math

    rng = np.random.default_rng(cfg.seed)
    state = adam_init(params)
    n = x_train.shape[0]
    curves: list[dict] = []
    best_loss = _math.inf
    best_epoch = -1
    best_params = [p.data.copy() for p in params]
    stale = 0
    lr_now = cfg.lr
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            for p in params:
                p.grad = None
            logits = logits_fn(x_train[idx])
            loss = bce_logits_tensor(logits, y_train[idx].reshape(-1, 1))
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if cfg.clip_norm > 0.0:
                gnorm = _math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if gnorm > cfg.clip_norm:
                    scale = cfg.clip_norm / gnorm
                    grads = [g * scale for g in grads]
            adam_step(params, grads, state, cfg, lr=lr_now)
            total += float(loss.data) * len(idx)
        train_loss = total / n
        val_logits = logits_fn(x_val).data[:, 0]
        val_loss = bce_from_logits(val_logits, y_val)
        val_acc = float(np.mean((sigmoid(val_logits) > 0.5) == (y_val > 0.5)))
        curves.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc, "lr": lr_now}
        )
        if val_loss < best_loss - 1e-12:
            best_loss = val_loss
            best_epoch = epoch
            best_params = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
            if cfg.decay_patience > 0 and stale % cfg.decay_patience == 0:
                lr_now *= cfg.lr_decay
    return curves, (best_epoch, best_loss, best_params)


# -- gradient verification -------------------------------------------------


def grad_check(loss_fn: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    loss_fn must rebuild the graph from the current parameter values each
    call. The relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator, elementwise over every parameter entry.
    """
    if not (1e-7 < eps < 1e-3):
        raise ValueError(f"eps {eps} outside the trustworthy window (1e-7, 1e-3)")
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn().data)
            flat[j] = orig - eps
            down = float(loss_fn().data)
            flat[j] = orig
            num = (up - down) / (2.0 * eps)
            denom = max(abs(a_flat[j]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[j] - num) / denom)
    return worst


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = "failurenet-checkpoint v1"


def save_checkpoint(path: str | Path, meta: dict, named_params: list[tuple[str, np.ndarray]]) -> Path:
    """Self-describing text checkpoint: header, JSON meta, then parameters.

    Values are written row-major at full double precision (%.17g), one
    matrix row (or whole vector) per line.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for name, arr in named_params:
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"param {name} {dims}\n")
            rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
            for row in rows:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with path.open() as fh:
        magic = fh.readline().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint header {magic!r}")
        meta = json.loads(fh.readline())
        params: dict[str, np.ndarray] = {}
        line = fh.readline()
        while line:
            parts = line.split()
            if not parts:
                line = fh.readline()
                continue
            if parts[0] != "param":
                raise ValueError(f"{path}: expected param record, got {line!r}")
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            n_rows = shape[0] if len(shape) > 1 else 1
            rows = []
            for _ in range(n_rows):
                rows.append([float(v) for v in fh.readline().split()])
            params[name] = np.asarray(rows, dtype=np.float64).reshape(shape)
            line = fh.readline()
    return meta, params
