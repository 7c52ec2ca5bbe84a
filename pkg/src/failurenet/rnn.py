"""Recurrent failure classifiers: LSTM, GRU, and closed-form continuous cells.

Each cell consumes one pose feature vector per step and carries a hidden
state across the window; a small dense decoder maps the final hidden state
to one pre-sigmoid score. Cells are implemented twice on purpose: a graph
path (Tensors) used for training and a plain-array path used for inference
and by the protocol service. The two are checked against each other and
against scalar-loop oracles in the test suite.

Packed weight layouts (columns): LSTM gates [i | f | g | o], GRU gates
[r | u]. One bias per gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import DatasetSplit, featurize_batch
from .nn import Mlp, Tensor, TrainConfig

__all__ = [
    "LstmParams",
    "GruParams",
    "CfcParams",
    "FailureNet",
    "init_lstm",
    "init_gru",
    "init_cfc",
    "lstm_cell",
    "gru_cell",
    "cfc_cell",
    "cfc_heads",
    "init_failurenet",
    "failurenet_forward",
    "failurenet_logits",
    "count_params",
    "train_failurenet",
    "save_model",
    "load_model",
    "DEFAULT_SIZES",
]

# Hidden / decoder widths tuned so the four detector budgets match the
# reference parameter counts (26,049 / 21,633 / 1,936 / 8,129) as closely
# as integer layer sizes allow.
DEFAULT_SIZES = {
    "lstm": {"hidden": 70, "decoder": 74},
    "gru": {"hidden": 77, "decoder": 37},
    "cfc": {"hidden": 17, "backbone": 23, "decoder": 12},
    "mlp": {"hidden": (128, 32)},
}


@dataclass
class LstmParams:
    wx: Tensor  # (in_dim, 4n)
    wh: Tensor  # (n, 4n)
    b: Tensor  # (4n,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("wx", self.wx), ("wh", self.wh), ("b", self.b)]


@dataclass
class GruParams:
    wx_g: Tensor  # (in_dim, 2n)
    wh_g: Tensor  # (n, 2n)
    b_g: Tensor  # (2n,)
    wx_c: Tensor  # (in_dim, n)
    wh_c: Tensor  # (n, n)
    b_c: Tensor  # (n,)

    @property
    def hidden(self) -> int:
        return self.wh_c.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("wx_g", self.wx_g), ("wh_g", self.wh_g), ("b_g", self.b_g),
            ("wx_c", self.wx_c), ("wh_c", self.wh_c), ("b_c", self.b_c),
        ]


@dataclass
class CfcParams:
    """Shared tanh backbone on (h, p), three linear heads f, g1, g2."""

    wb_h: Tensor  # (n, nb)
    wb_p: Tensor  # (in_dim, nb)
    bb: Tensor  # (nb,)
    wf: Tensor  # (nb, n)
    bf: Tensor  # (n,)
    wg1: Tensor
    bg1: Tensor
    wg2: Tensor
    bg2: Tensor

    @property
    def hidden(self) -> int:
        return self.wb_h.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("wb_h", self.wb_h), ("wb_p", self.wb_p), ("bb", self.bb),
            ("wf", self.wf), ("bf", self.bf),
            ("wg1", self.wg1), ("bg1", self.bg1),
            ("wg2", self.wg2), ("bg2", self.bg2),
        ]


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_lstm(in_dim: int, hidden: int, rng: np.random.Generator) -> LstmParams:
    fan = in_dim + hidden
    return LstmParams(
        wx=_uniform(rng, fan, (in_dim, 4 * hidden)),
        wh=_uniform(rng, fan, (hidden, 4 * hidden)),
        b=_uniform(rng, fan, (4 * hidden,)),
    )


def init_gru(in_dim: int, hidden: int, rng: np.random.Generator) -> GruParams:
    fan = in_dim + hidden
    return GruParams(
        wx_g=_uniform(rng, fan, (in_dim, 2 * hidden)),
        wh_g=_uniform(rng, fan, (hidden, 2 * hidden)),
        b_g=_uniform(rng, fan, (2 * hidden,)),
        wx_c=_uniform(rng, fan, (in_dim, hidden)),
        wh_c=_uniform(rng, fan, (hidden, hidden)),
        b_c=_uniform(rng, fan, (hidden,)),
    )


def init_cfc(in_dim: int, hidden: int, backbone: int, rng: np.random.Generator) -> CfcParams:
    fan = in_dim + hidden
    return CfcParams(
        wb_h=_uniform(rng, fan, (hidden, backbone)),
        wb_p=_uniform(rng, fan, (in_dim, backbone)),
        bb=_uniform(rng, fan, (backbone,)),
        wf=_uniform(rng, backbone, (backbone, hidden)),
        bf=_uniform(rng, backbone, (hidden,)),
        wg1=_uniform(rng, backbone, (backbone, hidden)),
        bg1=_uniform(rng, backbone, (hidden,)),
        wg2=_uniform(rng, backbone, (backbone, hidden)),
        bg2=_uniform(rng, backbone, (hidden,)),
    )


# -- plain-array cell steps (batch leading axis) ---------------------------


def lstm_cell(h: np.ndarray, c: np.ndarray, p: np.ndarray, params: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step. h, c: (B, n); p: (B, in_dim). Returns (h', c')."""
    n = params.hidden
    z = p @ params.wx.data + h @ params.wh.data + params.b.data
    i = nn.sigmoid(z[..., :n])
    f = nn.sigmoid(z[..., n : 2 * n])
    g = np.tanh(z[..., 2 * n : 3 * n])
    o = nn.sigmoid(z[..., 3 * n :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def gru_cell(h: np.ndarray, p: np.ndarray, params: GruParams) -> np.ndarray:
    """One GRU step with h' = (1 - u) * h + u * candidate."""
    n = params.hidden
    zg = p @ params.wx_g.data + h @ params.wh_g.data + params.b_g.data
    r = nn.sigmoid(zg[..., :n])
    u = nn.sigmoid(zg[..., n:])
    cand = np.tanh(p @ params.wx_c.data + (r * h) @ params.wh_c.data + params.b_c.data)
    return (1.0 - u) * h + u * cand


def cfc_heads(h: np.ndarray, p: np.ndarray, params: CfcParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backbone plus the three head outputs (f, g1, g2)."""
    back = np.tanh(h @ params.wb_h.data + p @ params.wb_p.data + params.bb.data)
    f = back @ params.wf.data + params.bf.data
    g1 = back @ params.wg1.data + params.bg1.data
    g2 = back @ params.wg2.data + params.bg2.data
    return f, g1, g2


def cfc_cell(h: np.ndarray, p: np.ndarray, t_stamp: float, params: CfcParams) -> np.ndarray:
    """Closed-form continuous step: sigma(-f t) gates g1 against g2.

    t_stamp = 0 blends the heads equally; as f * t_stamp grows the output
    saturates to g2.
    """
    f, g1, g2 = cfc_heads(h, p, params)
    gate = nn.sigmoid(-f * t_stamp)
    return gate * g1 + (1.0 - gate) * g2


# -- graph cell steps -------------------------------------------------------


def _lstm_cell_t(h: Tensor, c: Tensor, p: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    n = params.hidden
    z = p @ params.wx + h @ params.wh + params.b
    i = nn.sigmoid_t(nn.slice_cols(z, 0, n))
    f = nn.sigmoid_t(nn.slice_cols(z, n, 2 * n))
    g = nn.tanh(nn.slice_cols(z, 2 * n, 3 * n))
    o = nn.sigmoid_t(nn.slice_cols(z, 3 * n, 4 * n))
    c_new = f * c + i * g
    h_new = o * nn.tanh(c_new)
    return h_new, c_new


def _gru_cell_t(h: Tensor, p: Tensor, params: GruParams) -> Tensor:
    n = params.hidden
    zg = p @ params.wx_g + h @ params.wh_g + params.b_g
    r = nn.sigmoid_t(nn.slice_cols(zg, 0, n))
    u = nn.sigmoid_t(nn.slice_cols(zg, n, 2 * n))
    cand = nn.tanh(p @ params.wx_c + (r * h) @ params.wh_c + params.b_c)
    return (1.0 - u) * h + u * cand


def _cfc_cell_t(h: Tensor, p: Tensor, t_stamp: float, params: CfcParams) -> Tensor:
    back = nn.tanh(h @ params.wb_h + p @ params.wb_p + params.bb)
    f = back @ params.wf + params.bf
    g1 = back @ params.wg1 + params.bg1
    g2 = back @ params.wg2 + params.bg2
    gate = nn.sigmoid_t(f * (-t_stamp))
    return gate * g1 + (1.0 - gate) * g2


# -- the assembled detector -------------------------------------------------


@dataclass
class FailureNet:
    """Recurrent window classifier: cell + decoder + detection threshold."""

    kind: str  # "lstm" | "gru" | "cfc"
    cell: LstmParams | GruParams | CfcParams
    decoder: Mlp
    window_len: int
    feature_mode: str = "egocentric"
    t_stamp: float = 0.5  # CfC inter-pose interval, seconds
    threshold: float = 0.5
    in_dim: int = 3

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.cell.tensors()] + self.decoder.parameters()

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"cell.{name}", t.data) for name, t in self.cell.tensors()]
        for i, (w, b) in enumerate(zip(self.decoder.weights, self.decoder.biases)):
            out.append((f"decoder.w{i}", w.data))
            out.append((f"decoder.b{i}", b.data))
        return out


def init_failurenet(
    kind: str,
    window_len: int = 10,
    seed: int = 0,
    hidden: int | None = None,
    backbone: int | None = None,
    decoder_hidden: int | None = None,
    feature_mode: str = "egocentric",
    t_stamp: float = 0.5,
    in_dim: int = 3,
) -> FailureNet:
    if kind not in ("lstm", "gru", "cfc"):
        raise ValueError(f"unknown cell kind {kind!r}")
    sizes = DEFAULT_SIZES[kind]
    hidden = hidden if hidden is not None else sizes["hidden"]
    decoder_hidden = decoder_hidden if decoder_hidden is not None else sizes["decoder"]
    rng = np.random.default_rng(seed)
    if kind == "lstm":
        cell = init_lstm(in_dim, hidden, rng)
    elif kind == "gru":
        cell = init_gru(in_dim, hidden, rng)
    else:
        backbone = backbone if backbone is not None else sizes["backbone"]
        cell = init_cfc(in_dim, hidden, backbone, rng)
    decoder_dims = [hidden] + ([decoder_hidden] if decoder_hidden else []) + [1]
    decoder = nn.mlp_init(decoder_dims, rng)
    return FailureNet(
        kind=kind,
        cell=cell,
        decoder=decoder,
        window_len=window_len,
        feature_mode=feature_mode,
        t_stamp=t_stamp,
        in_dim=in_dim,
    )


def _check_input(model: FailureNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[1] != model.window_len or x.shape[2] != model.in_dim:
        raise ValueError(
            f"expected windows shaped (B, {model.window_len}, {model.in_dim}), got {x.shape}"
        )
    return x


def failurenet_logits(model: FailureNet, x: np.ndarray) -> np.ndarray:
    """Decoder outputs before the sigmoid, shape (B,). Array path."""
    x = _check_input(model, x)
    b, L, _ = x.shape
    n = model.hidden
    h = np.zeros((b, n))
    if model.kind == "lstm":
        c = np.zeros((b, n))
        for t in range(L):
            h, c = lstm_cell(h, c, x[:, t, :], model.cell)
    elif model.kind == "gru":
        for t in range(L):
            h = gru_cell(h, x[:, t, :], model.cell)
    elif model.kind == "cfc":
        for t in range(L):
            h = cfc_cell(h, x[:, t, :], model.t_stamp, model.cell)
    else:
        raise ValueError(f"unknown cell kind {model.kind!r}")
    return model.decoder.forward_np(h)[:, 0]


def failurenet_forward(model: FailureNet, x: np.ndarray) -> np.ndarray | float:
    """Detection scores in (0, 1). Accepts one window (L, 3) or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    z = nn.sigmoid(failurenet_logits(model, arr))
    return float(z[0]) if single else z


def _logits_graph(model: FailureNet, x: np.ndarray) -> Tensor:
    """Training path: same unrolling on the tape."""
    x = _check_input(model, x)
    b, L, _ = x.shape
    n = model.hidden
    h = Tensor(np.zeros((b, n)))
    if model.kind == "lstm":
        c = Tensor(np.zeros((b, n)))
        for t in range(L):
            h, c = _lstm_cell_t(h, c, Tensor(x[:, t, :]), model.cell)
    elif model.kind == "gru":
        for t in range(L):
            h = _gru_cell_t(h, Tensor(x[:, t, :]), model.cell)
    else:
        for t in range(L):
            h = _cfc_cell_t(h, Tensor(x[:, t, :]), model.t_stamp, model.cell)
    return model.decoder.forward(h)


def count_params(model: FailureNet) -> int:
    return sum(t.data.size for t in model.parameters())


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: FailureNet
    curves: list[dict]
    best_epoch: int
    best_val_loss: float
    val_accuracy: float


def _batched_logits_fn(model: FailureNet):
    def fn(xb: np.ndarray) -> Tensor:
        return _logits_graph(model, xb)

    return fn


def train_failurenet(model: FailureNet, split: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam on BCE over the split; early stopping on validation loss.

    Returns the best-validation snapshot. Deterministic for a fixed config
    and seed (init, shuffles, and updates all derive from cfg.seed).
    """
    x_train = featurize_batch(split.train, model.feature_mode)
    y_train = np.array([w.label for w in split.train], dtype=np.float64)
    x_val = featurize_batch(split.val, model.feature_mode)
    y_val = np.array([w.label for w in split.val], dtype=np.float64)
    if len(set(y_train.tolist())) < 2:
        raise ValueError("training split contains a single class; cannot fit a classifier")
    curves, best = nn.train_binary_classifier(
        _batched_logits_fn(model), model.parameters(), x_train, y_train, x_val, y_val, cfg
    )
    best_epoch, best_val_loss, best_params = best
    for p, data in zip(model.parameters(), best_params):
        p.data = data
    val_logits = failurenet_logits(model, x_val)
    val_acc = float(np.mean((nn.sigmoid(val_logits) > model.threshold) == (y_val > 0.5)))
    return TrainResult(model=model, curves=curves, best_epoch=best_epoch, best_val_loss=best_val_loss, val_accuracy=val_acc)


# -- persistence --------------------------------------------------------------


def save_model(path: str | Path, model: FailureNet) -> Path:
    meta = {
        "kind": model.kind,
        "window_len": model.window_len,
        "feature_mode": model.feature_mode,
        "t_stamp": model.t_stamp,
        "threshold": model.threshold,
        "in_dim": model.in_dim,
        "hidden": model.hidden,
        "decoder_dims": [w.shape[0] for w in model.decoder.weights] + [1],
        "decoder_acts": list(model.decoder.activations),
    }
    if model.kind == "cfc":
        meta["backbone"] = model.cell.wb_h.shape[1]
    return nn.save_checkpoint(path, meta, model.named_arrays())


def load_model(path: str | Path) -> FailureNet:
    meta, arrays = nn.load_checkpoint(path)
    kind = meta["kind"]
    model = init_failurenet(
        kind,
        window_len=meta["window_len"],
        hidden=meta["hidden"],
        backbone=meta.get("backbone"),
        decoder_hidden=meta["decoder_dims"][1] if len(meta["decoder_dims"]) > 2 else 0,
        feature_mode=meta["feature_mode"],
        t_stamp=meta["t_stamp"],
        in_dim=meta["in_dim"],
    )
    model.threshold = meta["threshold"]
    for name, tensor in model.cell.tensors():
        tensor.data = arrays[f"cell.{name}"]
    for i, (w, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        w.data = arrays[f"decoder.w{i}"]
        b.data = arrays[f"decoder.b{i}"]
    return model
