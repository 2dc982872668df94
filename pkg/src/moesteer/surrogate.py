"""LSTM behavior classifier over routing-logit sequences.

Per token and layer the raw logits are standardized across experts (no
learnable affine), projected to ``D`` dims by one projection shared by all
layers, concatenated over layers, and fed to a single-layer LSTM. A linear
head reads the hidden state at each sequence's own last token.

Two code paths exist on purpose: plain-numpy single-trace functions
(``normalize_layer`` ... ``forward_trace``) and a batched, packed tape path
used for training and gradients. Tests check one against the other.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .errors import ContractError, DimensionError, FormatError, TrainingError
from .traces import RoutingTrace, SplitSpec, TraceDataset, split

log = logging.getLogger(__name__)

LN_EPS = 1e-5
SURROGATE_MAGIC = b"MASCSUR1"
PARAM_NAMES = ("proj_w", "proj_b", "lstm_w_ih", "lstm_w_hh", "lstm_b", "head_w", "head_b")


@dataclass(frozen=True)
class SurrogateConfig:
    embed_dim: int = 16
    hidden_dim: int = 64
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 64
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.epochs, self.batch_size) < 1:
            raise ContractError("embed_dim, hidden_dim, epochs and batch_size must be >= 1")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


@dataclass
class SurrogateParams:
    """Projection ``proj_w (D, E)``, ``proj_b (D,)``; LSTM gates stacked in
    input/forget/cell/output order as ``lstm_w_ih (4H, L*D)``,
    ``lstm_w_hh (4H, H)``, ``lstm_b (4H,)``; head ``head_w (1, H)``, ``head_b (1,)``."""

    L: int
    E: int
    D: int
    H: int
    arrays: dict[str, np.ndarray]
    seed: int = 0
    history: History | None = None

    def __post_init__(self):
        expected = self.shapes(self.L, self.E, self.D, self.H)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise ContractError(f"missing surrogate parameter {name!r}")
            if tuple(self.arrays[name].shape) != shape:
                raise DimensionError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    @staticmethod
    def shapes(L: int, E: int, D: int, H: int) -> dict[str, tuple[int, ...]]:
        return {
            "proj_w": (D, E),
            "proj_b": (D,),
            "lstm_w_ih": (4 * H, L * D),
            "lstm_w_hh": (4 * H, H),
            "lstm_b": (4 * H,),
            "head_w": (1, H),
            "head_b": (1,),
        }

    @classmethod
    def init(cls, L: int, E: int, config: SurrogateConfig = SurrogateConfig()) -> "SurrogateParams":
        rng = np.random.default_rng(config.seed)
        D, H = config.embed_dim, config.hidden_dim
        arrays = {}
        for name, shape in cls.shapes(L, E, D, H).items():
            fan_in = {"proj": E, "lstm": H, "head": H}[name.split("_")[0]]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, shape)
        return cls(L, E, D, H, arrays, seed=config.seed)

    def copy(self) -> "SurrogateParams":
        return SurrogateParams(self.L, self.E, self.D, self.H,
                               {k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def save(self, path) -> None:
        header = {"kind": "surrogate", "D": self.D, "H": self.H, "L": self.L, "E": self.E,
                  "seed": self.seed}
        write_container(path, SURROGATE_MAGIC, header, [(n, self.arrays[n]) for n in PARAM_NAMES])

    @classmethod
    def load(cls, path) -> "SurrogateParams":
        header, blocks = read_container(path, SURROGATE_MAGIC)
        try:
            return cls(int(header["L"]), int(header["E"]), int(header["D"]), int(header["H"]),
                       blocks, int(header.get("seed", 0)))
        except (KeyError, ContractError, DimensionError) as exc:
            raise FormatError(f"surrogate header/blocks inconsistent: {exc}") from None


# -- single-trace reference path (numpy) ------------------------------------------


def normalize_layer(x: np.ndarray) -> np.ndarray:
    """Standardize over the last (expert) axis with population std; eps inside the root."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def project(params: SurrogateParams, x_norm: np.ndarray) -> np.ndarray:
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if x_norm.shape[-1] != params.E:
        raise DimensionError(f"expected {params.E} experts, got {x_norm.shape[-1]}")
    return x_norm @ params.arrays["proj_w"].T + params.arrays["proj_b"]


def flatten_token(per_layer: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64) for v in per_layer])


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(params: SurrogateParams, z: np.ndarray, h: np.ndarray, c: np.ndarray):
    a = params.arrays
    gates = a["lstm_w_ih"] @ z + a["lstm_w_hh"] @ h + a["lstm_b"]
    i, f, g, o = np.split(gates, 4)
    c_new = _sig(f) * c + _sig(i) * np.tanh(g)
    h_new = _sig(o) * np.tanh(c_new)
    return h_new, c_new


def classify(params: SurrogateParams, h_last: np.ndarray) -> float:
    return float(params.arrays["head_w"][0] @ h_last + params.arrays["head_b"][0])


def forward_trace(params: SurrogateParams, trace: RoutingTrace | np.ndarray) -> float:
    """Behavior logit for one trace, token by token."""
    x = trace.logits if isinstance(trace, RoutingTrace) else np.asarray(trace, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (params.L, params.E):
        raise DimensionError(f"trace shape {x.shape} does not match (T, {params.L}, {params.E})")
    h = np.zeros(params.H)
    c = np.zeros(params.H)
    for t in range(x.shape[0]):
        z = flatten_token([project(params, normalize_layer(x[t, l])) for l in range(params.L)])
        h, c = lstm_step(params, z, h, c)
    return classify(params, h)


def bce_with_logits(logits, targets) -> float:
    """Mean stable binary cross-entropy over a batch of logits."""
    x = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64), x.shape)
    return float(np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))


# -- batched tape path ------------------------------------------------------------


def pad_batch(logits: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort by length (descending, stable) and zero-pad.

    Returns ``(X, lengths, order)`` where ``X[i]`` is ``logits[order[i]]``.
    """
    lengths = np.array([len(x) for x in logits], dtype=np.int64)
    order = np.argsort(-lengths, kind="stable")
    L, E = logits[0].shape[1:]
    X = np.zeros((len(logits), int(lengths.max()), L, E))
    for row, i in enumerate(order):
        X[row, : lengths[i]] = logits[i]
    return X, lengths[order], order


def tape_layer_norm(x: nx.Var) -> nx.Var:
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = d.square().mean(axis=-1, keepdims=True)
    return d / (var + LN_EPS).sqrt()


def tape_forward(P: dict[str, nx.Var], X: nx.Var, lengths: np.ndarray) -> nx.Var:
    """Logits ``(B,)`` for a length-sorted padded batch ``X (B, T, L, E)``.

    Packed execution: at step ``t`` only the prefix of sequences longer than
    ``t`` is advanced, so each row ends holding its own final hidden state and
    padded steps never touch the loss.
    """
    B, T, L, _ = X.shape
    if np.any(np.diff(lengths) > 0):
        raise ContractError("batch must be sorted by descending length")
    H = P["lstm_w_hh"].shape[1]
    v = tape_layer_norm(X) @ P["proj_w"].swapaxes(0, 1) + P["proj_b"]
    z = v.reshape(B, T, -1)
    zin = (z @ P["lstm_w_ih"].swapaxes(0, 1) + P["lstm_b"]).swapaxes(0, 1)  # T, B, 4H
    w_hh_t = P["lstm_w_hh"].swapaxes(0, 1)
    tape = X.tape
    h = tape.const(np.zeros((B, H)))
    c = tape.const(np.zeros((B, H)))
    for t in range(T):
        n = int(np.sum(lengths > t))
        hp, cp = (h, c) if n == B else (h[:n], c[:n])
        gates = zin[t, :n] + hp @ w_hh_t
        i = gates[:, :H].sigmoid()
        f = gates[:, H : 2 * H].sigmoid()
        g = gates[:, 2 * H : 3 * H].tanh()
        o = gates[:, 3 * H :].sigmoid()
        c_new = f * cp + i * g
        h_new = o * c_new.tanh()
        if n == B:
            h, c = h_new, c_new
        else:
            h = nx.concat([h_new, h[n:]], axis=0)
            c = nx.concat([c_new, c[n:]], axis=0)
    return (h @ P["head_w"].swapaxes(0, 1) + P["head_b"]).reshape(B)


def _param_vars(tape: nx.Tape, params: SurrogateParams, trainable: bool) -> dict[str, nx.Var]:
    make = tape.param if trainable else (lambda a, n: tape.const(a))
    return {n: make(params.arrays[n], n) for n in PARAM_NAMES}


def predict_logits(params: SurrogateParams, traces: Sequence[RoutingTrace] | TraceDataset,
                   batch_size: int = 512) -> np.ndarray:
    traces = list(traces)
    out = np.empty(len(traces))
    for start in range(0, len(traces), batch_size):
        chunk = traces[start : start + batch_size]
        X, lengths, order = pad_batch([t.logits for t in chunk])
        tape = nx.Tape()
        y = tape_forward(_param_vars(tape, params, False), tape.const(X), lengths)
        out[start + order] = y.value
    return out


def accuracy(params: SurrogateParams, dataset: TraceDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    pred = (predict_logits(params, dataset) > 0).astype(np.int64)
    return float(np.mean(pred == dataset.labels))


def batch_loss_and_grads(params: SurrogateParams, traces: Sequence[RoutingTrace],
                         labels: Sequence[int] | None = None):
    """Mean BCE over ``traces`` and its gradient w.r.t. every surrogate parameter."""
    X, lengths, order = pad_batch([t.logits for t in traces])
    y = np.asarray([t.label for t in traces] if labels is None else labels, dtype=np.float64)[order]
    tape = nx.Tape()
    P = _param_vars(tape, params, True)
    loss = nx.bce_with_logits(tape_forward(P, tape.const(X), lengths), y).mean()
    return float(loss.value), nx.backward(tape, loss)


def train_surrogate(
    dataset: TraceDataset,
    config: SurrogateConfig = SurrogateConfig(),
    val: TraceDataset | None = None,
) -> SurrogateParams:
    """Adam on mean BCE for a fixed number of epochs.

    Without an explicit ``val`` set the data is split stratified using
    ``config.train_fraction``. Loss and validation accuracy per epoch are kept
    in ``params.history``.
    """
    dataset.require_both_classes()
    if val is None:
        train_ds, val = split(dataset, SplitSpec(config.train_fraction, config.seed))
    else:
        train_ds = dataset
    params = SurrogateParams.init(dataset.L, dataset.E, config)
    state = nx.AdamState()
    rng = np.random.default_rng(config.seed + 1)
    history = History()
    traces = list(train_ds)
    for epoch in range(config.epochs):
        perm = rng.permutation(len(traces))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = [traces[i] for i in perm[start : start + config.batch_size]]
            loss, grads = batch_loss_and_grads(params, batch)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite surrogate loss in epoch {epoch}", epoch=epoch)
            try:
                nx.adam_step(params.arrays, dict(grads), state, lr=config.lr)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch=epoch) from exc
            total += loss * len(batch)
        history.train_loss.append(total / len(traces))
        history.val_accuracy.append(accuracy(params, val) if len(val) else float("nan"))
        log.info("epoch %d loss %.5f val_acc %.4f", epoch + 1, history.train_loss[-1],
                 history.val_accuracy[-1])
    params.history = history
    return params


def input_gradient(params: SurrogateParams, trace: RoutingTrace, y_target: int | None = None) -> np.ndarray:
    """d BCE(logit, y_target) / d raw logits, shape ``T x L x E``."""
    y = trace.label if y_target is None else y_target
    tape = nx.Tape()
    X = tape.param(trace.logits[None], "x")
    loss = nx.bce_with_logits(
        tape_forward(_param_vars(tape, params, False), X, np.array([trace.T])), float(y)
    ).mean()
    return nx.backward(tape, loss)["x"][0]


def config_dict(config: SurrogateConfig) -> dict:
    return asdict(config)
