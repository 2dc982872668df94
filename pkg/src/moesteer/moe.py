"""Desk-scale mixture-of-experts language model with hookable gates.

Each token is embedded, passed through one causal mixing step, then through
``num_layers`` residual MoE blocks. Every block's gate emits raw affine logits
``hidden @ gate_w + gate_b``; a :class:`GateHook` can record those logits and
modify them before top-k selection.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .errors import (
    ContractError,
    FixtureSpecError,
    FormatError,
    InjectionError,
    InputError,
    PropagationError,
    TrainingError,
)

SOFTMAX_TOPK = "softmax_topk_renorm"
TOPK_SOFTMAX = "topk_softmax"
SOFTMAX_MODES = (SOFTMAX_TOPK, TOPK_SOFTMAX)

FORCE_CONSTANT = 1e9
MODEL_MAGIC = b"MASCMOE1"


@dataclass(frozen=True)
class MoEConfig:
    num_layers: int = 4
    experts_per_layer: int = 8
    top_k: int = 2
    hidden_dim: int = 48
    vocab_size: int = 21
    expert_dim: int = 16
    num_shared_experts: int = 0
    softmax_mode: str = SOFTMAX_TOPK
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ContractError("num_layers must be >= 1")
        if not 1 <= self.top_k <= self.experts_per_layer:
            raise ContractError(
                f"top_k={self.top_k} must lie in [1, experts_per_layer={self.experts_per_layer}]"
            )
        if self.num_shared_experts < 0:
            raise ContractError("num_shared_experts must be >= 0")
        if self.softmax_mode not in SOFTMAX_MODES:
            raise ContractError(f"softmax_mode must be one of {SOFTMAX_MODES}")
        if min(self.hidden_dim, self.vocab_size, self.expert_dim) < 1:
            raise ContractError("hidden_dim, vocab_size and expert_dim must be >= 1")


def top_k_select(
    logits: np.ndarray, k: int, mode: str = SOFTMAX_TOPK
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` largest logits (ties -> lowest index) and their weights.

    Works on a single ``(E,)`` vector or row-wise on ``(T, E)``. Indices come
    back ordered by descending logit; weights are aligned and sum to one.
    """
    logits = np.asarray(logits, dtype=np.float64)
    E = logits.shape[-1]
    if not 1 <= k <= E:
        raise ContractError(f"k={k} must lie in [1, {E}]")
    # stable sort keeps lower indices first among equal logits
    idx = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(logits, idx, axis=-1)
    if mode == SOFTMAX_TOPK:
        p = np.exp(logits - logits.max(axis=-1, keepdims=True))
        p = p / p.sum(axis=-1, keepdims=True)
        w = np.take_along_axis(p, idx, axis=-1)
        w = w / w.sum(axis=-1, keepdims=True)
    elif mode == TOPK_SOFTMAX:
        e = np.exp(chosen - chosen.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
    else:
        raise ContractError(f"unknown softmax mode {mode!r}")
    return idx, w


# -- hooks -------------------------------------------------------------------


class AdditivePayload:
    """Adds ``alpha * (sigma_l * mask_l)`` to layer ``l`` logits before top-k."""

    def __init__(self, mask: np.ndarray, sigma: np.ndarray, alpha: float):
        mask = np.asarray(mask, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if mask.ndim != 2 or sigma.shape != (mask.shape[0],):
            raise InjectionError(f"mask {mask.shape} and sigma {sigma.shape} do not align")
        self.mask = mask
        self.sigma = sigma
        self.alpha = float(alpha)
        self.delta = self.alpha * (self.sigma[:, None] * self.mask)
        self.active = self.alpha != 0.0 and bool(np.any(self.mask != 0.0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def apply(self, layer: int, logits: np.ndarray) -> np.ndarray:
        if not self.active:
            return logits
        return logits + self.delta[layer]


class ForcedPayload:
    """Overwrites the logits of forced experts with a huge finite constant."""

    def __init__(self, forced: np.ndarray, constant: float = FORCE_CONSTANT):
        self.forced = np.asarray(forced, dtype=bool)
        if self.forced.ndim != 2:
            raise InjectionError("forced-expert mask must be L x E")
        self.constant = float(constant)
        self.active = bool(self.forced.any())

    @property
    def shape(self) -> tuple[int, int]:
        return self.forced.shape

    def apply(self, layer: int, logits: np.ndarray) -> np.ndarray:
        if not self.active:
            return logits
        return np.where(self.forced[layer], self.constant, logits)


@dataclass
class Capture:
    """Per-forward gate record; arrays are ``T x L x E`` (selections ``T x L x k``)."""

    pre: np.ndarray
    post: np.ndarray | None
    selected: np.ndarray
    weights: np.ndarray


class GateHook:
    """Capture and/or inject at every gate.

    ``mode`` is ``"capture"``, ``"inject"`` or ``"both"``. The model writes a
    fresh :class:`Capture` per forward to ``last_capture``; use one hook per
    concurrent forward.
    """

    def __init__(self, mode: str = "capture", payload=None):
        if mode not in ("capture", "inject", "both"):
            raise ContractError(f"unknown hook mode {mode!r}")
        if mode in ("inject", "both") and payload is None:
            raise InjectionError("inject mode needs a payload")
        self.mode = mode
        self.payload = payload
        self.last_capture: Capture | None = None

    @property
    def captures(self) -> bool:
        return self.mode in ("capture", "both")

    @property
    def injects(self) -> bool:
        return self.mode in ("inject", "both")


# -- model ---------------------------------------------------------------------


def _layer_names(l: int) -> list[str]:
    return [f"gate_w.{l}", f"gate_b.{l}", f"w1.{l}", f"b1.{l}", f"w2.{l}", f"b2.{l}"]


def _shared_names(l: int) -> list[str]:
    return [f"shared_w1.{l}", f"shared_b1.{l}", f"shared_w2.{l}", f"shared_b2.{l}"]


def param_shapes(config: MoEConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    H, E, F, V = config.hidden_dim, config.experts_per_layer, config.expert_dim, config.vocab_size
    S = config.num_shared_experts
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, H), "mix": (H, H)}
    for l in range(config.num_layers):
        shapes.update(
            zip(_layer_names(l), [(H, E), (E,), (E, H, F), (E, F), (E, F, H), (E, H)])
        )
        if S:
            shapes.update(zip(_shared_names(l), [(S, H, F), (S, F), (S, F, H), (S, H)]))
    shapes["head_w"] = (H, V)
    shapes["head_b"] = (V,)
    return shapes


@dataclass
class ForwardResult:
    logits: np.ndarray
    capture: Capture | None = None

    @property
    def tokens(self) -> np.ndarray:
        """Greedy per-position output tokens."""
        return np.argmax(self.logits, axis=-1)


class ToyMoEModel:
    """Immutable during inference; parameters live in ``self.params``."""

    def __init__(self, config: MoEConfig, params: dict[str, np.ndarray], meta: dict | None = None):
        shapes = param_shapes(config)
        missing = set(shapes) - set(params)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ContractError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n in shapes}
        self.meta = dict(meta or {})

    # single-gate primitives ---------------------------------------------------
    def gate_logits(self, hidden: np.ndarray, layer: int) -> np.ndarray:
        if not 0 <= layer < self.config.num_layers:
            raise ContractError(f"layer {layer} out of range")
        hidden = np.asarray(hidden, dtype=np.float64)
        if not np.all(np.isfinite(hidden)):
            raise PropagationError(f"non-finite hidden state entering gate {layer}")
        return hidden @ self.params[f"gate_w.{layer}"] + self.params[f"gate_b.{layer}"]

    def _experts(self, hidden: np.ndarray, layer: int, prefix: str = "") -> np.ndarray:
        """All experts on all tokens: ``(E, T, H)``."""
        p = self.params
        w1, b1 = p[f"{prefix}w1.{layer}"], p[f"{prefix}b1.{layer}"]
        w2, b2 = p[f"{prefix}w2.{layer}"], p[f"{prefix}b2.{layer}"]
        a = np.maximum(np.einsum("th,ehf->etf", hidden, w1) + b1[:, None, :], 0.0)
        return np.einsum("etf,efh->eth", a, w2) + b2[:, None, :]

    def moe_layer_forward(
        self, hidden: np.ndarray, layer: int, hook: GateHook | None = None
    ) -> tuple[np.ndarray, dict]:
        """Block output (without the residual) and the gate record for this layer."""
        cfg = self.config
        single = np.ndim(hidden) == 1
        h = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
        g = self.gate_logits(h, layer)
        g_post = g
        if hook is not None and hook.injects:
            payload = hook.payload
            if tuple(payload.shape) != (cfg.num_layers, cfg.experts_per_layer):
                raise InjectionError(
                    f"payload shape {tuple(payload.shape)} != "
                    f"({cfg.num_layers}, {cfg.experts_per_layer})"
                )
            g_post = payload.apply(layer, g)
        idx, w = top_k_select(g_post, cfg.top_k, cfg.softmax_mode)
        dense_w = np.zeros_like(g_post)
        np.put_along_axis(dense_w, idx, w, axis=-1)
        out = np.einsum("te,eth->th", dense_w, self._experts(h, layer))
        if cfg.num_shared_experts:
            out = out + self._experts(h, layer, "shared_").sum(axis=0)
        record = {"pre": g, "post": g_post, "selected": idx, "weights": w}
        if single:
            out = out[0]
            record = {k: v[0] for k, v in record.items()}
        return out, record

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InputError("tokens must be a non-empty 1-d sequence")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("tokens must be integers")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id outside vocabulary [0, {self.config.vocab_size})")
        x = self.params["embed"][tokens]
        return x + np.cumsum(x, axis=0) @ self.params["mix"]

    def forward(self, tokens: Sequence[int], hook: GateHook | None = None) -> ForwardResult:
        cfg = self.config
        h = self.embed(tokens)
        records = []
        for l in range(cfg.num_layers):
            out, rec = self.moe_layer_forward(h, l, hook)
            h = h + out
            records.append(rec)
        logits = h @ self.params["head_w"] + self.params["head_b"]
        capture = None
        if hook is not None:
            capture = Capture(
                pre=np.stack([r["pre"] for r in records], axis=1),
                post=np.stack([r["post"] for r in records], axis=1) if hook.injects else None,
                selected=np.stack([r["selected"] for r in records], axis=1),
                weights=np.stack([r["weights"] for r in records], axis=1),
            )
            if hook.captures or hook.injects:
                hook.last_capture = capture
        return ForwardResult(logits, capture)

    # persistence ---------------------------------------------------------------
    def save(self, path) -> None:
        header = {"kind": "moe", "config": asdict(self.config), "seed": self.config.seed,
                  "meta": self.meta}
        write_container(path, MODEL_MAGIC, header, list(self.params.items()))

    @classmethod
    def load(cls, path) -> "ToyMoEModel":
        header, blocks = read_container(path, MODEL_MAGIC)
        try:
            config = MoEConfig(**header["config"])
        except (KeyError, TypeError, ContractError) as exc:
            raise FormatError(f"invalid model config in header: {exc}") from None
        try:
            return cls(config, blocks, header.get("meta"))
        except ContractError as exc:
            raise FormatError(f"parameter blocks do not match config: {exc}") from None


def model_forward(model: ToyMoEModel, tokens, hook: GateHook | None = None) -> ForwardResult:
    return model.forward(tokens, hook)


def init_random_model(config: MoEConfig) -> ToyMoEModel:
    """Seeded random initialization suitable for training."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        base = name.split(".")[0]
        if base in ("gate_b", "b1", "b2", "shared_b1", "shared_b2", "head_b"):
            params[name] = np.zeros(shape)
        elif base == "embed":
            params[name] = rng.normal(0.0, 1.0, shape)
        elif base == "mix":
            params[name] = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), shape)
        else:
            fan_in = shape[-2]
            params[name] = rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan_in)
    return ToyMoEModel(config, params, {"origin": "random"})


# -- planted fixture -------------------------------------------------------------


@dataclass(frozen=True)
class CircuitSpec:
    """Two disjoint expert sets coupled to two output tokens.

    Token layout: ids ``0..n_content-1`` are content tokens, followed by
    ``flag_a, flag_b, query, token_a, token_b``. Prompts look like
    ``[flag, c1, ..., cn, query]`` and the behavior is read at ``query``.
    ``margin`` is the A-vs-B logit gap at the query position (before the
    per-layer gate scale). ``lean`` gives every content token a fixed random
    push toward B (positive) or A (negative); the pushes accumulate along the
    prompt, so prompts near the decision boundary exist. ``utility_coupling``
    lets the A context raise and the B context lower the utility experts.
    Each content token is owned by ``k`` utility experts (``content_gain``
    routes it to them); only owners know its answer.
    """

    set_a: tuple[int, ...] = (0, 1)
    set_b: tuple[int, ...] = (2, 3)
    n_content: int = 16
    margin: float = 1.0
    flag_gain: float = 1.0
    query_gain: float = 3.0
    utility_bias: float = 3.0
    noise: float = 0.3
    utility_coupling: float = 0.5
    content_gain: float = 3.0
    lean: float = 0.0
    behavior_strength: float = 4.0
    layer_scales: tuple[float, ...] = (1.0, 2.0, 0.5, 1.5)

    @property
    def flag_a(self) -> int:
        return self.n_content

    @property
    def flag_b(self) -> int:
        return self.n_content + 1

    @property
    def query(self) -> int:
        return self.n_content + 2

    @property
    def token_a(self) -> int:
        return self.n_content + 3

    @property
    def token_b(self) -> int:
        return self.n_content + 4

    @property
    def vocab_size(self) -> int:
        return self.n_content + 5

    @property
    def min_hidden_dim(self) -> int:
        return self.n_content + 7 + self.vocab_size

    def answer(self, content_token: int) -> int:
        """Utility-task target for a content token."""
        return (content_token * 5 + 3) % self.n_content


def planted_config(circuit: CircuitSpec | None = None, **overrides) -> MoEConfig:
    circuit = circuit or CircuitSpec()
    kwargs = dict(
        num_layers=4,
        experts_per_layer=8,
        top_k=len(circuit.set_a),
        hidden_dim=circuit.min_hidden_dim,
        vocab_size=circuit.vocab_size,
        expert_dim=circuit.n_content,
    )
    kwargs.update(overrides)
    return MoEConfig(**kwargs)


def build_planted_fixture(config: MoEConfig, circuit: CircuitSpec) -> ToyMoEModel:
    """Construct (not train) a model whose routing carries a known circuit.

    Hidden layout: content one-hot | raw flag A, raw flag B, raw lean |
    context A, context B, context lean | query | one output slot per
    vocabulary id | spare. The mixing step accumulates the raw dims into the
    context dims, so each token knows which flag preceded it and the summed
    lean so far. Gates read content (noise), context and query; A/B experts
    write a constant into their behavior token's slot; the remaining
    "utility" experts map the content tokens they own to ``answer(c)``.

    At content positions the utility experts win (``utility_bias`` exceeds
    the flag gain); at the query position ``query_gain`` lifts A and B above
    them and the flag decides between A and B by ``margin``.
    """
    E, L, H, V = config.experts_per_layer, config.num_layers, config.hidden_dim, config.vocab_size
    A, B = tuple(circuit.set_a), tuple(circuit.set_b)
    if set(A) & set(B):
        raise FixtureSpecError(f"expert sets overlap: {sorted(set(A) & set(B))}")
    if not A or not B or len(A) != len(B):
        raise FixtureSpecError("expert sets must be non-empty and equally sized")
    if max(A + B) >= E or min(A + B) < 0:
        raise FixtureSpecError("expert ids out of range")
    utility = [e for e in range(E) if e not in A and e not in B]
    if len(utility) < config.top_k:
        raise FixtureSpecError("need at least top_k utility experts")
    if config.top_k != len(A):
        raise FixtureSpecError("top_k must equal the size of each behavior set")
    if V != circuit.vocab_size:
        raise FixtureSpecError(f"vocab_size must be {circuit.vocab_size}")
    if H < circuit.min_hidden_dim:
        raise FixtureSpecError(f"hidden_dim must be >= {circuit.min_hidden_dim}")
    C = circuit.n_content
    if config.expert_dim < C:
        raise FixtureSpecError(f"expert_dim must be >= n_content={C}")
    if config.num_shared_experts:
        raise FixtureSpecError("planted fixture has no shared experts")
    raw, ctx, qdim, slot0 = C, C + 3, C + 6, C + 7

    rng = np.random.default_rng(config.seed)
    params = {n: np.zeros(s) for n, s in param_shapes(config).items()}
    emb = params["embed"]
    emb[np.arange(C), np.arange(C)] = 1.0
    emb[np.arange(C), raw + 2] = circuit.lean * rng.standard_normal(C)
    emb[circuit.flag_a, raw] = 1.0
    emb[circuit.flag_b, raw + 1] = 1.0
    emb[circuit.query, qdim] = 1.0
    for j in range(3):
        params["mix"][raw + j, ctx + j] = 1.0

    hi = circuit.flag_gain + circuit.margin / 2
    lo = circuit.flag_gain - circuit.margin / 2
    scales = circuit.layer_scales
    k = config.top_k
    owners = [[utility[(c + j) % len(utility)] for j in range(k)] for c in range(C)]
    for l in range(L):
        gw = np.zeros((H, E))
        gb = np.zeros(E)
        gw[:C, :] = circuit.noise * rng.standard_normal((C, E))
        for e in A:
            gw[ctx, e], gw[ctx + 1, e], gw[ctx + 2, e] = hi, lo, -0.5
            gw[qdim, e] = circuit.query_gain
        for e in B:
            gw[ctx, e], gw[ctx + 1, e], gw[ctx + 2, e] = lo, hi, 0.5
            gw[qdim, e] = circuit.query_gain
        for e in utility:
            gb[e] = circuit.utility_bias
            gw[ctx, e], gw[ctx + 1, e] = circuit.utility_coupling, -circuit.utility_coupling
        for c in range(C):
            gw[c, owners[c]] += circuit.content_gain
        s = scales[l % len(scales)]
        params[f"gate_w.{l}"] = s * gw
        params[f"gate_b.{l}"] = s * gb
        for e in A:
            params[f"b2.{l}"][e, slot0 + circuit.token_a] = circuit.behavior_strength
        for e in B:
            params[f"b2.{l}"][e, slot0 + circuit.token_b] = circuit.behavior_strength
        for c in range(C):
            for e in owners[c]:
                params[f"w1.{l}"][e, c, c] = 1.0
                params[f"w2.{l}"][e, c, slot0 + circuit.answer(c)] = 1.0
    params["head_w"][slot0 : slot0 + V, :] = np.eye(V)
    # json-shaped so a saved and reloaded model carries equal metadata
    meta = {"origin": "planted", "circuit": json.loads(json.dumps(asdict(circuit)))}
    return ToyMoEModel(config, params, meta)


def circuit_from_model(model: ToyMoEModel) -> CircuitSpec:
    meta = model.meta.get("circuit")
    if meta is None:
        raise ContractError("model carries no planted circuit metadata")
    meta = dict(meta)
    for key in ("set_a", "set_b", "layer_scales"):
        meta[key] = tuple(meta[key])
    return CircuitSpec(**meta)


def behavior_prompts(
    circuit: CircuitSpec, flag: str, n: int, rng: np.random.Generator,
    min_content: int = 3, max_content: int = 9,
) -> list[np.ndarray]:
    """``[flag, c1..cn, query]`` prompts; ``flag`` is ``"a"`` or ``"b"``."""
    flag_id = {"a": circuit.flag_a, "b": circuit.flag_b}[flag]
    out = []
    for _ in range(n):
        length = int(rng.integers(min_content, max_content + 1))
        content = rng.integers(0, circuit.n_content, size=length)
        out.append(np.concatenate([[flag_id], content, [circuit.query]]).astype(np.int64))
    return out


def utility_prompts(
    circuit: CircuitSpec, n: int, rng: np.random.Generator,
    min_content: int = 3, max_content: int = 9,
) -> list[tuple[np.ndarray, int]]:
    """Flag-free content sequences with the answer to their last token."""
    out = []
    for _ in range(n):
        length = int(rng.integers(min_content, max_content + 1))
        content = rng.integers(0, circuit.n_content, size=length).astype(np.int64)
        out.append((content, circuit.answer(int(content[-1]))))
    return out


def behavior_labeler(circuit: CircuitSpec):
    """Final-position output ``token_a`` -> 0, ``token_b`` -> 1, anything else abstains."""

    def label(result: ForwardResult) -> int | None:
        tok = int(result.tokens[-1])
        if tok == circuit.token_a:
            return 0
        if tok == circuit.token_b:
            return 1
        return None

    return label


# -- optional gradient trainer ------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 16
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def _tape_forward(model_cfg: MoEConfig, tape: nx.Tape, P: dict, tokens: np.ndarray) -> nx.Var:
    """Last-position output logits on ``tape``; routing gradient flows through selected weights."""
    T = len(tokens)
    x = P["embed"][tokens]
    h = x + nx.matmul(tape.const(np.tril(np.ones((T, T)))) @ x, P["mix"])
    E, k = model_cfg.experts_per_layer, model_cfg.top_k
    for l in range(model_cfg.num_layers):
        g = h @ P[f"gate_w.{l}"] + P[f"gate_b.{l}"]
        idx, _ = top_k_select(g.value, k, model_cfg.softmax_mode)
        sel = np.zeros((T, E))
        np.put_along_axis(sel, idx, 1.0, axis=-1)
        if model_cfg.softmax_mode == SOFTMAX_TOPK:
            p = nx.softmax(g, axis=-1) * sel
            w = p / p.sum(axis=-1, keepdims=True)
        else:
            w = nx.softmax(g + np.where(sel > 0, 0.0, -1e30), axis=-1) * sel
        a = (h.reshape(1, T, -1) @ P[f"w1.{l}"] + P[f"b1.{l}"].reshape(E, 1, -1)).relu()
        outs = a @ P[f"w2.{l}"] + P[f"b2.{l}"].reshape(E, 1, -1)
        mixed = (w.swapaxes(0, 1).reshape(E, T, 1) * outs).sum(axis=0)
        if model_cfg.num_shared_experts:
            S = model_cfg.num_shared_experts
            sa = (h.reshape(1, T, -1) @ P[f"shared_w1.{l}"]
                  + P[f"shared_b1.{l}"].reshape(S, 1, -1)).relu()
            mixed = mixed + (sa @ P[f"shared_w2.{l}"]
                             + P[f"shared_b2.{l}"].reshape(S, 1, -1)).sum(axis=0)
        h = h + mixed
    return h[T - 1 : T] @ P["head_w"] + P["head_b"]


def train_toy_moe(
    dataset: Sequence[tuple[Sequence[int], int]],
    config: MoEConfig,
    train: TrainConfig = TrainConfig(),
    model: ToyMoEModel | None = None,
) -> tuple[ToyMoEModel, TrainLog]:
    """Cross-entropy training on the last-position token; seeded and deterministic."""
    if not dataset:
        raise ContractError("empty training set")
    model = model or init_random_model(config)
    params = {n: a.copy() for n, a in model.params.items()}
    state = nx.AdamState()
    rng = np.random.default_rng(train.seed)
    log = TrainLog()
    data = [(np.asarray(t, dtype=np.int64), int(y)) for t, y in dataset]
    for epoch in range(train.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), train.batch_size):
            batch = order[start : start + train.batch_size]
            tape = nx.Tape()
            P = {n: tape.param(a, n) for n, a in params.items()}
            losses = []
            for i in batch:
                tokens, target = data[i]
                logits = _tape_forward(config, tape, P, tokens)
                losses.append(-nx.log_softmax(logits, axis=-1)[0, target])
            loss = nx.concat([v.reshape(1) for v in losses]).mean()
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
            grads = nx.backward(tape, loss)
            try:
                nx.adam_step(params, dict(grads), state, lr=train.lr)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch=epoch) from exc
            total += float(loss.value) * len(batch)
        log.losses.append(total / len(data))
    meta = {"origin": "trained", "train": asdict(train)}
    return ToyMoEModel(config, params, meta), log
