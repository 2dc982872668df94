"""Steering-matrix optimization, magnitude pruning and gate payloads.

The dense matrix ``S`` (layers x experts) is optimized through a frozen
surrogate after per-layer scaling by the unsteered logit std ``sigma``. It is
pruned with a strict magnitude threshold and injected at inference as
``g + alpha * (sigma_l * S_l)`` ahead of top-k. A discrete baseline that forces
experts into the top-k is provided for comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .container import atomic_write_text
from .errors import ContractError, DimensionError, FormatError, OptimizerError
from .moe import FORCE_CONSTANT, AdditivePayload, ForcedPayload, top_k_select
from .surrogate import (
    SurrogateConfig,
    SurrogateParams,
    _param_vars,
    pad_batch,
    tape_forward,
    train_surrogate,
)
from .traces import RoutingTrace, TraceDataset

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
MASK_VERSION = 1


@dataclass
class LayerStats:
    sigma: np.ndarray
    dataset_id: str = ""
    sample_count: int = 0

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.ndim != 1 or np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise ContractError("sigma must be a 1-d array of positive finite values")


def compute_layer_sigma(dataset: TraceDataset, dataset_id: str = "") -> LayerStats:
    """Population std per layer over every token of every trace and every expert."""
    if len(dataset) == 0:
        raise ContractError("cannot compute layer statistics of an empty dataset")
    stacked = np.concatenate([t.logits for t in dataset], axis=0)  # N_tokens, L, E
    sigma = np.maximum(stacked.transpose(1, 0, 2).reshape(dataset.L, -1).std(axis=1), SIGMA_FLOOR)
    return LayerStats(sigma, dataset_id, len(dataset))


@dataclass
class SteeringMatrix:
    S: np.ndarray
    init: str = "kaiming_uniform"
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None

    @property
    def l1(self) -> float:
        return float(np.abs(self.S).sum())


def init_steering_matrix(L: int, E: int, seed: int = 0) -> SteeringMatrix:
    """Kaiming-uniform with fan-in ``E``: entries on ``[-sqrt(6/E), sqrt(6/E)]``."""
    if L < 1 or E < 1:
        raise ContractError("L and E must be >= 1")
    bound = np.sqrt(6.0 / E)
    S = np.random.default_rng(seed).uniform(-bound, bound, size=(L, E))
    return SteeringMatrix(S)


def scale_and_add(g: np.ndarray, S: np.ndarray, stats: LayerStats) -> np.ndarray:
    """``g_l + sigma_l * S_l`` for logits shaped ``(..., L, E)``."""
    g = np.asarray(g, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if g.shape[-2:] != S.shape or stats.sigma.shape != (S.shape[0],):
        raise DimensionError(f"logits {g.shape}, S {S.shape}, sigma {stats.sigma.shape} disagree")
    return g + stats.sigma[:, None] * S


def steering_loss(
    surrogate: SurrogateParams,
    traces: list[RoutingTrace],
    S: np.ndarray,
    stats: LayerStats,
    y_target: int,
    lam: float,
) -> tuple[float, np.ndarray]:
    """Mean BCE toward ``y_target`` plus ``lam * ||S||_1``, and its gradient in ``S``."""
    X, lengths, _ = pad_batch([t.logits for t in traces])
    tape = nx.Tape()
    S_var = tape.param(S, "S")
    scaled = tape.const(X) + S_var * stats.sigma[:, None]
    logits = tape_forward(_param_vars(tape, surrogate, False), scaled, lengths)
    loss = nx.bce_with_logits(logits, float(y_target)).mean() + lam * S_var.abs().sum()
    return float(loss.value), nx.backward(tape, loss)["S"]


def optimize_mask(
    surrogate: SurrogateParams,
    flip_set: TraceDataset,
    y_target: int,
    lam: float = 1e-4,
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    stats: LayerStats | None = None,
) -> SteeringMatrix:
    """Adam on ``S`` only; the surrogate stays frozen. Full batch over ``flip_set``."""
    if (flip_set.L, flip_set.E) != (surrogate.L, surrogate.E):
        raise DimensionError("flip set and surrogate disagree on (L, E)")
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if y_target not in (0, 1):
        raise ContractError("y_target must be 0 or 1")
    if len(flip_set) == 0:
        raise ContractError("empty flip set")
    stats = stats or compute_layer_sigma(flip_set)
    result = init_steering_matrix(surrogate.L, surrogate.E, seed)
    params = {"S": result.S}
    state = nx.AdamState()
    traces = list(flip_set)
    for step in range(steps):
        loss, grad = steering_loss(surrogate, traces, params["S"], stats, y_target, lam)
        if not np.isfinite(loss):
            raise OptimizerError(f"non-finite steering loss at step {step}", step=step)
        try:
            nx.adam_step(params, {"S": grad}, state, lr=lr)
        except OptimizerError as exc:
            exc.step = step
            raise
        result.losses.append(loss)
    result.S = params["S"]
    log.info("mask optimized: %d steps, final loss %s, |S|_1 %.4f", steps, result.final_loss, result.l1)
    return result


@dataclass
class SteeringMask:
    dense: np.ndarray
    tau: float
    lam: float | None = None
    stats: LayerStats | None = None
    alpha_recommended: float | None = None

    @property
    def entries(self) -> dict[tuple[int, int], float]:
        ls, es = np.nonzero(self.dense)
        return {(int(l), int(e)): float(self.dense[l, e]) for l, e in zip(ls, es)}

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.dense))

    @property
    def support(self) -> set[tuple[int, int]]:
        return set(self.entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dense.shape

    def save(self, path) -> None:
        if self.stats is None:
            raise ContractError("mask has no bound layer statistics")
        L, E = self.shape
        doc = {
            "version": MASK_VERSION,
            "L": L,
            "E": E,
            "lambda": self.lam,
            "tau": self.tau,
            "alpha_recommended": self.alpha_recommended,
            "sigma": [float(s) for s in self.stats.sigma],
            "entries": [[l, e, v] for (l, e), v in sorted(self.entries.items())],
        }
        # json floats use repr, which round-trips exactly (17 significant digits max)
        atomic_write_text(path, json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SteeringMask":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"mask file is not valid JSON: {exc}", offset=exc.pos) from None
        except UnicodeDecodeError as exc:
            raise FormatError("mask file is not UTF-8 text", offset=exc.start) from None
        if not isinstance(doc, dict) or doc.get("version") != MASK_VERSION:
            raise FormatError(f"unsupported mask version {doc.get('version') if isinstance(doc, dict) else None!r}")
        try:
            L, E = int(doc["L"]), int(doc["E"])
            dense = np.zeros((L, E))
            for l, e, v in doc["entries"]:
                dense[int(l), int(e)] = float(v)
            stats = LayerStats(np.array(doc["sigma"], dtype=np.float64))
        except (KeyError, ValueError, TypeError, IndexError, ContractError) as exc:
            raise FormatError(f"malformed mask file: {exc}") from None
        if stats.sigma.shape != (L,):
            raise FormatError(f"sigma has {stats.sigma.shape[0]} entries, expected {L}")
        return cls(dense, float(doc["tau"]), doc.get("lambda"), stats, doc.get("alpha_recommended"))


def prune_mask(
    S: SteeringMatrix | np.ndarray, tau: float, lam: float | None = None,
    stats: LayerStats | None = None,
) -> SteeringMask:
    """Keep entries with ``|S| > tau`` (strict); everything else becomes 0."""
    if tau < 0:
        raise ContractError("tau must be >= 0")
    dense = np.asarray(S.S if isinstance(S, SteeringMatrix) else S, dtype=np.float64)
    return SteeringMask(np.where(np.abs(dense) > tau, dense, 0.0), float(tau), lam, stats)


def build_injection_payload(mask: SteeringMask, alpha: float) -> AdditivePayload:
    if mask.stats is None:
        raise ContractError("mask has no bound layer statistics (sigma)")
    if mask.stats.sigma.shape != (mask.shape[0],):
        raise DimensionError("sigma length does not match mask layers")
    return AdditivePayload(mask.dense, mask.stats.sigma, alpha)


# -- discrete expert-steering baseline -----------------------------------------------


@dataclass
class ExpertMask:
    forced: np.ndarray
    constant: float = FORCE_CONSTANT
    relaxed: np.ndarray | None = None

    def __post_init__(self):
        self.forced = np.asarray(self.forced, dtype=bool)

    @property
    def count(self) -> int:
        return int(self.forced.sum())

    def payload(self) -> ForcedPayload:
        return ForcedPayload(self.forced, self.constant)


@dataclass(frozen=True)
class ExpertSteeringConfig:
    top_k: int
    y_target: int = 1
    lam: float = 1e-4
    steps: int = 500
    lr: float = 0.01
    seed: int = 0
    max_forced_per_layer: int | None = None  # default top_k - 1
    budget: int | None = None
    surrogate: SurrogateConfig = SurrogateConfig()


def occupancy(logits: np.ndarray, k: int) -> np.ndarray:
    """Binary top-k occupancy ``T x L x E`` of raw logits."""
    idx, _ = top_k_select(logits, k)
    occ = np.zeros_like(logits, dtype=np.float64)
    np.put_along_axis(occ, idx, 1.0, axis=-1)
    return occ


def occupancy_dataset(dataset: TraceDataset, k: int) -> TraceDataset:
    traces = [RoutingTrace(occupancy(t.logits, k), t.label, t.source) for t in dataset]
    return TraceDataset(traces, dataset.L, dataset.E, meta={"inputs": f"top-{k} occupancy"})


def _select_forced(relaxed: np.ndarray, cap: int, budget: int | None) -> np.ndarray:
    forced = np.zeros(relaxed.shape, dtype=bool)
    for l in range(relaxed.shape[0]):
        order = np.argsort(-relaxed[l], kind="stable")
        keep = [e for e in order[:cap] if relaxed[l, e] > 0.5]
        forced[l, keep] = True
    if budget is not None and forced.sum() > budget:
        flat = np.where(forced, relaxed, -np.inf).ravel()
        top = np.argsort(-flat, kind="stable")[:budget]
        forced = np.zeros_like(forced)
        forced.ravel()[top] = True
    return forced


def expert_steering_pipeline(dataset: TraceDataset, config: ExpertSteeringConfig) -> ExpertMask:
    """Surrogate on discrete occupancy, sigmoid-relaxed forcing mask, threshold 0.5.

    A relaxed mask ``m = sigmoid(theta)`` turns an unselected expert on as
    ``occ + m * (1 - occ)``; the loss is BCE toward ``y_target`` plus
    ``lam * sum(m)`` over the traces currently showing the other behavior.
    """
    k = config.top_k
    occ = occupancy_dataset(dataset, k)
    surrogate = train_surrogate(occ, config.surrogate)
    flip = occ.with_label(1 - config.y_target)
    if len(flip) == 0:
        raise ContractError("no traces to flip")
    X, lengths, _ = pad_batch([t.logits for t in flip])
    theta = {"theta": init_steering_matrix(occ.L, occ.E, config.seed).S - 2.0}
    state = nx.AdamState()
    for step in range(config.steps):
        tape = nx.Tape()
        th = tape.param(theta["theta"], "theta")
        m = th.sigmoid()
        Xc = tape.const(X)
        steered = Xc + m * (1.0 - Xc)
        logits = tape_forward(_param_vars(tape, surrogate, False), steered, lengths)
        loss = nx.bce_with_logits(logits, float(config.y_target)).mean() + config.lam * m.sum()
        if not np.isfinite(loss.value):
            raise OptimizerError(f"non-finite expert-mask loss at step {step}", step=step)
        nx.adam_step(theta, {"theta": nx.backward(tape, loss)["theta"]}, state, lr=config.lr)
    relaxed = 1.0 / (1.0 + np.exp(-theta["theta"]))
    cap = k - 1 if config.max_forced_per_layer is None else config.max_forced_per_layer
    return ExpertMask(_select_forced(relaxed, cap, config.budget), relaxed=relaxed)


def mask_to_dict(mask: SteeringMask) -> dict:
    return {"tau": mask.tau, "lambda": mask.lam, "nnz": mask.nnz,
            "stats": asdict(mask.stats) if mask.stats else None}
