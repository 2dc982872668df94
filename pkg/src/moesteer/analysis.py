"""Selection-frequency accounting, behavior/utility scoring and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .container import atomic_write_text
from .errors import ContractError, DimensionError, MoeSteerError
from .moe import GateHook, ToyMoEModel
from .steering import (
    LayerStats,
    SteeringMatrix,
    build_injection_payload,
    optimize_mask,
    prune_mask,
)
from .surrogate import SurrogateParams
from .traces import TraceDataset

log = logging.getLogger(__name__)

DEGENERACY_THRESHOLD = 0.6
LAMBDA_GRID = (0.0, 1e-5, 1e-4, 1e-3)
ALPHA_GRID = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
TAU_GRID = (0.0, 0.1, 0.2, 0.5, 0.75)
SWEEP_HEADER = ["lambda", "alpha", "tau", "success", "utility_before", "utility_after", "nnz",
                "degenerate"]


def _hook(payload) -> GateHook:
    return GateHook("both" if payload is not None else "capture", payload)


# -- selection frequency -----------------------------------------------------------


@dataclass
class SelectionFrequency:
    freq: np.ndarray  # L x E
    token_count: int
    steered: bool
    top_k: int

    def layer_sums(self) -> np.ndarray:
        return self.freq.sum(axis=1)


def selection_frequency(model: ToyMoEModel, prompts: Sequence[Sequence[int]], payload=None
                        ) -> SelectionFrequency:
    """Fraction of tokens whose top-k at each layer contains each expert (per-token counting)."""
    if len(prompts) == 0:
        raise ContractError("selection frequency needs at least one prompt")
    cfg = model.config
    counts = np.zeros((cfg.num_layers, cfg.experts_per_layer))
    tokens = 0
    for prompt in prompts:
        cap = model.forward(prompt, _hook(payload)).capture
        T = cap.selected.shape[0]
        for l in range(cfg.num_layers):
            counts[l] += np.bincount(cap.selected[:, l, :].ravel(), minlength=cfg.experts_per_layer)
        tokens += T
    active = payload is not None and getattr(payload, "active", True)
    return SelectionFrequency(counts / tokens, tokens, bool(active), cfg.top_k)


def frequency_delta(before: SelectionFrequency, after: SelectionFrequency) -> np.ndarray:
    """``after - before``; both must come from the same prompts."""
    if before.freq.shape != after.freq.shape:
        raise DimensionError(f"frequency shapes differ: {before.freq.shape} vs {after.freq.shape}")
    if before.token_count != after.token_count:
        raise ContractError("frequencies were measured on different datasets (token counts differ)")
    return after.freq - before.freq


def delta_csv(delta: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "delta"])
    for l in range(delta.shape[0]):
        for e in range(delta.shape[1]):
            w.writerow([l, e, repr(float(delta[l, e]))])
    return buf.getvalue()


def write_delta_csv(delta: np.ndarray, path) -> None:
    atomic_write_text(path, delta_csv(delta))


# -- output quality --------------------------------------------------------------------


def degeneracy_metric(tokens: Sequence[int]) -> float:
    """``1 - distinct bigrams / total bigrams``; 0 for outputs shorter than two tokens."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ContractError("degeneracy of an empty output is undefined")
    bigrams = list(zip(tokens, tokens[1:]))
    if not bigrams:
        return 0.0
    return 1.0 - len(set(bigrams)) / len(bigrams)


@dataclass
class BehaviorScore:
    success: float
    mean_degeneracy: float

    @property
    def degenerate(self) -> bool:
        return self.mean_degeneracy > DEGENERACY_THRESHOLD


def behavior_success(
    model: ToyMoEModel, prompts: Sequence[Sequence[int]], target_token: int, payload=None,
    threshold: float = DEGENERACY_THRESHOLD,
) -> BehaviorScore:
    """Share of prompts whose last output is ``target_token`` and whose output is coherent.

    Incoherent (degenerate) outputs count as failures, whatever their last token.
    """
    if len(prompts) == 0:
        raise ContractError("no prompts to score")
    hits = 0
    degen = []
    for prompt in prompts:
        hook = GateHook("inject", payload) if payload is not None else None
        out = model.forward(prompt, hook).tokens
        d = degeneracy_metric(out)
        degen.append(d)
        hits += int(out[-1] == target_token and d < threshold)
    return BehaviorScore(hits / len(prompts), float(np.mean(degen)))


# -- utility -----------------------------------------------------------------------------


@dataclass
class UtilityReport:
    before: float
    after: float

    @property
    def decline(self) -> float:
        return self.before - self.after


def task_accuracy(model: ToyMoEModel, task: Sequence[tuple[Sequence[int], int]], payload=None) -> float:
    if len(task) == 0:
        raise ContractError("empty utility task")
    hits = 0
    for prompt, answer in task:
        hook = GateHook("inject", payload) if payload is not None else None
        hits += int(model.forward(prompt, hook).tokens[-1] == answer)
    return hits / len(task)


def utility_eval(model: ToyMoEModel, task: Sequence[tuple[Sequence[int], int]], payload=None,
                 before: float | None = None) -> UtilityReport:
    """Held-out task accuracy without and with the payload."""
    base = task_accuracy(model, task) if before is None else before
    after = base if payload is None else task_accuracy(model, task, payload)
    return UtilityReport(base, after)


# -- sweep -----------------------------------------------------------------------------


@dataclass
class SteeringTask:
    """Everything a sweep needs about one fixture."""

    model: ToyMoEModel
    flip_prompts: list
    flip_traces: TraceDataset
    stats: LayerStats
    target_label: int
    target_token: int
    utility_task: list


@dataclass
class SweepCell:
    lam: float
    alpha: float
    tau: float
    success: float | None
    utility_before: float | None
    utility_after: float | None
    nnz: int | None
    degenerate: bool | None
    kind: str = "grid"  # grid | tau | probe
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class SweepResult:
    lambdas: tuple
    alphas: tuple
    taus: tuple
    baseline: float
    cells: list[SweepCell] = field(default_factory=list)
    best_lambda: float | None = None
    best_alpha: float | None = None

    def cell(self, lam: float, alpha: float, tau: float, kind: str | None = None) -> SweepCell:
        for c in self.cells:
            if c.lam == lam and c.alpha == alpha and c.tau == tau and (kind is None or c.kind == kind):
                return c
        raise KeyError((lam, alpha, tau, kind))

    def grid_cells(self) -> list[SweepCell]:
        return [c for c in self.cells if c.kind == "grid"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for c in self.cells:
            if c.failed:
                w.writerow([c.lam, c.alpha, c.tau, "failed", "", "", "", ""])
                continue
            w.writerow([c.lam, c.alpha, c.tau, repr(c.success), repr(c.utility_before),
                        repr(c.utility_after), c.nnz, int(c.degenerate)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "lambdas": list(self.lambdas), "alphas": list(self.alphas), "taus": list(self.taus),
            "baseline": self.baseline, "best_lambda": self.best_lambda,
            "best_alpha": self.best_alpha, "cells": [asdict(c) for c in self.cells],
        }


def score_mask(task: SteeringTask, S: SteeringMatrix | np.ndarray, lam: float, alpha: float,
               tau: float, utility_before: float, kind: str = "grid") -> SweepCell:
    mask = prune_mask(S, tau, lam, task.stats)
    payload = build_injection_payload(mask, alpha)
    score = behavior_success(task.model, task.flip_prompts, task.target_token, payload)
    util = utility_eval(task.model, task.utility_task, payload, before=utility_before)
    return SweepCell(lam, alpha, tau, score.success, util.before, util.after, mask.nnz,
                     score.degenerate, kind)


def run_sweep(
    task: SteeringTask,
    surrogate: SurrogateParams,
    lambdas: Sequence[float] = LAMBDA_GRID,
    alphas: Sequence[float] = ALPHA_GRID,
    taus: Sequence[float] = TAU_GRID,
    tau_fixed: float = 0.1,
    steps: int = 500,
    lr: float = 0.01,
    seed: int = 0,
    probe_factor: float | None = 5.0,
    jobs: int = 1,
) -> SweepResult:
    """lambda x alpha grid at ``tau_fixed``, then a tau sweep at the best (lambda, alpha).

    A failed mask optimization marks its cells failed and the sweep continues.
    With ``probe_factor`` an extra cell at ``max(alphas) * probe_factor`` probes
    the over-steering regime for the best lambda.
    """
    baseline = behavior_success(task.model, task.flip_prompts, task.target_token).success
    util_before = task_accuracy(task.model, task.utility_task)
    result = SweepResult(tuple(lambdas), tuple(alphas), tuple(taus), baseline)

    def optimize(lam):
        try:
            return optimize_mask(surrogate, task.flip_traces, task.target_label, lam=lam,
                                 steps=steps, lr=lr, seed=seed, stats=task.stats)
        except (MoeSteerError, FloatingPointError) as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            matrices = dict(zip(lambdas, pool.map(optimize, lambdas)))
    else:
        matrices = {lam: optimize(lam) for lam in lambdas}

    for lam in lambdas:
        S = matrices[lam]
        for alpha in alphas:
            if isinstance(S, Exception):
                result.cells.append(SweepCell(lam, alpha, tau_fixed, None, None, None, None, None,
                                              error=str(S)))
                continue
            result.cells.append(score_mask(task, S, lam, alpha, tau_fixed, util_before))

    scored = [c for c in result.grid_cells() if not c.failed]
    if not scored:
        return result
    # best success, then best retained utility, then the gentlest alpha, then smallest lambda
    best = max(scored, key=lambda c: (c.success, c.utility_after, -c.alpha, -c.lam))
    result.best_lambda, result.best_alpha = best.lam, best.alpha
    S_best = matrices[best.lam]
    for tau in taus:
        result.cells.append(score_mask(task, S_best, best.lam, best.alpha, tau, util_before, "tau"))
    if probe_factor:
        result.cells.append(score_mask(task, S_best, best.lam, max(alphas) * probe_factor,
                                       tau_fixed, util_before, "probe"))
    return result


def tune_alpha(task: SteeringTask, S: SteeringMatrix, lam: float, tau: float = 0.1,
               alphas: Sequence[float] = ALPHA_GRID) -> tuple[float, list[SweepCell]]:
    """Pick the grid alpha with the best success (ties: better utility, smaller alpha)."""
    util_before = task_accuracy(task.model, task.utility_task)
    cells = [score_mask(task, S, lam, a, tau, util_before) for a in alphas]
    best = max(cells, key=lambda c: (c.success, c.utility_after, -c.alpha))
    return best.alpha, cells
