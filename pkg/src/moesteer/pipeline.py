"""Shared recipe: planted fixture -> traces -> surrogate -> steering task.

Used by the command line and by the end-to-end tests so both run the exact
same steps for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .analysis import SteeringTask
from .errors import ContractError, InputError
from .moe import (
    CircuitSpec,
    ToyMoEModel,
    behavior_labeler,
    behavior_prompts,
    build_planted_fixture,
    circuit_from_model,
    planted_config,
    utility_prompts,
)
from .steering import compute_layer_sigma
from .traces import TraceDataset, collect_traces


@dataclass(frozen=True)
class FixtureSettings:
    num_layers: int = 8
    experts_per_layer: int = 16
    top_k: int = 2
    margin: float = 1.0
    noise: float = 0.3
    utility_coupling: float = 0.5
    content_gain: float = 3.0
    behavior_strength: float = 4.0
    lean: float = 0.0

    def circuit(self) -> CircuitSpec:
        k = self.top_k
        return CircuitSpec(
            set_a=tuple(range(k)), set_b=tuple(range(k, 2 * k)), margin=self.margin,
            noise=self.noise, utility_coupling=self.utility_coupling, content_gain=self.content_gain,
            behavior_strength=self.behavior_strength, lean=self.lean,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSettings":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown fixture keys: {sorted(unknown)}")
        return cls(**d)


def make_fixture(settings: FixtureSettings = FixtureSettings(), seed: int = 0) -> ToyMoEModel:
    circuit = settings.circuit()
    cfg = planted_config(circuit, num_layers=settings.num_layers,
                         experts_per_layer=settings.experts_per_layer, seed=seed)
    return build_planted_fixture(cfg, circuit)


@dataclass
class BehaviorData:
    prompts: list
    dataset: TraceDataset
    circuit: CircuitSpec = field(repr=False, default=None)

    def prompt_of(self, trace) -> np.ndarray:
        prefix, _, idx = trace.source.rpartition(":")
        return self.prompts[int(idx)]


def behavior_data(model: ToyMoEModel, n_per_flag: int = 250, seed: int = 0) -> BehaviorData:
    """Balanced ``[flag, content.., query]`` prompts and their labeled routing traces."""
    circuit = circuit_from_model(model)
    rng = np.random.default_rng([seed, 1])
    prompts = behavior_prompts(circuit, "a", n_per_flag, rng) + behavior_prompts(circuit, "b", n_per_flag, rng)
    dataset = collect_traces(model, prompts, behavior_labeler(circuit))
    return BehaviorData(prompts, dataset, circuit)


def steering_task(
    model: ToyMoEModel, data: BehaviorData, target_label: int = 1, flip_cap: int = 128,
    n_utility: int = 200, seed: int = 0,
) -> SteeringTask:
    """Flip set = every prompt currently showing the non-target behavior.

    The mask optimizer sees at most ``flip_cap`` of their traces; success is
    scored on all of them. The utility task is a fresh flag-free draw.
    """
    circuit = data.circuit or circuit_from_model(model)
    flip = data.dataset.with_label(1 - target_label)
    if len(flip) == 0:
        raise ContractError("no traces with the non-target behavior")
    flip_prompts = [data.prompt_of(t) for t in flip]
    flip_traces = flip.subset(range(min(flip_cap, len(flip))))
    rng = np.random.default_rng([seed, 2])
    target_token = circuit.token_b if target_label == 1 else circuit.token_a
    return SteeringTask(
        model=model,
        flip_prompts=flip_prompts,
        flip_traces=flip_traces,
        stats=compute_layer_sigma(data.dataset, dataset_id="behavior"),
        target_label=target_label,
        target_token=target_token,
        utility_task=utility_prompts(circuit, n_utility, rng),
    )
