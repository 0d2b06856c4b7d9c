"""Per-request pruning MDP.

One episode is one request under one memory budget. Every step prunes one
still-retained block; the episode ends as soon as the peak memory of the
current configuration fits the budget, or when nothing is left to prune.

Rewards are telescoping differences of ``reward_value`` so the undiscounted
return of an episode equals ``reward_value(final) - reward_value(full)``
(plus the infeasibility penalty when the budget was never met).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .gsi import ImportanceTable, memory_importance_vector
from .memory import (
    BlockId,
    ModelSpec,
    Request,
    check_request,
    fixed_bytes,
    full_mask,
    peak_memory,
)

STATE_DIM = 6


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 1.0
    beta: float = 0.03
    infeasible_penalty: float = -1.0
    literal: bool = False  # per-block ratio reading: (alpha - beta) * n_retained

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")
        if self.infeasible_penalty > 0:
            raise ValueError("infeasible_penalty must be <= 0")


@dataclass(frozen=True)
class StateNorms:
    max_batch: int = 16
    max_seq: int = 4096


@dataclass(frozen=True)
class SystemState:
    mem_budget: int
    mem_footprint: int


class StepOutcome(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool
    feasible: bool


def reward_value(mask, i_ppl, i_me, params: RewardParams) -> float:
    """Retained importance share (scaled by alpha) minus retained memory share (scaled by beta)."""
    mask = np.asarray(mask, dtype=bool)
    if params.literal:
        return (params.alpha - params.beta) * int(mask.sum())
    ppl_share = float(np.sum(i_ppl[mask])) / float(np.sum(i_ppl))
    me_total = int(np.sum(i_me))
    me_share = int(np.sum(i_me[mask])) / me_total if me_total else 0.0
    return params.alpha * ppl_share - params.beta * me_share


def encode_state(req: Request, mask, i_ppl, sys: SystemState, norms: StateNorms, full_peak: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.array(
        [
            req.batch_size / norms.max_batch,
            req.seq_len / norms.max_seq,
            float(np.sum(i_ppl[1::2][mask[1::2]])),
            float(np.sum(i_ppl[0::2][mask[0::2]])),
            sys.mem_budget / full_peak,
            sys.mem_footprint / full_peak,
        ]
    )


def legal_actions(mask) -> list[BlockId]:
    return [BlockId.from_index(i) for i in np.flatnonzero(mask)]


class PruningEnv:
    """Single-threaded episode runner over one model and one importance table."""

    state_dim = STATE_DIM

    def __init__(
        self,
        spec: ModelSpec,
        tables: ImportanceTable,
        params: RewardParams = RewardParams(),
        norms: StateNorms = StateNorms(),
        request: Request | None = None,
        budget_fraction: float | None = None,
    ):
        if tables.n_blocks != spec.n_blocks:
            raise ValueError(f"table covers {tables.n_blocks} blocks, model has {spec.n_blocks}")
        self.spec = spec
        self.tables = tables
        self.params = params
        self.norms = norms
        self.n_actions = spec.n_blocks
        self._default = (request, budget_fraction)
        self.mask = None

    def reset(self, req: Request | None = None, budget_fraction: float | None = None) -> np.ndarray:
        if req is None:
            req, budget_fraction = self._default
        if req is None or budget_fraction is None:
            raise ValueError("reset needs a request and a budget fraction")
        req = Request(int(req[0]), int(req[1]))
        check_request(req)
        if not 0.0 < budget_fraction <= 1.0:
            raise ValueError(f"budget_fraction must be in (0, 1], got {budget_fraction}")
        self.req = req
        self.mask = full_mask(self.spec)
        self.i_ppl = np.ascontiguousarray(self.tables.column(req.seq_len))
        self.i_me = memory_importance_vector(self.spec, req)
        self.full_peak = peak_memory(self.spec, self.mask, req)
        self.budget = math.floor(budget_fraction * self.full_peak)
        self.peak = self.full_peak
        self.floor_bytes = fixed_bytes(self.spec)
        self.infeasible_at_reset = self.floor_bytes > self.budget
        self.steps = 0
        self.total_reward = 0.0
        self.feasible = self.peak <= self.budget
        self.done = self.feasible
        self._value = reward_value(self.mask, self.i_ppl, self.i_me, self.params)
        self.initial_value = self._value
        return self.state()

    @property
    def system(self) -> SystemState:
        return SystemState(self.budget, self.peak)

    def state(self) -> np.ndarray:
        return encode_state(self.req, self.mask, self.i_ppl, self.system, self.norms, self.full_peak)

    def legal_mask(self) -> np.ndarray:
        return self.mask.copy()

    def legal_actions(self) -> list[BlockId]:
        return legal_actions(self.mask)

    def reward_value(self, mask=None) -> float:
        return reward_value(self.mask if mask is None else mask, self.i_ppl, self.i_me, self.params)

    def step(self, action) -> StepOutcome:
        if self.mask is None:
            raise RuntimeError("call reset() before step()")
        if self.done:
            raise IllegalActionError("episode is over")
        index = action.index if isinstance(action, BlockId) else int(action)
        if not (0 <= index < self.n_actions) or not self.mask[index]:
            raise IllegalActionError(f"block {BlockId.from_index(index)} is not retained")
        self.mask[index] = False
        self.peak -= int(self.i_me[index])
        self.steps += 1
        value = reward_value(self.mask, self.i_ppl, self.i_me, self.params)
        reward = value - self._value
        self._value = value
        self.feasible = self.peak <= self.budget
        exhausted = not self.mask.any()
        self.done = self.feasible or exhausted
        if self.done and not self.feasible:
            reward += self.params.infeasible_penalty
        self.total_reward += reward
        return StepOutcome(self.state(), reward, self.done, self.feasible)

    def log_row(self, episode: int) -> dict:
        return {
            "episode": episode,
            "steps": self.steps,
            "feasible": int(self.feasible),
            "final_reward": repr(self._value),
            "final_peak_bytes": self.peak,
            "budget_bytes": self.budget,
        }


EPISODE_LOG_FIELDS = ["episode", "steps", "feasible", "final_reward", "final_peak_bytes", "budget_bytes"]


def write_episode_log(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=EPISODE_LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
