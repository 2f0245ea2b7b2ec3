"""Experience replay: bounded FIFO buffers, hindsight staging and scoped deletion.

Buffers keep the transition records (for inspection and dumps) next to
their encoded arrays, so minibatches are assembled without re-encoding.
Deleted records are tombstoned in place; sampling skips them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .env import EnvState
from .qnet import Minibatch


class ReplayContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class LowTransition:
    state: EnvState
    option: float
    action_index: int
    reward: float
    next_state: EnvState
    done: bool
    episode_id: int
    option_instance_id: int
    cost: float = 0.0  # charging-cost part of the reward
    target_penalty: float = 0.0  # boundary penalty part (<= 0)
    hindsight: bool = False


@dataclass(frozen=True)
class HighTransition:
    start_state: EnvState
    relabeled_option: float
    reward: float
    next_state: EnvState
    done: bool
    episode_id: int = -1
    option_index: int = -1
    prescribed_option: float = float("nan")


@dataclass(frozen=True)
class FlatTransition:
    state: EnvState
    action_index: int
    reward: float
    next_state: EnvState
    done: bool
    episode_id: int = -1


@dataclass(frozen=True)
class Encoded:
    features: np.ndarray
    action: int
    reward: float
    next_features: np.ndarray
    done: bool
    next_mask: np.ndarray


class ReplayBuffer:
    """Bounded FIFO store; ``encoder(record) -> Encoded`` supplies the network arrays."""

    def __init__(self, capacity: int, feat_dim: int, n_out: int, encoder, keep_records: bool = True):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.encoder = encoder
        self.keep_records = keep_records
        self.feat = np.zeros((capacity, feat_dim))
        self.next_feat = np.zeros((capacity, feat_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.next_mask = np.zeros((capacity, n_out), dtype=bool)
        self.alive = np.zeros(capacity, dtype=bool)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.instance = np.full(capacity, -1, dtype=np.int64)
        self.records = np.empty(capacity, dtype=object)
        self.head = 0  # next write slot
        self.filled = 0
        self.n_alive = 0

    def __len__(self):
        return self.n_alive

    def push(self, record) -> None:
        enc = self.encoder(record)
        i = self.head
        if self.alive[i]:
            self.n_alive -= 1
        self.feat[i] = enc.features
        self.next_feat[i] = enc.next_features
        self.action[i] = enc.action
        self.reward[i] = enc.reward
        self.done[i] = enc.done
        self.next_mask[i] = enc.next_mask
        self.episode[i] = getattr(record, "episode_id", -1)
        self.instance[i] = getattr(record, "option_instance_id", -1)
        self.records[i] = record if self.keep_records else None
        self.alive[i] = True
        self.n_alive += 1
        self.head = (i + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def delete_option_transitions(self, episode_id: int, option_instance_id: int) -> int:
        hit = self.alive & (self.episode == episode_id) & (self.instance == option_instance_id)
        n = int(hit.sum())
        self.alive[hit] = False
        self.n_alive -= n
        return n

    def live_records(self):
        """Alive records, oldest first."""
        order = [(self.head + j) % self.capacity for j in range(self.capacity)] if self.filled == self.capacity \
            else range(self.filled)
        return [self.records[i] for i in order if self.alive[i]]

    def sample_indices(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample of alive slots without replacement, or None if too few records."""
        if self.n_alive < batch_size:
            return None
        if self.n_alive == self.filled:
            return rng.choice(self.filled, size=batch_size, replace=False)
        if self.n_alive < 4 * batch_size:
            return rng.choice(np.flatnonzero(self.alive), size=batch_size, replace=False)
        chosen, seen = [], set()
        while len(chosen) < batch_size:
            for i in rng.integers(0, self.filled, size=2 * batch_size):
                i = int(i)
                if self.alive[i] and i not in seen:
                    seen.add(i)
                    chosen.append(i)
                    if len(chosen) == batch_size:
                        break
        return np.array(chosen)

    def sample_minibatch(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        if idx is None:
            return None
        return Minibatch(self.feat[idx], self.action[idx], self.reward[idx], self.next_feat[idx],
                         self.done[idx], self.next_mask[idx])

    def sample_records(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        return None if idx is None else [self.records[i] for i in idx]

    def dump(self, path) -> int:
        """Write alive records as CSV, one per line, fields in record order."""
        recs = self.live_records()
        if not recs:
            open(path, "w").close()
            return 0
        names = [f.name for f in fields(recs[0])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in recs:
                row = []
                for n in names:
                    v = getattr(r, n)
                    if isinstance(v, EnvState):
                        v = f"soc={v.soc:.6g};B={v.period_flag};tau={v.steps_to_departure};" \
                            f"k={v.period_index};t={v.step_index}"
                    row.append(v)
                w.writerow(row)
        return len(recs)


@dataclass
class HindsightStager:
    """Per-charging-period hindsight copies whose goal is filled in at the period end."""

    episode_id: int = -1
    option_instance_id: int = -1
    staged: list = field(default_factory=list)
    active: bool = False

    def begin(self, episode_id: int, option_instance_id: int):
        self.episode_id, self.option_instance_id = episode_id, option_instance_id
        self.staged = []
        self.active = True

    def stage(self, tr: LowTransition):
        if not self.active:
            raise ReplayContractError("stage() before begin()")
        # goal slot left undetermined until the period ends
        self.staged.append(replace(tr, option=float("nan"), hindsight=True))

    def drop(self):
        self.staged = []
        self.active = False


def her_store(buffer: ReplayBuffer, stager: HindsightStager, achieved: float, prescribed: float,
              tol: float = 1e-9) -> int:
    """Finalise staged copies: goal := achieved end-of-period SoC, zero target penalty on the last step.

    Nothing is pushed when the prescribed target was met.  Returns the
    number of records pushed.
    """
    if not stager.active:
        raise ReplayContractError("her_store() without staged transitions")
    pushed = 0
    if abs(achieved - prescribed) > tol:
        for tr in stager.staged:
            reward = tr.cost if tr.done else tr.reward
            buffer.push(replace(tr, option=float(achieved), reward=reward, target_penalty=0.0))
            pushed += 1
    stager.drop()
    return pushed


def delete_option_transitions(buffer: ReplayBuffer, episode_id: int, option_instance_id: int,
                              stager: HindsightStager | None = None) -> int:
    if stager is not None and stager.active and stager.option_instance_id == option_instance_id \
            and stager.episode_id == episode_id:
        stager.drop()
    return buffer.delete_option_transitions(episode_id, option_instance_id)


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator):
    return buffer.sample_minibatch(batch_size, rng)
