"""Joint obstacle trajectories, split bookkeeping and the JSON-lines dataset format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput

ROLES = ("train", "cal1", "cal2", "test")


@dataclass(frozen=True)
class JointObstacleTrajectory:
    """Positions of all ``M`` obstacles over ``t = 0..T``.

    ``states`` has shape ``(T + 1, 2 M)``: row ``t`` stacks ``(x_j, y_j)`` for
    every obstacle ``j``.
    """

    states: np.ndarray
    trajectory_id: int

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[1] % 2:
            raise InvalidInput("states must be (T + 1, 2 M)")
        s.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "trajectory_id", int(self.trajectory_id))

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def M(self) -> int:
        return self.states.shape[1] // 2


@dataclass
class TrajectoryDataset:
    """Trajectories keyed by id with a role label per id."""

    trajectories: dict[int, JointObstacleTrajectory]
    roles: dict[int, str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if set(self.trajectories) != set(self.roles):
            raise InvalidInput("every trajectory needs exactly one role")
        bad = set(self.roles.values()) - set(ROLES)
        if bad:
            raise InvalidInput(f"unknown roles {sorted(bad)}")
        shapes = {tr.states.shape for tr in self.trajectories.values()}
        if len(shapes) > 1:
            raise InvalidInput("all trajectories must share T and M")

    def ids(self, role: str) -> np.ndarray:
        return np.array(sorted(i for i, r in self.roles.items() if r == role), dtype=np.int64)

    def split(self, role: str) -> list[JointObstacleTrajectory]:
        return [self.trajectories[i] for i in self.ids(role)]

    def states(self, role: str) -> np.ndarray:
        """Stacked states of one split, ``(n, T + 1, 2 M)``, ordered by id."""
        if role not in self._cache:
            ids = self.ids(role)
            if ids.size == 0:
                self._cache[role] = np.empty((0,) + self.shape)
            else:
                self._cache[role] = np.stack([self.trajectories[i].states for i in ids])
        return self._cache[role]

    @property
    def shape(self) -> tuple[int, int]:
        tr = next(iter(self.trajectories.values()))
        return tr.states.shape

    def size(self, role: str) -> int:
        return int(self.ids(role).size)


def split_dataset(trajs, sizes, seed: int) -> TrajectoryDataset:
    """Randomly partition trajectories into train / cal1 / cal2 / test.

    ``sizes`` is ``(n_train, n_cal1, n_cal2, n_test)`` and must sum to the
    number of trajectories. The permutation depends only on ``seed`` and the
    sorted trajectory ids, so input order is irrelevant.
    """
    trajs = list(trajs)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 4 or any(s < 0 for s in sizes):
        raise InvalidInput("sizes must be four nonnegative integers")
    if sum(sizes) != len(trajs):
        raise InvalidInput(f"sizes sum to {sum(sizes)} but {len(trajs)} trajectories were given")
    by_id = {tr.trajectory_id: tr for tr in trajs}
    if len(by_id) != len(trajs):
        raise InvalidInput("duplicate trajectory ids")
    ids = np.array(sorted(by_id), dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(0x5B17,))))
    perm = ids[rng.permutation(ids.size)]
    roles = {}
    start = 0
    for role, n in zip(ROLES, sizes):
        for i in perm[start:start + n]:
            roles[int(i)] = role
        start += n
    return TrajectoryDataset(by_id, roles)


def merge_datasets(*parts: TrajectoryDataset) -> TrajectoryDataset:
    trajs, roles = {}, {}
    for p in parts:
        overlap = set(trajs) & set(p.trajectories)
        if overlap:
            raise InvalidInput(f"trajectory ids collide: {sorted(overlap)[:5]}")
        trajs.update(p.trajectories)
        roles.update(p.roles)
    return TrajectoryDataset(trajs, roles)


def save_jsonl(dataset: TrajectoryDataset, path) -> None:
    """One JSON object per trajectory: id, role, M, T and row-major flattened states."""
    path = Path(path)
    with path.open("w") as fh:
        for i in sorted(dataset.trajectories):
            tr = dataset.trajectories[i]
            rec = {"id": i, "role": dataset.roles[i], "M": tr.M, "T": tr.T,
                   "states": [float(v) for v in tr.states.ravel()]}
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> TrajectoryDataset:
    trajs, roles = {}, {}
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            states = np.asarray(rec["states"], dtype=float).reshape(rec["T"] + 1, 2 * rec["M"])
            trajs[int(rec["id"])] = JointObstacleTrajectory(states, rec["id"])
            roles[int(rec["id"])] = rec["role"]
    return TrajectoryDataset(trajs, roles)
