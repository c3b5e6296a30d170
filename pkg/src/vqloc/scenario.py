"""Static 2-D cooperative localization scenarios.

A scenario places nine anchors on the corners, side midpoints and centre of a
square, drops agents uniformly inside it, links every pair of nodes within
communication range and draws one noisy range measurement per directed link.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

ANCHOR_COUNT = 9
MAX_RESAMPLES = 100

# sub-stream ids under one master seed
_PLACEMENT, _NOISE, _PRIOR, _INIT = 0, 1, 2, 3


class NodeKind(IntEnum):
    ANCHOR = 0
    AGENT = 1


class ScenarioError(RuntimeError):
    """A scenario could not be generated or loaded."""


@dataclass(frozen=True)
class NoiseModel:
    """``kind`` is ``"awgn"`` (sigma in metres) or ``"range"`` (std = sigma * d)."""

    kind: str = "awgn"
    sigma: float = 4.0

    def __post_init__(self):
        if self.kind not in ("awgn", "range"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError("noise sigma must be non-negative")

    def std(self, d):
        if self.kind == "range":
            return self.sigma * np.asarray(d, dtype=float)
        return np.full(np.shape(d), self.sigma)


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def anchor_positions(area: float) -> np.ndarray:
    """Corners, side midpoints and centre, row-major from (0, 0)."""
    ticks = np.array([0.0, area / 2.0, area])
    return np.array([(x, y) for y in ticks for x in ticks])


def measure_distance(x_j, x_i, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Noisy range ``||x_j - x_i|| + n``; works row-wise on stacked positions."""
    d = np.linalg.norm(np.asarray(x_j, dtype=float) - np.asarray(x_i, dtype=float), axis=-1)
    return d + rng.normal(size=np.shape(d)) * noise.std(d)


def sample_initial_position(prior_mean, prior_var, rng: np.random.Generator) -> np.ndarray:
    prior_mean = np.asarray(prior_mean, dtype=float)
    std = np.sqrt(np.broadcast_to(np.asarray(prior_var, dtype=float), prior_mean.shape))
    return prior_mean + rng.normal(size=prior_mean.shape) * std


def neighbor_lists(positions: np.ndarray, comm_range: float) -> list[np.ndarray]:
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    adj = dist <= comm_range
    np.fill_diagonal(adj, False)
    return [np.flatnonzero(row) for row in adj]


@dataclass
class Scenario:
    """One network realization.

    ``edges`` holds directed pairs ``(j, i)`` meaning *j transmits to i*, i.e.
    ``j`` is in the neighbour set of ``i``; ``measurements[e]`` is the range
    node ``i`` measured on edge ``e``.  Edges are sorted by receiver then
    sender.
    """

    positions: np.ndarray
    kinds: np.ndarray
    comm_range: float
    edges: np.ndarray
    measurements: np.ndarray
    prior_means: np.ndarray
    prior_var: tuple[float, float]
    seed: int

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def agents(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == NodeKind.AGENT)

    @property
    def anchors(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == NodeKind.ANCHOR)

    @property
    def num_agents(self) -> int:
        return int(np.sum(self.kinds == NodeKind.AGENT))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.num_nodes)

    def neighbors(self, i: int) -> np.ndarray:
        return self.edges[self.edges[:, 1] == i, 0]

    def initial_positions(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Anchors at their true position, agents drawn from their prior."""
        if rng is None:
            rng = substream(self.seed, _INIT)
        init = self.positions.copy()
        agents = self.agents
        init[agents] = sample_initial_position(self.prior_means[agents], self.prior_var, rng)
        return init

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "kinds": ["anchor" if k == NodeKind.ANCHOR else "agent" for k in self.kinds],
            "range": self.comm_range,
            "measurements": [
                [int(j), int(i), float(z)] for (j, i), z in zip(self.edges, self.measurements)
            ],
            "prior_means": self.prior_means.tolist(),
            "prior_cov": [[self.prior_var[0], 0.0], [0.0, self.prior_var[1]]],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            meas = data["measurements"]
            edges = np.array([[m[0], m[1]] for m in meas], dtype=np.intp).reshape(-1, 2)
            z = np.array([m[2] for m in meas], dtype=float)
            kinds = np.array(
                [NodeKind.ANCHOR if k == "anchor" else NodeKind.AGENT for k in data["kinds"]],
                dtype=np.int8,
            )
            return cls(
                positions=np.array(data["positions"], dtype=float).reshape(-1, 2),
                kinds=kinds,
                comm_range=float(data["range"]),
                edges=edges,
                measurements=z,
                prior_means=np.array(data["prior_means"], dtype=float).reshape(-1, 2),
                prior_var=(float(data["prior_cov"][0][0]), float(data["prior_cov"][1][1])),
                seed=int(data["seed"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ScenarioError(f"malformed scenario data: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def build_scenario(
    positions: np.ndarray,
    kinds: np.ndarray,
    comm_range: float,
    noise: NoiseModel,
    prior_var: float = 10.0,
    seed: int = 0,
) -> Scenario:
    """Wire up edges, measurements and priors for fixed node positions."""
    positions = np.asarray(positions, dtype=float)
    kinds = np.asarray(kinds, dtype=np.int8)
    nbrs = neighbor_lists(positions, comm_range)
    edges = np.array([(j, i) for i in range(len(positions)) for j in nbrs[i]], dtype=np.intp).reshape(-1, 2)
    z = measure_distance(positions[edges[:, 0]], positions[edges[:, 1]], noise, substream(seed, _NOISE))
    prior_means = positions.copy()
    agents = np.flatnonzero(kinds == NodeKind.AGENT)
    prior_means[agents] = sample_initial_position(positions[agents], prior_var, substream(seed, _PRIOR))
    return Scenario(
        positions=positions,
        kinds=kinds,
        comm_range=float(comm_range),
        edges=edges,
        measurements=z,
        prior_means=prior_means,
        prior_var=(float(prior_var), float(prior_var)),
        seed=int(seed),
    )


def generate_scenario(
    num_agents: int = 20,
    area: float = 50.0,
    comm_range: float = 25.0,
    noise: NoiseModel = NoiseModel(),
    prior_var: float = 10.0,
    seed: int = 0,
) -> Scenario:
    """Sample a scenario; agent placement is redrawn until no agent is isolated."""
    if num_agents < 1:
        raise ValueError("num_agents must be at least 1")
    if area <= 0 or comm_range <= 0:
        raise ValueError("area and range must be positive")
    rng = substream(seed, _PLACEMENT)
    anchors = anchor_positions(area)
    kinds = np.array([NodeKind.ANCHOR] * ANCHOR_COUNT + [NodeKind.AGENT] * num_agents, dtype=np.int8)
    for _ in range(MAX_RESAMPLES):
        positions = np.vstack([anchors, rng.uniform(0.0, area, size=(num_agents, 2))])
        nbrs = neighbor_lists(positions, comm_range)
        if all(len(nbrs[i]) > 0 for i in range(ANCHOR_COUNT, len(positions))):
            return build_scenario(positions, kinds, comm_range, noise, prior_var, seed)
    raise ScenarioError(f"seed {seed}: an agent stayed isolated after {MAX_RESAMPLES} placements")
