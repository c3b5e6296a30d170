"""Per-node communication cost of the compared localization methods.

All counts are exact integers in bits.  Costs use per-neighbour accounting:
a node pays one header plus one payload for every neighbour it sends to.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .vq import index_bits


class Method(str, Enum):
    PLBP = "PLBP"
    PLBP_C = "PLBP-C"
    MPNN = "MPNN"
    VQ_MPNN = "VQ-MPNN"
    SP_ADMM = "SP-ADMM"
    NBP = "NBP"


# fields each formula reads besides the neighbour count
_NEEDS = {
    Method.PLBP: ("J", "Q", "H", "T"),
    Method.PLBP_C: ("J", "Q", "H", "T", "C"),
    Method.MPNN: ("M", "Q", "H", "T"),
    Method.VQ_MPNN: ("K", "H", "T"),
    Method.SP_ADMM: ("Q", "H", "T"),
    Method.NBP: ("N_p", "H", "T"),
}


class MissingFieldError(ValueError):
    pass


@dataclass(frozen=True)
class CommCostSpec:
    neighbors: int
    Q: int | None = None
    H: int | None = None
    T: int | None = None
    J: int | None = None
    C: int | None = None
    N_p: int | None = None
    K: int | None = None
    M: int | None = None


def comm_cost(method: Method | str, spec: CommCostSpec) -> int:
    """Bits one node sends over a full run of ``method``."""
    method = Method(method)
    missing = [f for f in ("neighbors",) + _NEEDS[method] if getattr(spec, f) is None]
    if missing:
        raise MissingFieldError(f"{method.value} cost needs {', '.join(missing)}")
    s = spec
    n = s.neighbors
    if method is Method.PLBP:
        return s.J * n * (6 * s.Q + s.H + 4 * s.Q * s.T + s.H * s.T)
    if method is Method.PLBP_C:
        return s.J * n * (6 * s.Q + s.H + 4 * s.C * s.T + s.H * s.T)
    if method is Method.MPNN:
        return (s.M * s.Q + s.H) * n * s.T
    if method is Method.VQ_MPNN:
        return (s.H + index_bits(s.K)) * n * s.T
    if method is Method.SP_ADMM:
        return (4 * s.Q + s.H) * n * s.T
    return (2 * s.N_p + s.H) * n * s.T


def reference_cost_specs(
    Q=32, H=32, neighbors=10, T=3, T_admm=400, J=20, C=8, N_p=1000, K=1024, M=16
) -> dict[Method, CommCostSpec]:
    """The standard constant set of the cost comparison, one spec per method."""
    base = dict(neighbors=neighbors, Q=Q, H=H, J=J, C=C, N_p=N_p, K=K, M=M)
    return {
        m: CommCostSpec(T=T_admm if m is Method.SP_ADMM else T, **base) for m in Method
    }


def cost_table(specs: dict[Method, CommCostSpec]) -> list[tuple[str, int]]:
    return [(m.value, comm_cost(m, spec)) for m, spec in specs.items()]


def write_cost_csv(rows: Iterable[tuple[str, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "bits"])
        w.writerows(rows)


# -- scalar quantizer (PLBP-C baseline) ---------------------------------------


def clip(v, b: float):
    """``-b + max(v + b, 0) - max(v - b, 0)``."""
    v = np.asarray(v, dtype=float)
    return -b + np.maximum(v + b, 0.0) - np.maximum(v - b, 0.0)


@dataclass(frozen=True)
class ScalarQuantizer:
    b: float
    C: int

    def __post_init__(self):
        if not self.b > 0 or self.C < 1:
            raise ValueError("need b > 0 and C >= 1")

    @property
    def step(self) -> float:
        return 2.0 * self.b / 2**self.C


def scalar_quantize(v, q: ScalarQuantizer):
    """Clip to [-b, b], then ``delta * ceil(v / delta) - delta / 2``.

    The reconstruction is always within half a step of the clipped input;
    at ``-b`` it sits half a step below the range.
    """
    d = q.step
    c = clip(v, q.b)
    return d * np.ceil(c / d) - d / 2.0


# -- runtime accounting -------------------------------------------------------


def count_runtime_bits(trace, num_nodes: int) -> np.ndarray:
    """Bits each node actually put on the air, from a run's transmission log.

    ``trace`` is a sequence of objects with ``senders`` (one entry per
    message) and ``message_bits`` (header plus payload).
    """
    bits = np.zeros(num_nodes, dtype=np.int64)
    for tx in trace:
        bits += np.bincount(np.asarray(tx.senders), minlength=num_nodes).astype(np.int64) * int(tx.message_bits)
    return bits


def vq_bits_per_node(degrees, K: int, H: int, T: int) -> np.ndarray:
    """Closed form with each node's own neighbour count."""
    return (H + index_bits(K)) * np.asarray(degrees, dtype=np.int64) * T
