"""VQ-MPNN forward pass and the unquantized MPNN baseline.

A batch of scenarios is flattened into one disjoint graph so that every
network block runs once per batch over all nodes (or all directed edges).
Row ``e`` of the edge arrays is the link ``src[e] -> dst[e]``; messages flow
from ``src`` to ``dst`` and are summed at ``dst``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import vq
from .config import ModelConfig
from .diffcore import Mlp, Tape, Var, mlp_forward
from .scenario import NodeKind, Scenario

ModelParams = dict  # block name -> float64 array


def networks(cfg: ModelConfig) -> dict[str, Mlp]:
    """Every MLP block of the model, keyed by block name."""
    M, D, T = cfg.M, cfg.D, cfg.T
    nets = {
        "g_v": Mlp("g_v", (2, 64, M)),
        "g_e": Mlp("g_e", (1, 32, 64, 32, M)),
        "g_v_est": Mlp("g_v_est", (M, 128, 256, 128, 2), linear_last=True),
        vq.ENCODER: vq.encoder_net(M, D),
        vq.DECODER: vq.decoder_net(M, D),
    }
    for t in range(1, T + 1):
        nets[f"g_m{t}"] = Mlp(f"g_m{t}", (3 * M, 80, 16, M))
        nets[f"g_h{t}"] = Mlp(f"g_h{t}", (2 * M, M))
    return nets


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    params: ModelParams = {}
    for net in networks(cfg).values():
        params.update(net.init(rng))
    params[vq.CODEBOOK] = vq.init_codebook(cfg.K, cfg.D, rng)
    return params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for net in networks(cfg).values():
        shapes.update(dict(net.keys()))
    shapes[vq.CODEBOOK] = (cfg.K, cfg.D)
    return shapes


@dataclass
class GraphBatch:
    """Disjoint union of scenarios with their frozen initial positions."""

    init: np.ndarray  # (N, 2)
    truth: np.ndarray  # (N, 2)
    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    z: np.ndarray  # (E, 1)
    agent_rows: np.ndarray
    node_offsets: np.ndarray  # start row of each scenario, plus total
    agent_offsets: np.ndarray  # start row of each scenario in agent_rows, plus total

    @property
    def num_nodes(self) -> int:
        return len(self.init)

    @property
    def num_scenarios(self) -> int:
        return len(self.node_offsets) - 1


def collate(scenarios: Sequence[Scenario], inits: Sequence[np.ndarray]) -> GraphBatch:
    inits_, truths, srcs, dsts, zs, agents = [], [], [], [], [], []
    node_offsets, agent_offsets = [0], [0]
    for sc, x0 in zip(scenarios, inits):
        base = node_offsets[-1]
        inits_.append(np.asarray(x0, dtype=float))
        truths.append(sc.positions)
        srcs.append(sc.edges[:, 0] + base)
        dsts.append(sc.edges[:, 1] + base)
        zs.append(sc.measurements)
        agents.append(np.flatnonzero(sc.kinds == NodeKind.AGENT) + base)
        node_offsets.append(base + sc.num_nodes)
        agent_offsets.append(agent_offsets[-1] + len(agents[-1]))
    return GraphBatch(
        init=np.vstack(inits_),
        truth=np.vstack(truths),
        src=np.concatenate(srcs).astype(np.intp),
        dst=np.concatenate(dsts).astype(np.intp),
        z=np.concatenate(zs)[:, None],
        agent_rows=np.concatenate(agents).astype(np.intp),
        node_offsets=np.array(node_offsets),
        agent_offsets=np.array(agent_offsets),
    )


@dataclass
class EncodeEvent:
    """One quantization of every node state (VQ mode only)."""

    round: int
    state: Var
    quantized: vq.Quantized
    recovered: Var
    terms: vq.VqLossTerms


@dataclass
class Transmission:
    """Messages put on the air in one round: one per directed edge."""

    round: int
    senders: np.ndarray
    receivers: np.ndarray
    message_bits: int


@dataclass
class GraphState:
    node: Var
    edge: Var
    outbound: np.ndarray | None
    recovered: Var
    t: int = 0
    events: list[EncodeEvent] = field(default_factory=list)
    trace: list[Transmission] = field(default_factory=list)


# Codec: maps node states to what a receiver reconstructs, logging any
# quantization it performs on the state.
Codec = Callable[[Tape, ModelParams, "GraphState", Var, int], Var]


def vq_codec(beta: float) -> Codec:
    def codec(tape, params, state, h, t):
        q = vq.quantize(tape, params, h)
        recovered = vq.project_decode(tape, params, tape.straight_through(q.latent, q.codeword))
        terms = vq.vq_loss(tape, params, h, q, beta, recovered=recovered)
        state.events.append(EncodeEvent(t, h, q, recovered, terms))
        state.outbound = q.index
        return recovered

    return codec


def identity_codec(tape, params, state, h, t):
    state.outbound = None
    return h


def _scale(cfg: ModelConfig) -> float:
    return 1.0 / cfg.input_scale


def encode_features(tape: Tape, params: ModelParams, cfg: ModelConfig, batch: GraphBatch, codec: Codec) -> GraphState:
    nets = networks(cfg)
    x0 = tape.constant(batch.init * _scale(cfg))
    z = tape.constant(batch.z * _scale(cfg))
    h = mlp_forward(tape, nets["g_v"], params, x0)
    he = mlp_forward(tape, nets["g_e"], params, z)
    state = GraphState(node=h, edge=he, outbound=None, recovered=h)
    state.recovered = codec(tape, params, state, h, 0)
    return state


def message(tape: Tape, params: ModelParams, cfg: ModelConfig, recovered_j: Var, state_i: Var, edge_ji: Var, t: int) -> Var:
    net = networks(cfg)[f"g_m{t}"]
    return mlp_forward(tape, net, params, tape.concat([recovered_j, state_i, edge_ji]))


def combine(tape: Tape, params: ModelParams, cfg: ModelConfig, state_i: Var, aggregate: Var, t: int) -> Var:
    net = networks(cfg)[f"g_h{t}"]
    return mlp_forward(tape, net, params, tape.concat([state_i, aggregate]))


def run_rounds(
    tape: Tape,
    params: ModelParams,
    cfg: ModelConfig,
    batch: GraphBatch,
    state: GraphState,
    codec: Codec,
    message_bits: int,
) -> GraphState:
    """T synchronous rounds; round t reads only round t-1 states."""
    for t in range(1, cfg.T + 1):
        state.trace.append(Transmission(t, batch.src, batch.dst, message_bits))
        msgs = message(
            tape,
            params,
            cfg,
            tape.gather(state.recovered, batch.src),
            tape.gather(state.node, batch.dst),
            state.edge,
            t,
        )
        agg = tape.segment_sum(msgs, batch.dst, batch.num_nodes)
        state.node = combine(tape, params, cfg, state.node, agg, t)
        state.t = t
        state.recovered = codec(tape, params, state, state.node, t)
    return state


def estimate_positions(tape: Tape, params: ModelParams, cfg: ModelConfig, batch: GraphBatch, state: GraphState) -> Var:
    """Read out positions of agent rows only, in ``batch.agent_rows`` order."""
    h = tape.gather(state.node, batch.agent_rows)
    out = mlp_forward(tape, networks(cfg)["g_v_est"], params, h)
    return tape.scale(out, cfg.input_scale) if cfg.input_scale != 1.0 else out


@dataclass
class ForwardResult:
    estimates: Var
    state: GraphState
    tape: Tape


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    batch: GraphBatch,
    mode: str = "vq",
    beta: float = 0.25,
    tape: Tape | None = None,
    codec: Codec | None = None,
    header_bits: int = 32,
    scalar_bits: int = 32,
) -> ForwardResult:
    """Full pipeline: features, T rounds, read-out.

    ``mode`` is ``"vq"`` (codeword indices on the air) or ``"mpnn"``
    (neighbours consume raw states).  ``codec`` overrides the mode's codec.
    """
    tape = tape or Tape()
    if codec is None:
        if mode == "vq":
            codec = vq_codec(beta)
        elif mode == "mpnn":
            codec = identity_codec
        else:
            raise ValueError(f"unknown mode {mode!r}")
    payload = vq.index_bits(cfg.K) if mode == "vq" else cfg.M * scalar_bits
    state = encode_features(tape, params, cfg, batch, codec)
    state = run_rounds(tape, params, cfg, batch, state, codec, payload + header_bits)
    est = estimate_positions(tape, params, cfg, batch, state)
    return ForwardResult(est, state, tape)


def predict(params: ModelParams, cfg: ModelConfig, scenarios: Sequence[Scenario], inits: Sequence[np.ndarray], mode: str = "vq") -> list[np.ndarray]:
    """Agent position estimates per scenario (agent order of each scenario)."""
    batch = collate(scenarios, inits)
    est = forward(params, cfg, batch, mode=mode).estimates.value
    return [est[a:b] for a, b in zip(batch.agent_offsets[:-1], batch.agent_offsets[1:])]
