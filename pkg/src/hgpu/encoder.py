"""Hierarchical graph pattern encoder.

Three nodes per frame pair (frame k, flow k, frame k+1) run through four
backbone stages. Between stages the nodes exchange attention-weighted
messages over a fully connected graph, update their state with a ConvGRU,
and fuse the per-neighbor states with a gated readout whose output feeds
the next stage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import DimensionError, Tensor

NODES = ("I_k", "O_k", "I_k1")
FRAME_NODES = ("I_k", "I_k1")
# Each unordered pair is evaluated once; orientation is (first, second).
# Flow edges are oriented frame -> flow so swapping the frames permutes them.
PAIRS = (("I_k", "O_k"), ("I_k1", "O_k"), ("I_k", "I_k1"))


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple = NODES
    message_iterations: int = 1

    def __post_init__(self):
        if len(self.nodes) != 3:
            raise ValueError("the graph has exactly three nodes")
        if self.message_iterations < 1:
            raise ValueError("message_iterations must be >= 1")

    def neighbors(self, t: str) -> list[str]:
        return [u for u in self.nodes if u != t]


def stage_channels(base: int) -> list[int]:
    return [base, 2 * base, 4 * base, 8 * base]


def low_rank(channels: int, divisor: int = 8) -> int:
    return max(channels // divisor, 4)


class BackboneStage(Module):
    """conv3x3/2 -> BN -> ReLU -> conv3x3 -> BN -> ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=2)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class SoftAttention(Module):
    """Single-channel spatial gate broadcast over channels."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.gate = Conv2d(channels, 1, 1, rng)

    def forward(self, h: Tensor) -> Tensor:
        return h * T.sigmoid(self.gate(h))


class EdgeWeights(Module):
    """Low-rank factorisation X = A @ B of the C x C affinity weight."""

    def __init__(self, channels: int, rank: int, rng: np.random.Generator):
        self.a = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, rank)))
        self.b = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(rank), (rank, channels)))

    def matrix(self) -> Tensor:
        return self.a @ self.b


def flatten_positions(h: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,HW,C]."""
    n, c, hh, ww = h.shape
    return h.reshape(n, c, hh * ww).transpose(0, 2, 1)


def edge_affinity(h_t: Tensor, h_u: Tensor, w: EdgeWeights) -> tuple[Tensor, Tensor]:
    """Affinity S = H_t X H_u^T and its transpose (the reverse edge)."""
    if h_t.shape != h_u.shape:
        raise DimensionError(f"edge endpoints differ in shape: {h_t.shape} vs {h_u.shape}")
    ft = flatten_positions(h_t)
    fu = flatten_positions(h_u)
    # (H_t A)(H_u B^T)^T keeps the intermediate at rank r; both factors are
    # projected the same way so swapping t and u transposes S bit-exactly
    # whenever X is symmetric
    s = (ft @ w.a) @ (fu @ w.b.transpose(1, 0)).transpose(0, 2, 1)
    return s, s.transpose(0, 2, 1)


def aggregate_message(h_u: Tensor, e_tu: Tensor) -> Tensor:
    """softmax over source positions of e_{t,u}, applied to the source features."""
    n, c, hh, ww = h_u.shape
    if e_tu.shape != (n, hh * ww, hh * ww):
        raise DimensionError(f"affinity {e_tu.shape} does not match features {h_u.shape}")
    m = T.softmax_rows(e_tu) @ flatten_positions(h_u)
    return m.transpose(0, 2, 1).reshape(n, c, hh, ww)


class ConvGRU(Module):
    """ConvGRU cell; the update and reset gates share one stacked 3x3 conv."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.conv_zr = Conv2d(2 * channels, 2 * channels, 3, rng)
        self.conv_h = Conv2d(2 * channels, channels, 3, rng)

    def gates(self, h: Tensor, m: Tensor) -> tuple[Tensor, Tensor]:
        c = self.channels
        n, _, hh, ww = h.shape
        zr = T.sigmoid(self.conv_zr(T.concat_channels([h, m])))
        # channel split expressed as a reshape so one op carries both gates
        zr = zr.reshape(n, 2, c, hh, ww)
        z = T.index_axis1(zr, 0)
        r = T.index_axis1(zr, 1)
        return z, r

    def forward(self, h: Tensor, m: Tensor) -> Tensor:
        if h.shape != m.shape:
            raise DimensionError(f"state {h.shape} and message {m.shape} differ")
        z, r = self.gates(h, m)
        cand = T.tanh(self.conv_h(T.concat_channels([r * h, m])))
        return (1.0 - z) * h + z * cand


class SeqOp(Module):
    """conv1x1 -> BN -> ReLU -> conv1x1 -> BN."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, hidden, 1, rng)
        self.bn1 = BatchNorm2d(hidden)
        self.conv2 = Conv2d(hidden, channels, 1, rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))


class ChannelAttention(Module):
    """Squeeze-excitation: gap -> 1x1 -> ReLU -> 1x1 -> sigmoid, rescale channels."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Conv2d(channels, hidden, 1, rng)
        self.fc2 = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        w = T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))
        return x * w


class Readout(Module):
    """Motion-appearance readout over the neighbor-updated states of one node.

    With ``literal=True`` the stage output is the sigmoid gate itself rather
    than the gated features.
    """

    def __init__(self, channels: int, rng: np.random.Generator, literal: bool = False):
        hidden = max(channels // 4, 4)
        self.attention = ChannelAttention(channels, hidden, rng)
        self.global_op = SeqOp(channels, hidden, rng)
        self.local_op = SeqOp(channels, hidden, rng)
        self.literal = literal

    def gate_logits(self, u: Tensor) -> Tensor:
        a = self.attention(u)
        return self.global_op(T.global_avg_pool(a)) + self.local_op(a)

    def forward(self, u_set: list[Tensor]) -> Tensor:
        if len(u_set) != 2:
            raise ValueError(f"readout expects 2 neighbor states, got {len(u_set)}")
        outs = []
        for u in u_set:
            g = T.sigmoid(self.gate_logits(u))
            outs.append(g if self.literal else u * g)
        return (outs[0] + outs[1]) * 0.5


class GraphStage(Module):
    """One encoder stage: backbone, soft attention, message passing, readout."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, rank_divisor: int = 8,
                 literal_readout: bool = False):
        self.frame_backbone = BackboneStage(cin, cout, rng)
        self.flow_backbone = BackboneStage(cin, cout, rng)
        self.attention = SoftAttention(cout, rng)
        self.edges = EdgeWeights(cout, low_rank(cout, rank_divisor), rng)
        self.gru = ConvGRU(cout, rng)
        self.readout = Readout(cout, rng, literal_readout)

    def initial_states(self, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for t in NODES:
            backbone = self.flow_backbone if t == "O_k" else self.frame_backbone
            out[t] = self.attention(backbone(inputs[t]))
        return out

    def message_round(self, h: dict[str, Tensor], graph: GraphSpec) -> dict[str, dict[str, Tensor]]:
        """One round of affinity -> message -> ConvGRU; returns U[t][u].

        All directed edges share the ConvGRU, so they are run as one batch.
        """
        e = {}
        for t, u in PAIRS:
            e[t, u], e[u, t] = edge_affinity(h[t], h[u], self.edges)
        directed = [(t, u) for t in graph.nodes for u in graph.neighbors(t)]
        states = T.stack_batch([h[t] for t, _ in directed])
        messages = T.stack_batch([aggregate_message(h[u], e[t, u]) for t, u in directed])
        updated = T.split_batch(self.gru(states, messages), len(directed))
        out: dict[str, dict[str, Tensor]] = {t: {} for t in graph.nodes}
        for (t, u), value in zip(directed, updated):
            out[t][u] = value
        return out

    def forward(self, inputs: dict[str, Tensor], graph: GraphSpec) -> dict[str, Tensor]:
        h = self.initial_states(inputs)
        for it in range(graph.message_iterations):
            updates = self.message_round(h, graph)
            if it + 1 < graph.message_iterations:
                h = {}
                for t, ut in updates.items():
                    first, second = ut.values()
                    h[t] = (first + second) * 0.5
        return {t: self.readout(list(updates[t].values())) for t in graph.nodes}


class HierarchicalEncoder(Module):
    def __init__(self, rng: np.random.Generator, base: int = 16, message_iterations: int = 1,
                 rank_divisor: int = 8, literal_readout: bool = False, in_channels: int = 3):
        self.graph = GraphSpec(message_iterations=message_iterations)
        chans = stage_channels(base)
        cins = [in_channels] + chans[:-1]
        self.stages = [GraphStage(ci, co, rng, rank_divisor, literal_readout) for ci, co in zip(cins, chans)]
        self.channels = chans

    def forward(self, frame_k: Tensor, flow_rgb: Tensor, frame_k1: Tensor) -> list[dict[str, Tensor]]:
        """Returns, for stages 2..5 in order, the readout output Q of every node."""
        if not (frame_k.shape == flow_rgb.shape == frame_k1.shape):
            raise DimensionError("frames and flow image must share a shape")
        h, w = frame_k.shape[2:]
        if h % 16 or w % 16:
            raise DimensionError(f"input size {h}x{w} must be divisible by 16")
        x = {"I_k": frame_k, "O_k": flow_rgb, "I_k1": frame_k1}
        outs = []
        for stage in self.stages:
            x = stage(x, self.graph)
            outs.append(x)
        return outs
