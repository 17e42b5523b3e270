"""Motion-appearance understanding decoder.

Frame-node features are channel-gated (MACU), the flow-node features build
a motion reference map, a per-stage ASPP head produces a coarse map for
each frame, and the coarse map is refined by the motion reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FRAME_NODES
from .nn import Conv2d, Module
from .tensor import DimensionError, Tensor

ASPP_DILATIONS = (2, 4, 6)


class Macu(Module):
    """Channel gate 1 + tanh(w_b * channel_norm(w_a * ||Q_c||) + w_c).

    Initialised to the identity (w_a = 1, w_b = w_c = 0).
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.w_a = T.parameter(np.ones(channels))
        self.w_b = T.parameter(np.zeros(channels))
        self.w_c = T.parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, q: Tensor) -> Tensor:
        c = q.shape[1]
        if c != self.w_a.shape[0]:
            raise DimensionError(f"MACU built for {self.w_a.shape[0]} channels, got {c}")
        s = T.l2_normalize_spatial(q, self.eps) * self.w_a.reshape(1, c, 1, 1)
        n = T.channel_normalize(s, self.eps)
        gate = 1.0 + T.tanh(n * self.w_b.reshape(1, c, 1, 1) + self.w_c.reshape(1, c, 1, 1))
        return q * gate


class StageReference(Module):
    """sigmoid(conv1x1(conv3x3(Q))) -> one-channel map at stage resolution."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.conv3 = Conv2d(channels, hidden, 3, rng)
        self.conv1 = Conv2d(hidden, 1, 1, rng)

    def forward(self, q: Tensor) -> Tensor:
        return T.sigmoid(self.conv1(self.conv3(q)))


class MotionReference(Module):
    def __init__(self, channels: list[int], rng: np.random.Generator, hidden: int = 8):
        self.stages = [StageReference(c, hidden, rng) for c in channels]
        self.pred = Conv2d(len(channels), 1, 3, rng)

    def forward(self, q_flow: list[Tensor], out_hw: tuple[int, int]) -> tuple[Tensor, list[Tensor]]:
        if len(q_flow) != len(self.stages):
            raise ValueError(f"motion reference needs {len(self.stages)} stage features, got {len(q_flow)}")
        per_stage = [s(q) for s, q in zip(self.stages, q_flow)]
        up = [T.upsample_bilinear(r, *out_hw) for r in per_stage]
        return T.sigmoid(self.pred(T.concat_channels(up))), per_stage


class Aspp(Module):
    """1x1, three dilated 3x3 and an image-pool branch fused to a single logit."""

    def __init__(self, cin: int, width: int, rng: np.random.Generator, dilations=ASPP_DILATIONS):
        self.branch_1x1 = Conv2d(cin, width, 1, rng)
        self.branch_dilated = [Conv2d(cin, width, 3, rng, dilation=d) for d in dilations]
        self.branch_pool = Conv2d(cin, width, 1, rng)
        self.fuse = Conv2d(width * (2 + len(dilations)), 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        branches = [T.relu(self.branch_1x1(x))]
        branches += [T.relu(conv(x)) for conv in self.branch_dilated]
        pooled = T.relu(self.branch_pool(T.global_avg_pool(x)))
        branches.append(T.upsample_bilinear(pooled, h, w))
        return self.fuse(T.concat_channels(branches))


def coarse_segmentation(q_hat: list[Tensor], refs: list[Tensor], heads: list[Aspp],
                        out_hw: tuple[int, int]) -> Tensor:
    """Sum of per-stage ASPP logits at full resolution, squashed by a sigmoid."""
    logits = None
    for q, r, head in zip(q_hat, refs, heads):
        if q.shape[2:] != r.shape[2:]:
            raise DimensionError(f"stage features {q.shape} and reference {r.shape} misaligned")
        up = T.upsample_bilinear(head(T.concat_channels([q, r])), *out_hw)
        logits = up if logits is None else logits + up
    return T.sigmoid(logits)


def refine(p: Tensor, r: Tensor) -> Tensor:
    """Hadamard refinement of a coarse map by the motion reference."""
    for name, t in (("coarse map", p), ("reference", r)):
        if t.data.min() < 0.0 or t.data.max() > 1.0:
            raise ValueError(f"{name} outside [0, 1]")
    return T.hadamard(p, r)


@dataclass
class SegmentationOutput:
    reference: Tensor
    stage_references: list[Tensor]
    coarse: dict[str, Tensor]
    refined: dict[str, Tensor]


class MotionAppearanceDecoder(Module):
    def __init__(self, channels: list[int], rng: np.random.Generator, aspp_width: int = 16):
        self.macu = [Macu(c) for c in channels]
        self.reference = MotionReference(channels, rng)
        self.aspp = [Aspp(c + 1, aspp_width, rng) for c in channels]

    def forward(self, stages: list[dict[str, Tensor]], out_hw: tuple[int, int]) -> SegmentationOutput:
        r, r_stage = self.reference([s["O_k"] for s in stages], out_hw)
        coarse, refined = {}, {}
        for t in FRAME_NODES:
            q_hat = [m(s[t]) for m, s in zip(self.macu, stages)]
            coarse[t] = coarse_segmentation(q_hat, r_stage, self.aspp, out_hw)
            refined[t] = refine(coarse[t], r)
        return SegmentationOutput(r, r_stage, coarse, refined)
