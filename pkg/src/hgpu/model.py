"""End-to-end model: encoder + decoder over a (frame, flow, frame) triplet."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import MotionAppearanceDecoder, SegmentationOutput
from .encoder import HierarchicalEncoder
from .nn import Module
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    base: int = 16
    message_iterations: int = 1
    rank_divisor: int = 8
    literal_readout: bool = False
    aspp_width: int = 16
    seed: int = 0


def preprocess(images: np.ndarray) -> Tensor:
    """uint8 [N,H,W,3] (or [H,W,3]) -> float NCHW roughly centred on zero."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return Tensor((x.transpose(0, 3, 1, 2) / 255.0 - 0.5) * 4.0)


class HGPU(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = HierarchicalEncoder(rng, config.base, config.message_iterations,
                                           config.rank_divisor, config.literal_readout)
        self.decoder = MotionAppearanceDecoder(self.encoder.channels, rng, config.aspp_width)

    def forward(self, frame_k: Tensor, flow_rgb: Tensor, frame_k1: Tensor) -> SegmentationOutput:
        stages = self.encoder(frame_k, flow_rgb, frame_k1)
        return self.decoder(stages, frame_k.shape[2:])

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {
            "encoder": list(self.encoder.named_parameters("encoder.")),
            "decoder": list(self.decoder.named_parameters("decoder.")),
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {name for name, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for m_name, bn in self._bn_states():
            bn.running_mean = np.array(state[m_name + ".running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[m_name + ".running_var"], dtype=np.float64)

    def _bn_states(self):
        seen = {}
        for name, _ in self.named_buffers():
            prefix = name.rsplit(".", 1)[0]
            seen[prefix] = None
        for prefix in seen:
            obj = self
            for part in prefix.split("."):
                obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
            yield prefix, obj
