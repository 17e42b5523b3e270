"""Loss, optimizer, augmentation and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import checkpoint, metrics
from . import tensor as T
from .model import HGPU, ModelConfig, preprocess
from .synthdata import VideoSequence
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    rotation_range_degrees: tuple = (-10.0, 10.0)
    flip_probability: float = 0.5
    pairs_per_sequence: int = 1
    val_pairs_per_sequence: int = 1
    zero_flow: bool = False

    def __post_init__(self):
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")
        lo, hi = self.rotation_range_degrees
        if lo != -hi:
            raise ValueError("rotation range must be symmetric")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------------- loss
def class_balance_weights(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels weigh |bg|/|total|, background pixels |fg|/|total|.

    Masks missing either class fall back to uniform weight 1.
    """
    m = np.asarray(mask) > 0
    total = m.size
    fg = int(np.count_nonzero(m))
    bg = total - fg
    if fg == 0 or bg == 0:
        return np.ones(m.shape)
    return np.where(m, bg / total, fg / total)


def weighted_bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Class-balanced binary cross-entropy.

    Each frame's loss is normalized by its own pixel count; frames in the
    batch are summed, so the per-sample gradient does not shrink with batch size.

    Args:
        pred: probabilities [N,1,H,W] (or any shape matching ``target``).
        target: binary masks, same number of elements per frame.
    """
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    n = pred.shape[0]
    weights = np.stack([class_balance_weights(t) for t in target]).reshape(pred.shape)
    p = T.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(p) * target + T.log(1.0 - p) * (1.0 - target)
    per_pixel = pred.size // n
    return -(ll * weights).sum() * (1.0 / per_pixel)


# ---------------------------------------------------------------------- optimizer
class SGD:
    """Momentum SGD with per-group learning rates.

    Weight decay is added to the gradient of every parameter with more than
    one axis (conv kernels, affinity factors); vectors are exempt.
    """

    def __init__(self, groups: dict[str, tuple[float, list[tuple[str, Tensor]]]], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.groups = groups
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for lr, params in self.groups.values():
            for name, p in params:
                if p.grad is None:
                    continue
                g = p.grad
                if self.weight_decay and p.ndim > 1:
                    g = g + self.weight_decay * p.data
                v = self.velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[id(p)] = v
                p.data -= lr * v

    def zero_grad(self) -> None:
        for _, params in self.groups.values():
            for _, p in params:
                p.grad = None


def make_optimizer(model: HGPU, cfg: TrainConfig) -> SGD:
    groups = model.param_groups()
    return SGD({"encoder": (cfg.lr_encoder, groups["encoder"]), "decoder": (cfg.lr_decoder, groups["decoder"])},
               cfg.momentum, cfg.weight_decay)


# ---------------------------------------------------------------------- augmentation
@dataclass
class Sample:
    frame_k: np.ndarray  # [H,W,3] uint8
    frame_k1: np.ndarray
    flow_rgb: np.ndarray
    mask_k: np.ndarray  # [H,W] {0,1}
    mask_k1: np.ndarray


def _rotate(img: np.ndarray, angle: float, order: int) -> np.ndarray:
    out = ndimage.rotate(img.astype(np.float64), angle, axes=(1, 0), reshape=False, order=order, mode="nearest")
    return out


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    """Same random flip + rotation for frames, flow image and masks."""
    flip = rng.random() < cfg.flip_probability
    lo, hi = cfg.rotation_range_degrees
    angle = float(rng.uniform(lo, hi)) if hi > lo else 0.0
    return transform_sample(sample, flip, angle)


def transform_sample(sample: Sample, flip: bool, angle: float) -> Sample:
    def img(x):
        x = x[:, ::-1] if flip else x
        if angle:
            x = np.clip(np.round(_rotate(x, angle, 1)), 0, 255)
        return np.ascontiguousarray(x, dtype=np.uint8)

    def msk(x):
        x = x[:, ::-1] if flip else x
        if angle:
            x = _rotate(x, angle, 0) > 0.5
        return np.ascontiguousarray(x, dtype=np.uint8)

    return Sample(img(sample.frame_k), img(sample.frame_k1), img(sample.flow_rgb),
                  msk(sample.mask_k), msk(sample.mask_k1))


def pair_sample(seq: VideoSequence, k: int, zero_flow: bool = False) -> Sample:
    flow = seq.flow_rgb[k]
    if zero_flow:
        flow = np.full_like(flow, 255)  # colorization of an all-zero field
    return Sample(seq.frames[k], seq.frames[k + 1], flow, seq.masks[k], seq.masks[k + 1])


def batch_tensors(samples: list[Sample]) -> tuple[Tensor, Tensor, Tensor, np.ndarray, np.ndarray]:
    fk = preprocess(np.stack([s.frame_k for s in samples]))
    fk1 = preprocess(np.stack([s.frame_k1 for s in samples]))
    fl = preprocess(np.stack([s.flow_rgb for s in samples]))
    mk = np.stack([s.mask_k for s in samples])
    mk1 = np.stack([s.mask_k1 for s in samples])
    return fk, fl, fk1, mk, mk1


def pair_loss(model: HGPU, samples: list[Sample]) -> Tensor:
    """Sum of the balanced BCE over both frame predictions of each pair."""
    fk, fl, fk1, mk, mk1 = batch_tensors(samples)
    out = model(fk, fl, fk1)
    return weighted_bce(out.refined["I_k"], mk) + weighted_bce(out.refined["I_k1"], mk1)


# ---------------------------------------------------------------------- inference
def predict_sequence(model: HGPU, seq: VideoSequence, zero_flow: bool = False, batch_size: int = 8) -> np.ndarray:
    """Probability map per frame.

    Frame k comes from the (k, k+1) pair; the last frame from its trailing pair.
    """
    was_training = model.training
    model.eval()
    n = len(seq)
    probs = np.zeros((n,) + seq.frames.shape[1:3])
    pairs = list(range(n - 1))
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            ks = pairs[start:start + batch_size]
            fk, fl, fk1, _, _ = batch_tensors([pair_sample(seq, k, zero_flow) for k in ks])
            out = model(fk, fl, fk1)
            for i, k in enumerate(ks):
                probs[k] = out.refined["I_k"].data[i, 0]
                if k == n - 2:
                    probs[k + 1] = out.refined["I_k1"].data[i, 0]
    model.train(was_training)
    return probs


def evaluate(model: HGPU, sequences: dict[str, VideoSequence], zero_flow: bool = False
             ) -> tuple[list[metrics.FrameScore], metrics.AggregateReport]:
    scores = []
    for seq_id in sorted(sequences):
        seq = sequences[seq_id]
        preds = metrics.binarize(predict_sequence(model, seq, zero_flow))
        scores += metrics.score_sequence(seq_id, preds, seq.masks.astype(bool))
    return scores, metrics.aggregate(scores)


def quick_val_j(model: HGPU, sequences: dict[str, VideoSequence], pairs: list[tuple[str, int]],
                zero_flow: bool = False, batch_size: int = 8) -> float:
    """Mean J over a fixed set of validation pairs (both frames of each pair)."""
    was_training = model.training
    model.eval()
    js = []
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            samples = [pair_sample(sequences[s], k, zero_flow) for s, k in chunk]
            fk, fl, fk1, mk, mk1 = batch_tensors(samples)
            out = model(fk, fl, fk1)
            for i in range(len(chunk)):
                js.append(metrics.region_j(out.refined["I_k"].data[i, 0] >= 0.5, mk[i]))
                js.append(metrics.region_j(out.refined["I_k1"].data[i, 0] >= 0.5, mk1[i]))
    model.train(was_training)
    return float(np.mean(js))


# ---------------------------------------------------------------------- loop
@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_j: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_j,seconds\n"]
        for i, (l, j, s) in enumerate(zip(self.train_loss, self.val_j, self.epoch_seconds), start=1):
            rows.append(f"{i},{l!r},{j!r},{s:.2f}\n")
        return "".join(rows)


def model_meta(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> dict[str, str]:
    meta = {f"model.{k}": str(v) for k, v in vars(model_cfg).items()}
    if train_cfg is not None:
        meta["train.zero_flow"] = str(train_cfg.zero_flow)
    return meta


def save_model(path: Path, model: HGPU, train_cfg: TrainConfig | None = None) -> None:
    checkpoint.save(path, model.state_dict(), model_meta(model.config, train_cfg))


def load_model(path: Path) -> tuple[HGPU, dict[str, str]]:
    tensors, meta = checkpoint.load(path)
    kwargs = {}
    for k, v in meta.items():
        if not k.startswith("model."):
            continue
        key = k[len("model."):]
        kwargs[key] = v == "True" if v in ("True", "False") else int(v)
    model = HGPU(ModelConfig(**kwargs))
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def train_loop(model: HGPU, train_seqs: dict[str, VideoSequence], val_seqs: dict[str, VideoSequence],
               cfg: TrainConfig, out_dir: Path | None = None, on_epoch=None) -> History:
    """Train with a seeded sample order; keeps the checkpoint with the best val J."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg)
    history = History()
    train_ids = sorted(train_seqs)
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_pairs = []
    for s in sorted(val_seqs):
        n_pairs = len(val_seqs[s]) - 1
        ks = val_rng.choice(n_pairs, size=min(cfg.val_pairs_per_sequence, n_pairs), replace=False)
        val_pairs += [(s, int(k)) for k in sorted(ks)]
    best = -math.inf
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        items = []
        for s in train_ids:
            n_pairs = len(train_seqs[s]) - 1
            ks = rng.choice(n_pairs, size=min(cfg.pairs_per_sequence, n_pairs), replace=False)
            items += [(s, int(k)) for k in ks]
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            samples = [augment(pair_sample(train_seqs[s], k, cfg.zero_flow), rng, cfg) for s, k in batch]
            opt.zero_grad()
            loss = pair_loss(model, samples)
            loss.backward()
            opt.step()
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            losses.append(float(loss.data))
        history.train_loss.append(float(np.mean(losses)) if losses else 0.0)
        vj = quick_val_j(model, val_seqs, val_pairs, cfg.zero_flow) if val_pairs else 0.0
        history.val_j.append(vj)
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f val_j %.4f (%.1fs)", epoch, history.train_loss[-1], vj,
                 history.epoch_seconds[-1])
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            if vj > best:
                save_model(out_dir / "best.ckpt", model, cfg)
            save_model(out_dir / "last.ckpt", model, cfg)
            (out_dir / "loss_curve.csv").write_text(history.to_csv())
        if vj > best:
            best = vj
            history.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, history)
    return history
