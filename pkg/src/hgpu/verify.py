"""Finite-difference checks for every layer type and the end-to-end model."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .decoder import Aspp, Macu, MotionReference
from .encoder import ConvGRU, EdgeWeights, Readout, aggregate_message, edge_affinity
from .gradcheck import GradReport, finite_diff_check
from .model import HGPU, ModelConfig
from .nn import BatchNorm2d, Conv2d
from .train import weighted_bce

TOLERANCE = 1e-4
STEP = 1e-5
END_TO_END_COORDS = 200


@dataclass
class CheckResult:
    name: str
    worst: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<16} max_rel_err={self.worst:.3e} coords={self.n_coords}"


def _leaf(rng, *shape, scale=1.0):
    return T.parameter(rng.uniform(-scale, scale, shape))


def _projection(out: T.Tensor, rng) -> T.Tensor:
    # fixed random projection turns any output into a scalar with dense gradient
    return (out * rng.uniform(-1, 1, out.shape)).sum()


def _named(prefix: str, module) -> list:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def check_conv(rng):
    x = _leaf(rng, 2, 3, 8, 8)
    convs = [Conv2d(3, 4, 3, rng), Conv2d(3, 4, 3, rng, stride=2), Conv2d(3, 4, 3, rng, dilation=2),
             Conv2d(3, 4, 1, rng)]
    for c in convs:
        c.bias.data[:] = rng.uniform(-1, 1, c.bias.shape)
    proj = [rng.uniform(-1, 1, c(x).shape) for c in convs]

    def f():
        return sum((c(x) * p).sum() for c, p in zip(convs, proj))

    params = [("x", x)] + [p for i, c in enumerate(convs) for p in _named(f"conv{i}", c)]
    return f, params


def check_bn(rng):
    x = _leaf(rng, 3, 4, 5, 5)
    bn = BatchNorm2d(4)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    bn.beta.data[:] = rng.uniform(-1, 1, 4)
    proj = rng.uniform(-1, 1, x.shape)
    return (lambda: (bn(x) * proj).sum()), [("x", x)] + _named("bn", bn)


def check_gru(rng):
    h, m = _leaf(rng, 2, 4, 6, 6), _leaf(rng, 2, 4, 6, 6)
    gru = ConvGRU(4, rng)
    proj = rng.uniform(-1, 1, h.shape)
    return (lambda: (gru(h, m) * proj).sum()), [("h", h), ("m", m)] + _named("gru", gru)


def check_message(rng):
    ht, hu = _leaf(rng, 2, 8, 4, 4), _leaf(rng, 2, 8, 4, 4)
    w = EdgeWeights(8, 4, rng)
    proj_t, proj_u = rng.uniform(-1, 1, ht.shape), rng.uniform(-1, 1, hu.shape)

    def f():
        e_tu, e_ut = edge_affinity(ht, hu, w)
        return (aggregate_message(hu, e_tu) * proj_t).sum() + (aggregate_message(ht, e_ut) * proj_u).sum()

    return f, [("h_t", ht), ("h_u", hu)] + _named("edge", w)


def check_readout(rng):
    u1, u2 = _leaf(rng, 3, 8, 4, 4), _leaf(rng, 3, 8, 4, 4)
    ro = Readout(8, rng)
    proj = rng.uniform(-1, 1, u1.shape)
    return (lambda: (ro([u1, u2]) * proj).sum()), [("u1", u1), ("u2", u2)] + _named("readout", ro)


def check_macu(rng):
    q = _leaf(rng, 2, 6, 5, 5)
    macu = Macu(6)
    for p in (macu.w_a, macu.w_b, macu.w_c):
        p.data[:] = rng.uniform(-1, 1, p.shape)
    proj = rng.uniform(-1, 1, q.shape)
    return (lambda: (macu(q) * proj).sum()), [("q", q)] + _named("macu", macu)


def check_aspp(rng):
    x = _leaf(rng, 2, 5, 8, 8)
    head = Aspp(5, 4, rng)
    for _, p in head.named_parameters():
        if p.ndim == 1:
            p.data[:] = rng.uniform(-0.5, 0.5, p.shape)
    proj = rng.uniform(-1, 1, (2, 1, 8, 8))
    return (lambda: (head(x) * proj).sum()), [("x", x)] + _named("aspp", head)


def check_reference(rng):
    qs = [_leaf(rng, 1, c, s, s) for c, s in ((4, 8), (8, 4), (8, 2), (8, 1))]
    ref = MotionReference([4, 8, 8, 8], rng, hidden=3)
    proj = rng.uniform(-1, 1, (1, 1, 16, 16))

    def f():
        r, _ = ref(qs, (16, 16))
        return (r * proj).sum()

    return f, [(f"q{i}", q) for i, q in enumerate(qs)] + _named("ref", ref)


def check_loss(rng):
    logits = _leaf(rng, 2, 1, 8, 8, scale=3.0)
    masks = rng.random((2, 8, 8)) < 0.3
    return (lambda: weighted_bce(T.sigmoid(logits), masks)), [("logits", logits)]


def check_end_to_end(rng):
    model = HGPU(ModelConfig(base=8, seed=int(rng.integers(1 << 31))))
    model.train()
    xs = [T.Tensor(rng.uniform(-1, 1, (1, 3, 32, 32))) for _ in range(3)]
    masks = [rng.random((1, 32, 32)) < 0.3 for _ in range(2)]

    def f():
        out = model(*xs)
        return weighted_bce(out.refined["I_k"], masks[0]) + weighted_bce(out.refined["I_k1"], masks[1])

    return f, list(model.named_parameters())


LAYER_CHECKS: dict[str, Callable] = {
    "conv2d": check_conv,
    "batch_norm": check_bn,
    "conv_gru": check_gru,
    "affinity+message": check_message,
    "readout": check_readout,
    "macu": check_macu,
    "aspp": check_aspp,
    "motion_reference": check_reference,
    "weighted_bce": check_loss,
}


@contextlib.contextmanager
def corrupted(op: str, factor: float = 1.01) -> Iterator[None]:
    """Test hook: scale the backward of every tensor op named ``op``."""
    original = T._make

    def patched(data, parents, backward, name):
        if name == op:
            inner = backward

            def backward(g):
                return tuple(None if r is None else r * factor for r in inner(g))

        return original(data, parents, backward, name)

    T._make = patched
    try:
        yield
    finally:
        T._make = original


def run_all(seed: int = 0, end_to_end_coords: int = END_TO_END_COORDS, per_param: int = 6,
            corrupt_op: str | None = None) -> list[CheckResult]:
    results = []
    ctx = corrupted(corrupt_op) if corrupt_op else contextlib.nullcontext()
    with ctx:
        for i, (name, build) in enumerate(LAYER_CHECKS.items()):
            rng = np.random.default_rng([seed, i])
            f, params = build(rng)
            rep = finite_diff_check(f, params, h=STEP, n_samples=per_param, rng=rng)
            results.append(CheckResult(name, rep.worst, sum(rep.n_checked.values())))
        rng = np.random.default_rng([seed, len(LAYER_CHECKS)])
        f, params = check_end_to_end(rng)
        rep: GradReport = finite_diff_check(f, params, h=STEP, budget=end_to_end_coords, rng=rng)
        results.append(CheckResult("end_to_end", rep.worst, sum(rep.n_checked.values())))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILED'} ({sum(r.passed for r in results)}/{len(results)})")
    return "\n".join(lines) + "\n"
