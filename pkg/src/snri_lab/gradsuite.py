"""Finite-difference checks for every primitive and for the joint loss on a
miniature instance (T=256, D_e=8, D_b=6, K=3)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .audio import make_mel_filterbank
from .models import (Backend, BackendConfig, PredNet, PredNetConfig, SnriNet, SnriNetConfig,
                     joint_loss)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool

    def __post_init__(self):
        self.max_rel_error = float(self.max_rel_error)
        self.passed = bool(self.passed)


def _weighted_sum(out: G.Tensor, rng: np.random.Generator) -> tuple:
    r = rng.standard_normal(out.shape)
    return lambda t: G.sum_(G.mul(t, G.Tensor(r)))


def primitive_cases(seed: int = 0) -> dict:
    """name -> (params, build) with ``build(params)`` returning the forward output."""
    rng = np.random.default_rng(seed)

    def p(*shape, lo=None):
        v = rng.standard_normal(shape)
        if lo is not None:
            v = lo + np.abs(v)
        return G.parameter(v)

    def away_from_zero(*shape):
        v = rng.standard_normal(shape)
        return G.parameter(np.sign(v) * (0.1 + np.abs(v)))

    fb = make_mel_filterbank(4, 8.0, 4.0)
    return {
        "add": ({"a": p(3, 4), "b": p(3, 4)}, lambda q: G.add(q["a"], q["b"])),
        "sub": ({"a": p(3, 4), "b": p(3, 4)}, lambda q: G.sub(q["a"], q["b"])),
        "mul": ({"a": p(3, 4), "b": p(3, 4)}, lambda q: G.mul(q["a"], q["b"])),
        "scalar_mul": ({"a": p(3, 4), "c": p()}, lambda q: G.mul(q["a"], q["c"])),
        "matmul": ({"a": p(2, 3, 4), "b": p(4, 5)}, lambda q: G.matmul(q["a"], q["b"])),
        "batched_matmul": ({"a": p(2, 3, 4), "b": p(2, 4, 5)}, lambda q: G.matmul(q["a"], q["b"])),
        "conv1d": ({"x": p(2, 16, 3), "w": p(3, 3, 4)},
                   lambda q: G.conv1d(q["x"], q["w"], stride=2, dilation=2, padding=(1, 2))),
        "conv1d_8x16": ({"x": p(8, 16, 1), "w": p(4, 1, 2)}, lambda q: G.conv1d(q["x"], q["w"])),
        "transposed_conv1d": ({"x": p(2, 5, 3), "w": p(4, 3, 2)},
                              lambda q: G.transposed_conv1d(q["x"], q["w"], stride=2)),
        "concat": ({"a": p(2, 3, 4), "b": p(2, 3, 1)}, lambda q: G.concat([q["a"], q["b"]], axis=-1)),
        "concat_axis0": ({"a": p(2, 3), "b": p(1, 3)}, lambda q: G.concat([q["a"], q["b"]], axis=0)),
        "mean_pool_time": ({"x": p(2, 5, 3)}, lambda q: G.mean_pool_time(q["x"])),
        "relu": ({"x": away_from_zero(3, 4)}, lambda q: G.relu(q["x"])),
        "sigmoid": ({"x": p(3, 4)}, lambda q: G.sigmoid(q["x"])),
        "tanh": ({"x": p(3, 4)}, lambda q: G.tanh(q["x"])),
        "log": ({"x": p(3, 4, lo=0.2)}, lambda q: G.log(q["x"])),
        "square": ({"x": p(3, 4)}, lambda q: G.square(q["x"])),
        "sum": ({"x": p(3, 4)}, lambda q: G.sum_(q["x"], axis=1)),
        "mean": ({"x": p(3, 4)}, lambda q: G.mean(q["x"], axis=0, keepdims=True)),
        "layer_norm": ({"x": p(2, 3, 5), "g": p(5), "b": p(5)},
                       lambda q: G.layer_norm(q["x"], q["g"], q["b"])),
        "mel_apply": ({"x": p(2, 3, fb.n_bins, lo=0.1)}, lambda q: G.mel_apply(q["x"], fb.weights)),
        "slice": ({"x": p(3, 6)}, lambda q: q["x"][:, 1:4]),
        "reshape": ({"x": p(3, 4)}, lambda q: G.reshape(q["x"], (2, 6))),
        "expand": ({"x": p(1, 4)}, lambda q: G.expand(q["x"], (3, 4))),
        "log_softmax": ({"x": p(3, 4)}, lambda q: G.log_softmax(q["x"])),
        "stop_gradient_sum": ({"x": p(3)},
                              lambda q: G.add(G.square(q["x"]), G.stop_gradient(G.square(q["x"])))),
    }


def check_primitives(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for name, (params, build) in primitive_cases(seed).items():
        if name == "stop_gradient_sum":
            # the barriered copy moves under finite differences, so compare with 2x directly
            x = params["x"]
            g = G.backward(G.sum_(build(params)), [x])[x]
            err = float(np.max(np.abs(g - 2 * x.value)))
            out.append(CheckResult(name, err, x.value.size, err <= tol))
            continue
        rng = np.random.default_rng([seed, len(name)])
        weigh = _weighted_sum(build(params), rng)
        rep = G.grad_check(lambda: weigh(build(params)), params, tol=tol, max_coords=None)
        out.append(CheckResult(name, float(rep.max_rel_error), rep.n_checked, bool(rep.passed)))
    return out


# ------------------------------------------------------------------ miniature

def miniature(seed: int = 0):
    """SNRi-Net, predictor and backend at toy size, plus one fixed batch."""
    snri_net = SnriNet(SnriNetConfig(encoder_basis=8, bottleneck=6, window_ms=2.5, hop_ms=1.25,
                                     n_blocks=1, hidden=8, train_basis=True), seed=seed)
    pred_net = PredNet(PredNetConfig(n_blocks=1, hidden=6, n_mels=8, window_ms=8.0, hop_ms=4.0),
                       seed=seed)
    backend = Backend(BackendConfig(n_classes=3, n_blocks=1, hidden=6, n_mels=8, window_ms=8.0,
                                    hop_ms=4.0), seed=seed)
    rng = np.random.default_rng([seed, 99])
    # non-zero mask logits and predictor output so no term sits at a symmetric point
    for net in (snri_net, pred_net, backend):
        for name, t in net.params.items():
            if name.endswith(".b") or (name.startswith("mask.") and name != "mask.w"):
                t.value = 0.1 * rng.standard_normal(t.shape)
    s = rng.standard_normal((2, 256)) * 0.5
    n = rng.standard_normal((2, 256)) * 0.3
    labels = np.array([0, 2])
    return snri_net, pred_net, backend, (s + n, s, n, labels)


def _named(nets: dict) -> dict:
    return {f"{g}/{k}": t for g, net in nets.items() for k, t in net.params.items()}


def check_joint(seed: int = 0, tol: float = 1e-4, max_coords: int = 12) -> list[CheckResult]:
    """Full proposed loss w.r.t. SNRi-Net and backend; task term w.r.t. the predictor
    (the SNRi term reaches it only through the barrier)."""
    snri_net, pred_net, backend, (x, s, n, labels) = miniature(seed)

    def terms():
        return joint_loss(x, s, n, labels, snri_net, backend, "proposed", pred_net)

    out = []
    live = _named({"snri_net": snri_net, "backend": backend})
    rep = G.grad_check(lambda: terms().total, live, tol=tol, max_coords=max_coords, seed=seed)
    out.append(CheckResult("joint_total/snri_net+backend", rep.max_rel_error, rep.n_checked,
                           rep.passed))
    pred = _named({"pred_net": pred_net})
    rep = G.grad_check(lambda: terms().task, pred, tol=tol, max_coords=max_coords, seed=seed)
    out.append(CheckResult("joint_task/pred_net", rep.max_rel_error, rep.n_checked, rep.passed))
    g_total = G.backward(terms().total, pred.values())
    g_task = G.backward(terms().task, pred.values())
    same = all(np.array_equal(g_total[t], g_task[t]) for t in pred.values())
    out.append(CheckResult("joint_total/pred_net == task/pred_net", 0.0 if same else 1.0,
                           len(pred), same))
    baseline_net = SnriNet(SnriNetConfig(encoder_basis=8, bottleneck=6, window_ms=2.5,
                                         hop_ms=1.25, n_blocks=1, hidden=8, conditioned=False,
                                         train_basis=True), seed=seed)
    params = _named({"snri_net": baseline_net, "backend": backend})
    rep = G.grad_check(lambda: joint_loss(x, s, n, labels, baseline_net, backend, "baseline").total,
                       params, tol=tol, max_coords=max_coords, seed=seed)
    out.append(CheckResult("baseline_total", rep.max_rel_error, rep.n_checked, rep.passed))
    return out


def stop_gradient_split(seed: int = 0) -> dict:
    """Per-term gradient norms on the predictor for the miniature instance."""
    snri_net, pred_net, backend, (x, s, n, labels) = miniature(seed)
    pred = list(pred_net.params.values())
    norms = {}
    for which in ("se", "task"):
        terms = joint_loss(x, s, n, labels, snri_net, backend, "proposed", pred_net)
        g = G.backward(getattr(terms, which), pred)
        norms[which] = float(np.sqrt(sum(np.sum(g[t] ** 2) for t in pred)))
        norms[f"{which}_max_abs"] = float(max(np.max(np.abs(g[t])) for t in pred))
    return norms


def run_all(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    return check_primitives(seed, tol) + check_joint(seed, tol)
