"""Pretraining and joint fine-tuning loops.

Every random draw comes from ``np.random.default_rng([seed, step, purpose])``
so a run is a pure function of (config, seed, corpus) and any step can be
regenerated on its own.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import grad as G
from . import losses as L
from .audio import Corpus
from .errors import EmptyCorpus, IncompatibleCheckpoint, InvalidParams, NonFiniteValue
from .models import Backend, PredNet, SnriNet, joint_loss

# purpose tags for the hierarchical RNG
_MIX, _LAMBDA, _CURRICULUM, _CLEAN = 1, 2, 3, 4


@dataclass
class TrainConfig:
    steps: int = 2000
    finetune_steps: int = 1000
    backend_steps: int = 600
    batch_size: int = 8
    learning_rate: float = 6e-3
    backend_learning_rate: float = 3e-3
    finetune_lr_scale: float = 0.1
    skip_frontend_prob: float = 0.05
    random_lambda_prob: float = 0.25
    baseline_skip_prob: float = 0.5
    eta: float = 0.01
    gamma: float = 0.25
    beta: float = 0.01
    tau: float = 1e-3
    alpha: float = 0.8
    snr_min: float = -10.0
    snr_max: float = 30.0
    utterance_s: float = 1.0
    audit_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("skip_frontend_prob", "random_lambda_prob", "baseline_skip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidParams(f"{name} must lie in [0, 1]")
        if min(self.steps, self.finetune_steps, self.backend_steps, self.batch_size) < 1:
            raise InvalidParams("step counts and batch_size must be >= 1")
        if not self.snr_min <= self.snr_max:
            raise InvalidParams("empty SNR range")
        if not (self.learning_rate > 0 and self.finetune_lr_scale > 0):
            raise InvalidParams("learning rates must be positive")


@dataclass
class Batch:
    """Mixtures x = s + n (B, T) with labels and the corpus ids they came from."""
    x: np.ndarray
    s: np.ndarray
    n: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    speech_ids: list[str]
    noise_ids: list[str]


def step_rng(seed: int, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, purpose])


def scale_noise(s: np.ndarray, n: np.ndarray, snr_db: float) -> np.ndarray:
    k = np.sqrt(np.dot(s, s) / (np.dot(n, n) * 10.0 ** (snr_db / 10.0)))
    return k * n


def sample_batch(corpus: Corpus, rng: np.random.Generator, batch_size: int, n_samples: int,
                 snr_range: tuple[float, float], noise_pool=None) -> Batch:
    """Random speech x random noise at uniform SNR, cropped to ``n_samples``."""
    noise_pool = corpus.noise if noise_pool is None else noise_pool
    if not corpus.speech or not noise_pool:
        raise EmptyCorpus("need at least one speech and one noise entry")
    xs, ss, ns, labels, snrs, sids, nids = [], [], [], [], [], [], []
    for _ in range(batch_size):
        sp = corpus.speech[rng.integers(len(corpus.speech))]
        nz = noise_pool[rng.integers(len(noise_pool))]
        s = _crop(corpus.audio[sp.id].samples, n_samples, rng)
        n = _crop(corpus.audio[nz.id].samples, n_samples, rng)
        snr = rng.uniform(*snr_range)
        n = scale_noise(s, n, snr)
        xs.append(s + n)
        ss.append(s)
        ns.append(n)
        labels.append(sp.label)
        snrs.append(snr)
        sids.append(sp.id)
        nids.append(nz.id)
    return Batch(np.stack(xs), np.stack(ss), np.stack(ns), np.array(labels), np.array(snrs),
                 sids, nids)


def _crop(v: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    if v.size < n_samples:
        raise InvalidParams(f"corpus item of {v.size} samples is shorter than {n_samples}")
    start = int(rng.integers(v.size - n_samples + 1))
    return v[start:start + n_samples]


def draw_lambda(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    return rng.uniform(lo, hi, size=n)


# ------------------------------------------------------------------ run log

class RunLog:
    """JSON-lines log with strictly increasing step numbers per phase."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._last: dict[str, int] = {}
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        phase, step = record.get("phase", ""), record.get("step")
        if step is not None:
            if step <= self._last.get(phase, -1):
                raise ValueError(f"non-monotone step {step} in phase {phase!r}")
            self._last[phase] = step
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def event(self, phase: str, name: str, **fields) -> None:
        self.write({"phase": phase, "event": name, **fields})

    def steps(self, phase: str) -> list[dict]:
        return [r for r in self.records if r.get("phase") == phase and "step" in r]


def _check_finite(phase: str, step: int, log: RunLog, **values) -> None:
    for k, v in values.items():
        if v is not None and not np.isfinite(v):
            log.event(phase, "abort", at_step=step, reason=f"non-finite {k}")
            raise NonFiniteValue(f"{phase} step {step}: {k} = {v}")


def _run_step(phase: str, step: int, log: RunLog, build):
    try:
        return build()
    except NonFiniteValue as exc:
        log.event(phase, "abort", at_step=step, reason=str(exc))
        raise


# ------------------------------------------------------------------ pretraining

def pretrain_se(cfg: TrainConfig, corpus: Corpus, net: SnriNet, log: RunLog | None = None,
                kind: str = "snri", on_step=None) -> SnriNet:
    """``snri``: uniform-lambda SNRi-target training of a conditioned net.
    ``conventional``: thresholded-SNR training of an unconditioned net.
    ``on_step(step)`` runs after every update."""
    log = log or RunLog()
    if kind == "snri" and not net.cfg.conditioned:
        raise InvalidParams("SNRi-target training needs a conditioned SnriNet")
    if kind == "conventional" and net.cfg.conditioned:
        raise InvalidParams("conventional training expects an unconditioned SnriNet")
    if kind not in ("snri", "conventional"):
        raise InvalidParams(f"unknown pretraining kind {kind!r}")
    phase = f"pretrain_{kind}"
    n_samples = int(round(cfg.utterance_s * net.cfg.sample_rate))
    state = G.AdamState(learning_rate=cfg.learning_rate)
    log.event(phase, "start", learning_rate=cfg.learning_rate, steps=cfg.steps, seed=cfg.seed)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        b = sample_batch(corpus, step_rng(cfg.seed, step, _MIX), cfg.batch_size, n_samples,
                         (cfg.snr_min, cfg.snr_max))

        def build():
            if kind == "snri":
                lam = draw_lambda(step_rng(cfg.seed, step, _LAMBDA), cfg.batch_size,
                                  net.cfg.lambda_min, net.cfg.lambda_max)
                y1, _ = net(b.x, lam)
                total, err, sar = L.snri_target_loss(y1, b.s, b.n, lam, cfg.beta, cfg.tau)
                terms = {"loss": total.item(), "snri_err": err.item(), "sar": sar.item(),
                         "lambda_mean": float(lam.mean())}
            else:
                y1, y2 = net(b.x)
                total = L.se_loss(y1, y2, b.s, b.n, cfg.alpha, cfg.tau)
                terms = {"loss": total.item()}
            grads = G.backward(total, net.params.values())
            return terms, {k: grads[t] for k, t in net.params.items()}

        terms, grads = _run_step(phase, step, log, build)
        _check_finite(phase, step, log, **terms)
        G.adam_step(net.params, grads, state)
        log.write({"phase": phase, "step": step, **terms,
                   "wall_s": round(time.perf_counter() - t0, 3)})
        if on_step is not None:
            on_step(step)
    log.event(phase, "end", steps=cfg.steps)
    return net


def pretrain_backend(cfg: TrainConfig, corpus: Corpus, backend: Backend,
                     log: RunLog | None = None) -> Backend:
    """Task-loss training on a stream where each item is clean or noisy with equal odds."""
    log = log or RunLog()
    phase = "pretrain_backend"
    n_samples = int(round(cfg.utterance_s * backend.cfg.sample_rate))
    state = G.AdamState(learning_rate=cfg.backend_learning_rate)
    log.event(phase, "start", learning_rate=cfg.backend_learning_rate, steps=cfg.backend_steps,
              seed=cfg.seed)
    t0 = time.perf_counter()
    for step in range(cfg.backend_steps):
        b = sample_batch(corpus, step_rng(cfg.seed, step, _MIX), cfg.batch_size, n_samples,
                         (cfg.snr_min, cfg.snr_max))
        clean = step_rng(cfg.seed, step, _CLEAN).random(cfg.batch_size) < 0.5
        x = np.where(clean[:, None], b.s, b.x)

        def build():
            loss = L.task_loss(backend(x), b.labels)
            grads = G.backward(loss, backend.params.values())
            return loss.item(), {k: grads[t] for k, t in backend.params.items()}

        loss, grads = _run_step(phase, step, log, build)
        _check_finite(phase, step, log, loss=loss)
        G.adam_step(backend.params, grads, state)
        log.write({"phase": phase, "step": step, "loss": loss, "n_clean": int(clean.sum()),
                   "wall_s": round(time.perf_counter() - t0, 3)})
    log.event(phase, "end", steps=cfg.backend_steps)
    return backend


# ------------------------------------------------------------------ fine-tuning

@dataclass
class FinetuneStats:
    steps: int = 0
    skipped: int = 0
    random_lambda: int = 0
    learning_rate: float = 0.0
    audits: int = 0
    lambda_hat_min: float = float("inf")
    lambda_hat_max: float = float("-inf")
    extra: dict = field(default_factory=dict)


def stop_gradient_audit(b: Batch, snri_net: SnriNet, backend: Backend, pred_net: PredNet,
                        cfg: TrainConfig) -> tuple[float, float]:
    """Gradient norms on predictor parameters from the SNRi term alone and the task term alone."""
    norms = []
    for which in ("se", "task"):
        terms = joint_loss(b.x, b.s, b.n, b.labels, snri_net, backend, "proposed", pred_net,
                           eta=cfg.eta, beta=cfg.beta, tau=cfg.tau)
        target = terms.se if which == "se" else terms.task
        grads = G.backward(target, pred_net.params.values())
        norms.append(float(np.sqrt(sum(np.sum(grads[t] ** 2) for t in pred_net.params.values()))))
    return norms[0], norms[1]


def finetune_joint(cfg: TrainConfig, corpus: Corpus, snri_net: SnriNet, backend: Backend,
                   pred_net: PredNet | None = None, mode: str = "proposed",
                   log: RunLog | None = None) -> FinetuneStats:
    """Joint training of frontend, predictor and backend at lr * finetune_lr_scale.

    proposed: with prob ``skip_frontend_prob`` the backend sees x directly and
    no SNRi term is formed; otherwise with prob ``random_lambda_prob`` a
    uniform target replaces the prediction.
    baseline: unconditioned frontend, skipped with prob ``baseline_skip_prob``.
    """
    log = log or RunLog()
    if mode == "proposed":
        if pred_net is None or not snri_net.cfg.conditioned:
            raise IncompatibleCheckpoint("proposed mode needs a conditioned SnriNet and a PredNet")
    elif mode == "baseline":
        if snri_net.cfg.conditioned:
            raise IncompatibleCheckpoint("baseline mode needs an unconditioned SnriNet")
        pred_net = None
    else:
        raise InvalidParams(f"unknown joint mode {mode!r}")
    phase = f"finetune_{mode}"
    lr = cfg.learning_rate * cfg.finetune_lr_scale
    assert lr == cfg.learning_rate * cfg.finetune_lr_scale
    nets = {"snri_net": snri_net, "backend": backend}
    if pred_net is not None:
        nets["pred_net"] = pred_net
    params = {f"{g}/{k}": t for g, net in nets.items() for k, t in net.params.items()}
    state = G.AdamState(learning_rate=lr)
    stats = FinetuneStats(learning_rate=lr)
    log.event(phase, "start", learning_rate=lr, pretrain_learning_rate=cfg.learning_rate,
              finetune_lr_scale=cfg.finetune_lr_scale, steps=cfg.finetune_steps, seed=cfg.seed)
    n_samples = int(round(cfg.utterance_s * snri_net.cfg.sample_rate))
    skip_prob = cfg.skip_frontend_prob if mode == "proposed" else cfg.baseline_skip_prob
    t0 = time.perf_counter()
    for step in range(cfg.finetune_steps):
        b = sample_batch(corpus, step_rng(cfg.seed, step, _MIX), cfg.batch_size, n_samples,
                         (cfg.snr_min, cfg.snr_max))
        cur = step_rng(cfg.seed, step, _CURRICULUM)
        skip = bool(cur.random() < skip_prob)
        use_random = mode == "proposed" and not skip and bool(cur.random() < cfg.random_lambda_prob)
        override = None
        if use_random:
            override = draw_lambda(step_rng(cfg.seed, step, _LAMBDA), cfg.batch_size,
                                   snri_net.cfg.lambda_min, snri_net.cfg.lambda_max)

        def build():
            terms = joint_loss(b.x, b.s, b.n, b.labels, snri_net, backend, mode, pred_net,
                               eta=cfg.eta, gamma=cfg.gamma, beta=cfg.beta, tau=cfg.tau,
                               alpha=cfg.alpha, lambda_override=override, skip_frontend=skip)
            rec = {"loss": terms.total.item(), "task": terms.task.item(),
                   "se": None if terms.se is None else terms.se.item()}
            if terms.lambda_hat is not None:
                lam = terms.lambda_hat.value
                rec.update(lambda_mean=float(lam.mean()), lambda_min=float(lam.min()),
                           lambda_max=float(lam.max()))
            grads = G.backward(terms.total, params.values())
            return rec, {k: grads[t] for k, t in params.items()}

        rec, grads = _run_step(phase, step, log, build)
        _check_finite(phase, step, log, loss=rec["loss"], task=rec["task"], se=rec["se"])
        G.adam_step(params, grads, state)
        stats.steps += 1
        stats.skipped += skip
        stats.random_lambda += use_random
        if "lambda_mean" in rec and not use_random:
            stats.lambda_hat_min = min(stats.lambda_hat_min, rec["lambda_min"])
            stats.lambda_hat_max = max(stats.lambda_hat_max, rec["lambda_max"])
        if mode == "proposed" and cfg.audit_every and step % cfg.audit_every == 0:
            se_norm, task_norm = stop_gradient_audit(b, snri_net, backend, pred_net, cfg)
            stats.audits += 1
            rec.update(audit_se_grad_norm=se_norm, audit_task_grad_norm=task_norm)
            if se_norm != 0.0:
                log.event(phase, "abort", at_step=step, reason="SNRi term reached the predictor")
                raise AssertionError(f"stop-gradient violated at step {step}: {se_norm}")
        log.write({"phase": phase, "step": step, "skipped": skip, "random_lambda": use_random,
                   "learning_rate": lr, **rec, "wall_s": round(time.perf_counter() - t0, 3)})
    log.event(phase, "end", **{k: v for k, v in asdict(stats).items() if k != "extra"})
    return stats


# ------------------------------------------------------------------ checkpoints

def checkpoint_path(out_dir, run_id: str, network: str, step: int) -> Path:
    return Path(out_dir) / run_id / f"{network}-{step}.json"


def save_networks(path, nets: dict, meta: dict) -> Path:
    """One parameter group per network; configs go into the metadata."""
    groups = {name: net.state() for name, net in nets.items()}
    configs = {name: asdict(net.cfg) for name, net in nets.items()}
    return checkpoint.save(path, groups, {**meta, "configs": configs})


def load_networks(path) -> tuple[dict, dict]:
    """Rebuild every network stored in a checkpoint written by :func:`save_networks`."""
    from .models import BackendConfig, PredNetConfig, SnriNetConfig
    kinds = {"snri_net": (SnriNet, SnriNetConfig), "se_net": (SnriNet, SnriNetConfig),
             "pred_net": (PredNet, PredNetConfig), "backend": (Backend, BackendConfig)}
    groups, meta = checkpoint.load(path)
    configs = meta.get("configs", {})
    nets = {}
    for name, state in groups.items():
        if name not in kinds or name not in configs:
            raise IncompatibleCheckpoint(f"unknown network group {name!r}")
        cls, cfg_cls = kinds[name]
        try:
            net = cls(cfg_cls(**configs[name]))
        except TypeError as exc:
            raise IncompatibleCheckpoint(f"{name}: {exc}") from exc
        net.load_state(state)
        nets[name] = net
    return nets, meta
