"""Differentiable, batched versions of the training losses.

Signals are (B, T). References ``s`` and ``n`` are plain arrays; only the
network outputs carry gradients.
"""
from __future__ import annotations

import numpy as np

from . import grad as G
from .errors import InvalidLabel, SilentReference
from .metrics import RESIDUAL_EPS

DB = 10.0 / np.log(10.0)


def _energy_np(v: np.ndarray) -> np.ndarray:
    return np.einsum("bt,bt->b", v, v)


def _check_ref(e: np.ndarray, what: str) -> None:
    if np.any(e <= 0):
        raise SilentReference(f"{what} is silent in at least one batch item")


def energy(v: G.Tensor) -> G.Tensor:
    return G.sum_(G.square(v), axis=-1)


def snri_db(y1: G.Tensor, s: np.ndarray, n: np.ndarray) -> G.Tensor:
    """Per-item SNRi (B,). The residual is floored at RESIDUAL_EPS*||s||^2."""
    es, en = _energy_np(s), _energy_np(n)
    _check_ref(es, "speech")
    _check_ref(en, "noise")
    er = energy(G.sub(y1, s)) + RESIDUAL_EPS * es
    # 10log10(es/er) - 10log10(es/en) = 10log10(en) - 10log10(er)
    return G.sub(DB * np.log(en), G.mul(G.log(er), DB))


def _orthonormal_basis(s: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q1 = s / np.sqrt(_energy_np(s))[:, None]
    v = n - np.einsum("bt,bt->b", n, q1)[:, None] * q1
    q2 = v / np.sqrt(_energy_np(v))[:, None]
    return q1, q2


def sar_loss(y1: G.Tensor, s: np.ndarray, n: np.ndarray, tau: float) -> G.Tensor:
    """Per-item negative thresholded SAR (B,), artifacts measured orthogonal to span{s, n}."""
    es = _energy_np(s)
    _check_ref(es, "speech")
    r = G.sub(y1, s)
    q1, q2 = _orthonormal_basis(s, n)
    c1 = G.sum_(G.mul(r, q1), axis=-1, keepdims=True)
    c2 = G.sum_(G.mul(r, q2), axis=-1, keepdims=True)
    interf = G.add(G.mul(G.expand(c1, r.shape), q1), G.mul(G.expand(c2, r.shape), q2))
    ea = energy(G.sub(r, interf))
    return G.sub(G.mul(G.log(G.add(ea, tau * es)), DB), DB * np.log(es))


def thresholded_snr_loss(a: np.ndarray, b: G.Tensor, tau: float) -> G.Tensor:
    """Per-item -10 log10(||a||^2 / (||a-b||^2 + tau ||a||^2)) (B,)."""
    ea = _energy_np(a)
    _check_ref(ea, "reference")
    ed = energy(G.sub(b, a))
    return G.sub(G.mul(G.log(G.add(ed, tau * ea)), DB), DB * np.log(ea))


def se_loss(y1: G.Tensor, y2: G.Tensor, s: np.ndarray, n: np.ndarray,
            alpha: float, tau: float) -> G.Tensor:
    """Batch mean of alpha*L(s, y1) + (1-alpha)*L(n, y2)."""
    per = G.add(G.mul(thresholded_snr_loss(s, y1, tau), alpha),
                G.mul(thresholded_snr_loss(n, y2, tau), 1.0 - alpha))
    return G.mean(per)


def snri_target_loss(y1: G.Tensor, s: np.ndarray, n: np.ndarray, lambda_db,
                     beta: float, tau: float) -> tuple[G.Tensor, G.Tensor, G.Tensor]:
    """Batch means of (|lambda - SNRi|^2 + beta*L_SAR, |lambda - SNRi|^2, L_SAR).

    ``lambda_db`` may be an array or a tensor of shape (B,); pass it through
    :func:`snri_lab.grad.stop_gradient` when the target must not be trained.
    """
    lam = G.constant(lambda_db)
    err = G.mean(G.square(G.sub(lam, snri_db(y1, s, n))))
    sar = G.mean(sar_loss(y1, s, n, tau))
    return G.add(err, G.mul(sar, beta)), err, sar


def task_loss(log_probs: G.Tensor, labels) -> G.Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (B, K) log-probabilities."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bsz, k = log_probs.shape
    if labels.size != bsz or np.any(labels < 0) or np.any(labels >= k):
        raise InvalidLabel(f"labels {labels.tolist()} invalid for {k} classes")
    onehot = np.zeros((bsz, k))
    onehot[np.arange(bsz), labels] = 1.0
    return G.mul(G.sum_(G.mul(log_probs, onehot)), -1.0 / bsz)


def mixture_consistency(x: np.ndarray, y1: G.Tensor, y2: G.Tensor,
                        zeta: float) -> tuple[G.Tensor, G.Tensor]:
    e = G.sub(x, G.add(y1, y2))
    return G.add(y1, G.mul(e, zeta)), G.add(y2, G.mul(e, 1.0 - zeta))
