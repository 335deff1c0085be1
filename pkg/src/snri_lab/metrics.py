"""Evaluation-grade SNR / SNRi / SAR metrics and the losses built from them.

Everything here runs in float64 numpy and is not differentiable; the
differentiable twins live in :mod:`snri_lab.losses`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSubspace, InvalidParams, LengthMismatch, SilentNoise, SilentReference

SNRI_CAP = 100.0
RESIDUAL_EPS = 1e-20
GRAM_TOL = 1e-12


@dataclass(frozen=True)
class ThresholdConfig:
    tau: float = 1e-3
    alpha: float = 0.8
    zeta: float = 0.5
    beta: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidParams("tau must be positive")
        if not (0 <= self.alpha <= 1 and 0 <= self.zeta <= 1):
            raise InvalidParams("alpha and zeta must lie in [0, 1]")
        if self.beta < 0:
            raise InvalidParams("beta must be non-negative")


@dataclass(frozen=True)
class SeparatedPair:
    speech: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        speech = np.asarray(self.speech, dtype=np.float64)
        noise = np.asarray(self.noise, dtype=np.float64)
        if speech.shape != noise.shape:
            raise LengthMismatch(f"speech {speech.shape} vs noise {noise.shape}")
        object.__setattr__(self, "speech", speech)
        object.__setattr__(self, "noise", noise)


@dataclass(frozen=True)
class SarDecomposition:
    e_interf: np.ndarray
    e_artif: np.ndarray
    sar_db: float
    sar_loss: float


def _vec(v) -> np.ndarray:
    return np.asarray(getattr(v, "samples", v), dtype=np.float64).reshape(-1)


def _same_length(*vs: np.ndarray) -> None:
    if len({v.size for v in vs}) != 1:
        raise LengthMismatch(f"lengths differ: {[v.size for v in vs]}")


def _energy(v: np.ndarray) -> float:
    return float(np.dot(v, v))


def snr(s, n) -> float:
    s, n = _vec(s), _vec(n)
    es, en = _energy(s), _energy(n)
    if es == 0:
        raise SilentReference("reference speech is silent")
    if en == 0:
        raise SilentNoise("noise is silent")
    return 10.0 * np.log10(es / en)


def snri(s, n, y1) -> float:
    """Output SNR of ``y1`` against ``s`` minus the input SNR of ``s + n``.

    A residual below ``RESIDUAL_EPS * ||s||^2`` returns ``SNRI_CAP``.
    """
    s, n, y1 = _vec(s), _vec(n), _vec(y1)
    _same_length(s, n, y1)
    snr_in = snr(s, n)
    es = _energy(s)
    r = y1 - s
    er = _energy(r)
    if er < RESIDUAL_EPS * es:
        return SNRI_CAP
    return 10.0 * np.log10(es / er) - snr_in


def thresholded_snr_loss(a, b, tau: float = 1e-3) -> float:
    """-10 log10(||a||^2 / (||a - b||^2 + tau ||a||^2)); bounded below by -10 log10(1/tau)."""
    a, b = _vec(a), _vec(b)
    _same_length(a, b)
    ea = _energy(a)
    if ea == 0:
        raise SilentReference("reference is silent")
    d = a - b
    return -10.0 * np.log10(ea / (_energy(d) + tau * ea))


def sar_decompose(s, n, y1, cfg: ThresholdConfig = ThresholdConfig()) -> SarDecomposition:
    """Split the residual ``y1 - s`` into its projection on span{s, n} and the rest."""
    s, n, y1 = _vec(s), _vec(n), _vec(y1)
    _same_length(s, n, y1)
    es, en = _energy(s), _energy(n)
    if es == 0:
        raise SilentReference("reference speech is silent")
    if en == 0:
        raise SilentNoise("noise is silent")
    sn = float(np.dot(s, n))
    gram = np.array([[es, sn], [sn, en]])
    det = es * en - sn * sn
    if det <= GRAM_TOL * es * en:
        raise DegenerateSubspace("speech and noise are (nearly) collinear")
    r = y1 - s
    coef = np.linalg.solve(gram, np.array([np.dot(s, r), np.dot(n, r)]))
    e_interf = coef[0] * s + coef[1] * n
    e_artif = r - e_interf
    ea = _energy(e_artif)
    sar_db = SNRI_CAP if ea < RESIDUAL_EPS * es else 10.0 * np.log10(es / ea)
    sar_loss = -10.0 * np.log10(es / (ea + cfg.tau * es))
    return SarDecomposition(e_interf, e_artif, float(sar_db), float(sar_loss))


def se_loss(s, n, y: SeparatedPair, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    return (cfg.alpha * thresholded_snr_loss(s, y.speech, cfg.tau)
            + (1.0 - cfg.alpha) * thresholded_snr_loss(n, y.noise, cfg.tau))


def mixture_consistency(x, y: SeparatedPair, zeta: float = 0.5) -> SeparatedPair:
    x = _vec(x)
    _same_length(x, y.speech)
    e = x - (y.speech + y.noise)
    return SeparatedPair(y.speech + zeta * e, y.noise + (1.0 - zeta) * e)


def postmix_weight(lambda_db: float) -> float:
    return 10.0 ** (-lambda_db / 20.0)


def postmix_control(y: SeparatedPair, lambda_db: float) -> np.ndarray:
    """Speech estimate plus the noise estimate scaled by 10^(-lambda/20)."""
    if not np.isfinite(lambda_db):
        raise InvalidParams("lambda must be finite")
    return y.speech + postmix_weight(lambda_db) * y.noise


def snri_target_loss(s, n, y1, lambda_db: float,
                     cfg: ThresholdConfig = ThresholdConfig()) -> tuple[float, float, float]:
    """(total, squared SNRi error, SAR loss) with total = err + beta * sar."""
    err = (lambda_db - snri(s, n, y1)) ** 2
    sar = sar_decompose(s, n, y1, cfg).sar_loss
    return err + cfg.beta * sar, err, sar


def metrics_report(s, n, y1, lambda_db: float | None = None,
                   cfg: ThresholdConfig = ThresholdConfig()) -> dict[str, float | None]:
    """The JSON object printed by the ``metrics`` command."""
    dec = sar_decompose(s, n, y1, cfg)
    out = {
        "snr_in_db": snr(s, n),
        "snri_db": snri(s, n, y1),
        "sar_db": dec.sar_db,
        "sar_loss": dec.sar_loss,
        "snri_loss": None,
    }
    if lambda_db is not None:
        out["snri_loss"] = snri_target_loss(s, n, y1, lambda_db, cfg)[0]
    return out
