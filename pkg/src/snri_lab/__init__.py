"""Controllable speech enhancement with an SNR-improvement target.

Modules: :mod:`audio` (buffers, mixing, features, corpus), :mod:`metrics`
(evaluation-grade SNR/SNRi/SAR), :mod:`grad` (reverse-mode autodiff and Adam),
:mod:`models` (SNRi-Net, predictor, toy backend), :mod:`trainer` and
:mod:`harness`/:mod:`cli` (experiments and command line).
"""

__version__ = "0.1.0"
