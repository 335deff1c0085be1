"""SNRi-Net, SNRi-Pred-Net and the toy classification backend.

All three are small channels-last networks built from :mod:`snri_lab.grad`
primitives. Parameters live in a flat ``{name: Tensor}`` dict per network so
they can be checkpointed and optimized uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from . import losses as L
from .audio import SAMPLE_RATE, analysis_window, dft_basis, make_mel_filterbank
from .errors import IncompatibleCheckpoint, InvalidParams, TooShort


@dataclass
class SnriNetConfig:
    encoder_basis: int = 514
    bottleneck: int = 48
    window_ms: float = 32.0
    hop_ms: float = 16.0
    basis_init: str = "fourier"
    n_blocks: int = 3
    hidden: int = 64
    kernel_size: int = 3
    zeta: float = 0.5
    conditioned: bool = True
    train_basis: bool = False
    bin_hidden: int = 16
    lambda_min: float = 0.0
    lambda_max: float = 20.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.window_ms >= self.hop_ms > 0:
            raise InvalidParams("need window_ms >= hop_ms > 0")
        if min(self.encoder_basis, self.bottleneck, self.n_blocks, self.hidden) < 1:
            raise InvalidParams("encoder_basis, bottleneck, n_blocks and hidden must be >= 1")
        if not self.lambda_min < self.lambda_max:
            raise InvalidParams("lambda_min must be below lambda_max")

    @property
    def win(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))


@dataclass
class PredNetConfig:
    n_blocks: int = 2
    hidden: int = 32
    n_mels: int = 32
    window_ms: float = 25.0
    hop_ms: float = 10.0
    kernel_size: int = 3
    lambda_min: float = 0.0
    lambda_max: float = 20.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.lambda_min < self.lambda_max:
            raise InvalidParams("lambda_min must be below lambda_max")
        if min(self.n_blocks, self.hidden, self.n_mels) < 1:
            raise InvalidParams("n_blocks, hidden and n_mels must be >= 1")


@dataclass
class BackendConfig:
    n_classes: int = 10
    n_blocks: int = 2
    hidden: int = 48
    n_mels: int = 32
    window_ms: float = 25.0
    hop_ms: float = 10.0
    kernel_size: int = 3
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidParams("n_classes must be >= 2")
        if min(self.n_blocks, self.hidden, self.n_mels) < 1:
            raise InvalidParams("n_blocks, hidden and n_mels must be >= 1")


# ------------------------------------------------------------------ helpers

POWER_FLOOR = 1e-8


def fourier_basis(win: int, n_freqs: int) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed cos/sin analysis kernels at ``n_freqs`` frequencies evenly
    spaced on [0, Nyquist], shape (win, 2*n_freqs), and the synthesis kernels
    that make overlap-add of decoded frames invert the analysis in the
    least-squares sense."""
    t = np.arange(win)[:, None]
    freqs = np.linspace(0.0, np.pi, n_freqs)[None, :]
    w = analysis_window(win)[:, None]
    enc = np.concatenate([w * np.cos(freqs * t), -w * np.sin(freqs * t)], axis=1)
    # each frame should decode to window * frame; 50%-overlapped Hann sums to one
    dec_t = np.linalg.lstsq(enc, np.diag(w[:, 0]), rcond=None)[0]
    return enc, dec_t.T


def _init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


@dataclass
class Network:
    """Named parameter container shared by the three models."""
    params: dict[str, G.Tensor] = field(default_factory=dict)

    def _add(self, name: str, value: np.ndarray) -> G.Tensor:
        t = G.parameter(value, name=name)
        self.params[name] = t
        return t

    def p(self, name: str) -> G.Tensor:
        return self.params[name]

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) ^ set(state))
            raise IncompatibleCheckpoint(f"parameter names differ: {missing[:5]}")
        for k, t in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise IncompatibleCheckpoint(f"{k}: shape {v.shape} vs {t.shape}")
            t.value = v.copy()

    def n_params(self) -> int:
        return sum(t.value.size for t in self.params.values())


def _add_blocks(net: Network, prefix: str, n_blocks: int, width: int, kernel: int,
                rng: np.random.Generator) -> None:
    for i in range(n_blocks):
        net._add(f"{prefix}{i}.conv.w", _init(rng, (kernel, width, 2 * width), kernel * width))
        net._add(f"{prefix}{i}.conv.b", np.zeros(2 * width))
        net._add(f"{prefix}{i}.ln.g", np.ones(width))
        net._add(f"{prefix}{i}.ln.b", np.zeros(width))


def temporal_block(net: Network, name: str, h: G.Tensor, dilation: int) -> G.Tensor:
    """Dilated gated convolution, residual connection, layer norm. Keeps (B, N, H)."""
    w = net.p(f"{name}.conv.w")
    k, width = w.shape[0], w.shape[1]
    pad = dilation * (k - 1) // 2
    z = G.conv1d(h, w, dilation=dilation, padding=(pad, dilation * (k - 1) - pad))
    z = G.add(z, G.expand(net.p(f"{name}.conv.b"), z.shape))
    gated = G.mul(G.tanh(z[..., :width]), G.sigmoid(z[..., width:]))
    return G.layer_norm(G.add(h, gated), net.p(f"{name}.ln.g"), net.p(f"{name}.ln.b"))


def _run_blocks(net: Network, prefix: str, n_blocks: int, h: G.Tensor) -> G.Tensor:
    for i in range(n_blocks):
        h = temporal_block(net, f"{prefix}{i}", h, dilation=2 ** i)
    return h


def _as_batch(x) -> G.Tensor:
    x = G.constant(x)
    if x.ndim == 1:
        x = G.reshape(x, (1, x.shape[0]))
    return x


class LogMelFrontend:
    """Differentiable log-mel features: strided DFT convolution, power, mel + log."""

    def __init__(self, n_mels: int, window_ms: float, hop_ms: float, sample_rate: int):
        self.fb = make_mel_filterbank(n_mels, window_ms, hop_ms, sample_rate)
        re, im = dft_basis(self.fb)
        self._re = G.Tensor(re[:, None, :])
        self._im = G.Tensor(im[:, None, :])

    def __call__(self, x: G.Tensor) -> G.Tensor:
        bsz, t = x.shape
        if t < self.fb.win_length:
            raise TooShort(f"{t} samples shorter than the {self.fb.win_length}-sample feature window")
        x3 = G.reshape(x, (bsz, t, 1))
        hop = self.fb.hop_length
        re = G.conv1d(x3, self._re, stride=hop)
        im = G.conv1d(x3, self._im, stride=hop)
        power = G.add(G.square(re), G.square(im))
        return G.mel_apply(power, self.fb.weights)


# ------------------------------------------------------------------ SNRi-Net

@dataclass
class Encoding:
    x: G.Tensor
    enc: G.Tensor
    bottleneck: G.Tensor
    features: G.Tensor
    contrast: G.Tensor
    stationarity: G.Tensor
    t: int


def _shift_bins(v: G.Tensor, d: int) -> G.Tensor:
    """Neighbor bin ``k + d`` along the last axis, zero beyond the edges."""
    pad = G.Tensor(np.zeros(v.shape[:-1] + (1,)))
    if d < 0:
        return G.concat([pad, v[..., :-1]], axis=-1)
    return G.concat([v[..., 1:], pad], axis=-1)


class SnriNet(Network):
    """Mask-based time-domain enhancer with an optional SNRi-target input.

    encoder conv -> bottleneck -> [concat normalized lambda per frame] ->
    temporal blocks -> two sigmoid masks -> shared transposed-conv decoder ->
    mixture consistency.

    With ``basis_init="fourier"`` the encoder starts as Hann-windowed cosine /
    sine pairs (channels ``[:D_e/2]`` and ``[D_e/2:]``), the mask network sees
    the log power of each pair, one mask per pair scales both of its channels,
    and the decoder starts at the least-squares overlap-add inverse. With
    ``"random"`` the encoder is ReLU-activated and masked channel-wise.
    Unless ``train_basis`` is set, encoder and decoder kernels are constants
    kept outside ``params``.

    The mask logits also get per-bin shortcuts: ``mask.skip * f`` with ``f``
    the normalized log-power feature, and a small MLP shared across bins that
    sees ``f``, its deviation ``c`` from the utterance mean, the per-bin
    variance of ``c`` (low for stationary noise such as tones) and ``f`` and
    that variance in the two neighboring bins. The conditioned
    variant feeds lambda and its products with these features to the same MLP
    and adds ``lambda * mask.lam``, so the target moves every per-bin threshold.
    """

    def __init__(self, cfg: SnriNetConfig = SnriNetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        de, db, hd = cfg.encoder_basis, cfg.bottleneck, cfg.hidden
        if cfg.basis_init == "fourier":
            if de % 2:
                raise InvalidParams("a fourier basis needs an even encoder_basis")
            enc, dec = fourier_basis(cfg.win, de // 2)
            n_masks = de // 2
        elif cfg.basis_init == "random":
            enc = _init(rng, (cfg.win, de), cfg.win)
            dec = _init(rng, (cfg.win, de), de)
            n_masks = de
        else:
            raise InvalidParams(f"unknown basis_init {cfg.basis_init!r}")
        self.n_masks = n_masks
        self.buffers: dict[str, G.Tensor] = {}
        self._basis("enc.w", enc[:, None, :])
        self._add("bn.ln.g", np.ones(n_masks))
        self._add("bn.ln.b", np.zeros(n_masks))
        self._add("bn.w", _init(rng, (n_masks, db), n_masks))
        self._add("bn.b", np.zeros(db))
        cond = db + 1 if cfg.conditioned else db
        self._add("in.w", _init(rng, (cond, hd), cond))
        self._add("in.b", np.zeros(hd))
        _add_blocks(self, "block", cfg.n_blocks, hd, cfg.kernel_size, rng)
        self._add("mask.w", _init(rng, (hd, 2 * n_masks), hd, gain=0.5))
        self._add("mask.b", np.zeros(2 * n_masks))
        self._add("mask.skip", np.zeros(2 * n_masks))
        if cfg.conditioned:
            self._add("mask.lam", np.zeros(2 * n_masks))
        n_bin = 15 if cfg.conditioned else 7
        self._add("bin.w1", _init(rng, (n_bin, cfg.bin_hidden), n_bin))
        self._add("bin.b1", np.zeros(cfg.bin_hidden))
        self._add("bin.w2", np.zeros((cfg.bin_hidden, 2)))
        self._add("bin.b2", np.zeros(2))
        self._basis("dec.w", dec[:, :, None])

    def _basis(self, name: str, value: np.ndarray) -> None:
        if self.cfg.train_basis:
            self._add(name, value)
        else:
            self.buffers[name] = G.Tensor(value, name=name)

    def p(self, name: str) -> G.Tensor:
        return self.params[name] if name in self.params else self.buffers[name]

    def normalize_lambda(self, lambda_db):
        """Map [lambda_min, lambda_max] affinely onto [-1, 1]."""
        c = self.cfg
        mid = 0.5 * (c.lambda_max + c.lambda_min)
        scale = 2.0 / (c.lambda_max - c.lambda_min)
        if isinstance(lambda_db, G.Tensor):
            return G.mul(G.sub(lambda_db, mid), scale)
        return (np.asarray(lambda_db, dtype=np.float64) - mid) * scale

    def _padding(self, t: int) -> tuple[int, int]:
        win, hop = self.cfg.win, self.cfg.hop
        left = win - hop
        n_frames = -(-(t + 2 * left - win) // hop) + 1
        return left, (n_frames - 1) * hop + win - t - left

    def encode(self, x) -> "Encoding":
        """Everything that does not depend on lambda, shared across target values."""
        x = _as_batch(x)
        bsz, t = x.shape
        win, hop = self.cfg.win, self.cfg.hop
        if t < win:
            raise TooShort(f"{t} samples shorter than the {win}-sample encoder window")
        left, right = self._padding(t)
        xp = G.concat([G.Tensor(np.zeros((bsz, left))), x, G.Tensor(np.zeros((bsz, right)))], axis=1)
        enc = G.conv1d(G.reshape(xp, (bsz, xp.shape[1], 1)), self.p("enc.w"), stride=hop)
        if self.cfg.basis_init == "fourier":
            k = self.n_masks
            power = G.add(G.square(enc[..., :k]), G.square(enc[..., k:]))
            feats = G.log(G.add(power, POWER_FLOOR))
        else:
            enc = G.relu(enc)
            feats = enc
        normed = G.layer_norm(feats, self.p("bn.ln.g"), self.p("bn.ln.b"))
        h = G.dense(normed, self.p("bn.w"), self.p("bn.b"))
        # per-bin deviation from the utterance mean separates stationary noise from speech
        contrast = G.sub(normed, G.expand(G.mean(normed, axis=1, keepdims=True), normed.shape))
        stationarity = G.expand(G.mean(G.square(contrast), axis=1, keepdims=True), normed.shape)
        return Encoding(x, enc, h, normed, contrast, stationarity, t)

    def _bin_head(self, cols: list[G.Tensor]) -> G.Tensor:
        """Small MLP applied to every bin with weights shared across frequency;
        returns (B, frames, 2K) logit offsets for the speech and noise masks."""
        shape = cols[0].shape
        z = G.concat([G.reshape(c, shape + (1,)) for c in cols], axis=-1)
        h = G.tanh(G.dense(z, self.p("bin.w1"), self.p("bin.b1")))
        out = G.dense(h, self.p("bin.w2"), self.p("bin.b2"))
        return G.concat([G.reshape(out[..., 0:1], shape), G.reshape(out[..., 1:2], shape)], axis=-1)

    def separate(self, e: "Encoding", lambda_db=None) -> tuple[G.Tensor, G.Tensor]:
        """(speech, noise) estimates for one target value, from a shared encoding."""
        bsz, n_frames, _ = e.bottleneck.shape
        h = e.bottleneck
        if self.cfg.conditioned:
            if lambda_db is None:
                raise InvalidParams("a conditioned SnriNet needs lambda_db")
            lam = self.normalize_lambda(lambda_db)
            if not isinstance(lam, G.Tensor):
                lam = G.Tensor(np.broadcast_to(lam, (bsz,)).copy())
            elif lam.ndim == 0:
                lam = G.expand(lam, (bsz,))
            lam = G.expand(G.reshape(lam, (bsz, 1, 1)), (bsz, n_frames, 1))
            h = G.concat([h, lam], axis=-1)
        h = G.dense(h, self.p("in.w"), self.p("in.b"))
        h = _run_blocks(self, "block", self.cfg.n_blocks, h)
        k = self.n_masks
        logits = G.dense(h, self.p("mask.w"), self.p("mask.b"))
        skip = G.concat([e.features, e.features], axis=-1)
        logits = G.add(logits, G.mul(skip, G.expand(self.p("mask.skip"), skip.shape)))
        cols = [e.features, e.contrast, e.stationarity]
        cols += [_shift_bins(v, d) for v in (e.features, e.stationarity) for d in (-1, 1)]
        if self.cfg.conditioned:
            lam_b = G.expand(lam, logits.shape)
            logits = G.add(logits, G.mul(lam_b, G.expand(self.p("mask.lam"), logits.shape)))
            lam_k = G.expand(lam, e.features.shape)
            cols = cols + [lam_k] + [G.mul(lam_k, c) for c in cols]
        logits = G.add(logits, self._bin_head(cols))
        masks = G.sigmoid(logits)
        left, t = self._padding(e.t)[0], e.t
        outs = []
        for m in (masks[..., :k], masks[..., k:]):
            if self.cfg.basis_init == "fourier":
                m = G.concat([m, m], axis=-1)
            y = G.transposed_conv1d(G.mul(e.enc, m), self.p("dec.w"), stride=self.cfg.hop)
            outs.append(y[:, left:left + t, 0])
        return L.mixture_consistency(e.x.value, outs[0], outs[1], self.cfg.zeta)

    def forward(self, x, lambda_db=None) -> tuple[G.Tensor, G.Tensor]:
        """(speech, noise) estimates of shape (B, T) summing to ``x``."""
        return self.separate(self.encode(x), lambda_db)

    __call__ = forward


# ------------------------------------------------------------ SNRi-Pred-Net

class PredNet(Network):
    """log-mel -> dense -> temporal blocks -> time mean -> dense -> scaled sigmoid."""

    def __init__(self, cfg: PredNetConfig = PredNetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 2])
        self.features = LogMelFrontend(cfg.n_mels, cfg.window_ms, cfg.hop_ms, cfg.sample_rate)
        hd = cfg.hidden
        self._add("in.w", _init(rng, (cfg.n_mels, hd), cfg.n_mels))
        self._add("in.b", np.zeros(hd))
        self._add("in.ln.g", np.ones(hd))
        self._add("in.ln.b", np.zeros(hd))
        _add_blocks(self, "block", cfg.n_blocks, hd, cfg.kernel_size, rng)
        self._add("out.w", _init(rng, (hd, 1), hd, gain=0.1))
        self._add("out.b", np.zeros(1))

    def pre_activation(self, x) -> G.Tensor:
        x = _as_batch(x)
        h = G.dense(self.features(x), self.p("in.w"), self.p("in.b"))
        h = G.layer_norm(h, self.p("in.ln.g"), self.p("in.ln.b"))
        h = _run_blocks(self, "block", self.cfg.n_blocks, h)
        z = G.dense(G.mean_pool_time(h), self.p("out.w"), self.p("out.b"))
        return G.reshape(z, (z.shape[0],))

    def scale(self, z: G.Tensor) -> G.Tensor:
        c = self.cfg
        return G.add(G.mul(G.sigmoid(z), c.lambda_max - c.lambda_min), c.lambda_min)

    def forward(self, x) -> G.Tensor:
        """Predicted target SNRi (B,) in [lambda_min, lambda_max]."""
        return self.scale(self.pre_activation(x))

    __call__ = forward


# ------------------------------------------------------------------ backend

class Backend(Network):
    """Toy stand-in for the recognizer: utterance-level class log-probabilities."""

    def __init__(self, cfg: BackendConfig = BackendConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 3])
        self.features = LogMelFrontend(cfg.n_mels, cfg.window_ms, cfg.hop_ms, cfg.sample_rate)
        hd = cfg.hidden
        self._add("in.w", _init(rng, (cfg.n_mels, hd), cfg.n_mels))
        self._add("in.b", np.zeros(hd))
        self._add("in.ln.g", np.ones(hd))
        self._add("in.ln.b", np.zeros(hd))
        _add_blocks(self, "block", cfg.n_blocks, hd, cfg.kernel_size, rng)
        self._add("out.w", _init(rng, (hd, cfg.n_classes), hd))
        self._add("out.b", np.zeros(cfg.n_classes))

    def forward(self, y1) -> G.Tensor:
        """(B, K) log-probabilities; gradients flow back into ``y1``."""
        y1 = _as_batch(y1)
        h = G.dense(self.features(y1), self.p("in.w"), self.p("in.b"))
        h = G.layer_norm(h, self.p("in.ln.g"), self.p("in.ln.b"))
        h = _run_blocks(self, "block", self.cfg.n_blocks, h)
        return G.log_softmax(G.dense(G.mean_pool_time(h), self.p("out.w"), self.p("out.b")))

    __call__ = forward


# ------------------------------------------------------------- joint losses

@dataclass
class JointTerms:
    total: G.Tensor
    task: G.Tensor
    se: G.Tensor | None
    lambda_hat: G.Tensor | None
    skipped: bool = False


def joint_loss(x: np.ndarray, s: np.ndarray, n: np.ndarray, labels, snri_net: SnriNet,
               backend: Backend, mode: str = "proposed", pred_net: PredNet | None = None,
               eta: float = 0.01, gamma: float = 0.25, beta: float = 0.01, tau: float = 1e-3,
               alpha: float = 0.8, lambda_override=None, skip_frontend: bool = False) -> JointTerms:
    """Task loss plus the weighted enhancement loss.

    ``proposed``: L_task(backend(y1)) + eta * L_SNRi with lambda-hat from the
    predictor. SNRi-Net runs twice on one shared encoding: once fed the live
    lambda-hat (its output goes to the backend) and once fed a stop-gradient
    copy (its output goes to L_SNRi, whose target is also barriered). The two
    passes are numerically identical, but only the first carries gradient back
    into the predictor.

    ``baseline``: L_task(backend(y1)) + gamma * L_SE with an unconditioned
    frontend.

    ``lambda_override`` (B,) replaces the prediction as a constant;
    ``skip_frontend`` feeds ``x`` straight to the backend and drops the
    enhancement term.
    """
    if skip_frontend:
        task = L.task_loss(backend(x), labels)
        return JointTerms(task, task, None, None, skipped=True)
    if mode == "proposed":
        if lambda_override is not None:
            lam = G.Tensor(np.asarray(lambda_override, dtype=np.float64))
        else:
            lam = pred_net(x)
        e = snri_net.encode(x)
        y1_task, _ = snri_net.separate(e, lam)
        task = L.task_loss(backend(y1_task), labels)
        lam_fixed = G.stop_gradient(lam)
        y1_se, _ = snri_net.separate(e, lam_fixed)
        se, _, _ = L.snri_target_loss(y1_se, s, n, lam_fixed, beta, tau)
        return JointTerms(G.add(task, G.mul(se, eta)), task, se, lam)
    if mode == "baseline":
        y1, y2 = snri_net(x)
        task = L.task_loss(backend(y1), labels)
        se = L.se_loss(y1, y2, s, n, alpha, tau)
        return JointTerms(G.add(task, G.mul(se, gamma)), task, se, None)
    raise InvalidParams(f"unknown joint mode {mode!r}")
