"""Experiment harness: mixture sets, control-accuracy and predicted-target
evaluations, CSV/SVG reporting.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np

from . import metrics as M
from .audio import AudioBuffer, Corpus, plan_corpus, wav_write
from .config import CorpusConfig
from .errors import EmptyCorpus, IncompatibleCheckpoint, InvalidParams, IoError, SchemaMismatch
from .models import PredNet, SnriNet
from .trainer import scale_noise

CONTROL_HEADER = ["method", "input_snr_db", "target_snri_db", "achieved_snri_db", "utterance_id"]
SUMMARY_HEADER = ["method", "input_snr_db", "target_snri_db", "mean_db", "ci99_lo_db", "ci99_hi_db"]
LAMBDA_HEADER = ["noise_kind", "input_snr_db", "lambda_hat_db", "achieved_snri_db", "utterance_id"]

Z99 = NormalDist().inv_cdf(0.995)
PEAK = 0.99
PCM_SCALE = 32768.0


def worker_count() -> int:
    """Worker cap from SNRI_LAB_THREADS (default 1)."""
    raw = os.environ.get("SNRI_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidParams(f"SNRI_LAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidParams("SNRI_LAB_THREADS must be >= 1")
    return n


def make_corpus(cfg: CorpusConfig) -> Corpus:
    return Corpus.render(plan_corpus(cfg.n_per_class, cfg.n_noise_per_kind, cfg.seed,
                                     cfg.duration_s, cfg.n_classes, cfg.sample_rate, cfg.prefix))


# ------------------------------------------------------------------ mixtures

@dataclass
class Mixture:
    id: str
    speech_id: str
    noise_id: str
    noise_kind: str
    label: int
    input_snr_db: float
    x: np.ndarray
    s: np.ndarray
    n: np.ndarray


def quantize(v: np.ndarray) -> np.ndarray:
    """Round onto the PCM16 grid so that WAV round-trips are exact."""
    return np.clip(np.round(v * PCM_SCALE), -32768, 32767) / PCM_SCALE


def pcm_mixture(s: np.ndarray, n: np.ndarray, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Speech and scaled noise with a shared gain for headroom, on the PCM16 grid.

    x = s + n is exactly representable, so the stored triple is self-consistent
    and its measured SNR is what gets indexed.
    """
    n = scale_noise(s, n, snr_db)
    gain = min(1.0, PEAK / max(np.abs(s).max(), np.abs(n).max(), np.abs(s + n).max()))
    return quantize(gain * s), quantize(gain * n)


def make_mixtures(corpus: Corpus, snr_db: float, n_utterances: int, seed: int,
                  noise_kind: str | None = None) -> list[Mixture]:
    """Deterministic (speech, noise) pairs; the pairing depends on ``seed`` and
    ``noise_kind`` only, so sets at different SNRs hold the same utterances."""
    pool = corpus.noise if noise_kind is None else corpus.noise_of_kind(noise_kind)
    if not corpus.speech or not pool:
        raise EmptyCorpus(f"no speech or no {noise_kind or 'noise'} entries in corpus")
    rng = np.random.default_rng([seed, sum(map(ord, noise_kind or "any"))])
    out = []
    for i in range(n_utterances):
        sp = corpus.speech[i % len(corpus.speech)] if n_utterances <= len(corpus.speech) \
            else corpus.speech[rng.integers(len(corpus.speech))]
        nz = pool[rng.integers(len(pool))]
        s, n = pcm_mixture(corpus.audio[sp.id].samples, corpus.audio[nz.id].samples, snr_db)
        out.append(Mixture(f"u{i:04d}_{sp.id}_{nz.id}", sp.id, nz.id, nz.params["kind"], sp.label,
                           M.snr(s, n), s + n, s, n))
    return out


def cmd_mix(corpus: Corpus, out_dir, snr_range: tuple[float, float], n_utterances: int,
            seed: int) -> Path:
    """Write WAV triples (x, s, n) plus ``index.json``; SNRs are uniform over ``snr_range``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng([seed, 0])
    lo, hi = snr_range
    if not lo <= hi:
        raise InvalidParams("empty SNR range")
    if not corpus.speech or not corpus.noise:
        raise EmptyCorpus("corpus needs speech and noise entries")
    index = []
    for i in range(n_utterances):
        sp = corpus.speech[rng.integers(len(corpus.speech))]
        nz = corpus.noise[rng.integers(len(corpus.noise))]
        target = float(rng.uniform(lo, hi))
        s, n = pcm_mixture(corpus.audio[sp.id].samples, corpus.audio[nz.id].samples, target)
        uid = f"mix{i:05d}"
        rec = {"id": uid, "speech_id": sp.id, "noise_id": nz.id, "label": sp.label,
               "noise_kind": nz.params["kind"], "requested_snr_db": target,
               "input_snr_db": M.snr(s, n)}
        for tag, v in (("x", s + n), ("s", s), ("n", n)):
            path = out_dir / uid / f"{tag}.wav"
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise IoError(str(exc)) from exc
            wav_write(path, AudioBuffer(v, corpus.manifest.sample_rate))
            rec[tag] = f"{uid}/{tag}.wav"
        index.append(rec)
    path = out_dir / "index.json"
    path.write_text(json.dumps({"version": 1, "sample_rate": corpus.manifest.sample_rate,
                                "mixtures": index}, indent=1, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ evaluation

@dataclass(frozen=True)
class EvalRecord:
    method: str
    input_snr_db: float
    target_snri_db: float
    achieved_snri_db: float
    utterance_id: str

    def __post_init__(self):
        if not all(np.isfinite([self.input_snr_db, self.target_snri_db, self.achieved_snri_db])):
            raise InvalidParams(f"non-finite eval record for {self.utterance_id}")


@dataclass(frozen=True)
class LambdaAnalysisRecord:
    noise_kind: str
    input_snr_db: float
    lambda_hat_db: float
    achieved_snri_db: float
    utterance_id: str


def _map(fn, items):
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _save_audio(audio_dir, snr_db: float, m: Mixture, name: str, y: np.ndarray,
                sample_rate: int) -> None:
    d = Path(audio_dir) / f"snr{snr_db:g}" / m.id
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    for tag, v in (("s", m.s), ("n", m.n)):
        if not (d / f"{tag}.wav").exists():
            wav_write(d / f"{tag}.wav", AudioBuffer(v, sample_rate))
    wav_write(d / f"{name}.wav", AudioBuffer(y, sample_rate))


def _control_condition(snr_db: float, mixtures: list[Mixture], targets, snri_net, se_net,
                       batch_size: int, audio_dir=None) -> list[EvalRecord]:
    """With ``audio_dir`` outputs are rounded to the PCM16 grid before scoring,
    so each stored WAV reproduces its CSV value exactly."""
    rows = []
    rate = (snri_net or se_net).cfg.sample_rate

    def score(method, lam, m, y):
        if audio_dir is not None:
            y = quantize(y)
            _save_audio(audio_dir, snr_db, m, f"{method}_{lam:g}", y, rate)
        rows.append(EvalRecord(method, snr_db, float(lam), M.snri(m.s, m.n, y), m.id))

    for start in range(0, len(mixtures), batch_size):
        chunk = mixtures[start:start + batch_size]
        x = np.stack([m.x for m in chunk])
        if snri_net is not None:
            enc = snri_net.encode(x)
            for lam in targets:
                y1, _ = snri_net.separate(enc, np.full(len(chunk), float(lam)))
                for m, y in zip(chunk, y1.value):
                    score("snri_net", lam, m, y)
        if se_net is not None:
            y1, y2 = se_net(x)
            for m, a, b in zip(chunk, y1.value, y2.value):
                pair = M.SeparatedPair(a, b)
                for lam in targets:
                    score("postmix", lam, m, M.postmix_control(pair, lam))
    return rows


def eval_control(corpus: Corpus, targets, input_snrs, n_utterances: int, seed: int,
                 snri_net: SnriNet | None = None, se_net: SnriNet | None = None,
                 batch_size: int = 8, audio_dir=None) -> list[EvalRecord]:
    """Achieved SNRi per (method, input SNR, target, utterance), sorted.

    With ``audio_dir`` every output is rounded to PCM16, scored and written as
    ``snr<S>/<utterance>/<method>_<target>.wav`` next to ``s.wav`` and ``n.wav``.
    """
    if snri_net is None and se_net is None:
        raise IncompatibleCheckpoint("eval-control needs an SNRi-Net and/or a conventional net")
    if snri_net is not None and not snri_net.cfg.conditioned:
        raise IncompatibleCheckpoint("snri_net checkpoint is not conditioned")
    if se_net is not None and se_net.cfg.conditioned:
        raise IncompatibleCheckpoint("se_net checkpoint must be unconditioned")
    sets = {float(snr): make_mixtures(corpus, float(snr), n_utterances, seed) for snr in input_snrs}
    rows = _map(lambda snr: _control_condition(snr, sets[snr], targets, snri_net, se_net,
                                               batch_size, audio_dir), sets)
    return sorted((r for chunk in rows for r in chunk),
                  key=lambda r: (r.method, r.input_snr_db, r.target_snri_db, r.utterance_id))


def eval_lambda(corpus: Corpus, noise_kinds, input_snrs, n_utterances: int, seed: int,
                snri_net: SnriNet, pred_net: PredNet, batch_size: int = 8,
                audio_dir=None) -> list[LambdaAnalysisRecord]:
    """Predicted target and the SNRi it achieves per (noise kind, input SNR, utterance).

    With ``audio_dir`` outputs are rounded to PCM16, scored and written to
    ``<kind>/snr<S>/<utterance>/enhanced.wav``.
    """
    if not snri_net.cfg.conditioned:
        raise IncompatibleCheckpoint("eval-lambda needs a conditioned SnriNet")
    lo, hi = pred_net.cfg.lambda_min, pred_net.cfg.lambda_max
    cells = [(k, float(snr)) for k in noise_kinds for snr in input_snrs]

    def run(cell):
        kind, snr = cell
        mixtures = make_mixtures(corpus, snr, n_utterances, seed, noise_kind=kind)
        rows = []
        for start in range(0, len(mixtures), batch_size):
            chunk = mixtures[start:start + batch_size]
            x = np.stack([m.x for m in chunk])
            lam = pred_net(x).value
            y1, _ = snri_net(x, lam)
            for m, l, y in zip(chunk, lam, y1.value):
                if not lo <= l <= hi:
                    raise AssertionError(f"predicted target {l} outside [{lo}, {hi}]")
                if audio_dir is not None:
                    y = quantize(y)
                    _save_audio(Path(audio_dir) / kind, snr, m, "enhanced", y,
                                snri_net.cfg.sample_rate)
                rows.append(LambdaAnalysisRecord(kind, snr, float(l), M.snri(m.s, m.n, y), m.id))
        return rows

    rows = _map(run, cells)
    return sorted((r for chunk in rows for r in chunk),
                  key=lambda r: (r.noise_kind, r.input_snr_db, r.utterance_id))


# ------------------------------------------------------------------ summaries

def summarize(rows: list[EvalRecord]) -> list[dict]:
    """Mean and normal-approximation 99% interval per (method, input SNR, target)."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r.method, r.input_snr_db, r.target_snri_db), []).append(r.achieved_snri_db)
    out = []
    for (method, snr, target), vals in sorted(cells.items()):
        v = np.asarray(vals)
        mean = float(v.mean())
        half = Z99 * float(v.std(ddof=1)) / np.sqrt(v.size) if v.size > 1 else 0.0
        out.append({"method": method, "input_snr_db": snr, "target_snri_db": target,
                    "mean_db": mean, "ci99_lo_db": mean - half, "ci99_hi_db": mean + half})
    return out


def lambda_report(rows: list[LambdaAnalysisRecord]) -> dict:
    """Mean predicted target per (noise kind, input SNR) plus the two soft expectations."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r.noise_kind, r.input_snr_db), []).append(r.lambda_hat_db)
    means = {f"{k}@{snr:g}": float(np.mean(v)) for (k, snr), v in sorted(cells.items())}
    snrs = sorted({snr for _, snr in cells})
    kinds = sorted({k for k, _ in cells})
    flags = []
    if len(snrs) >= 2:
        low, high = snrs[0], snrs[-1]
        for k in kinds:
            a, b = cells.get((k, low)), cells.get((k, high))
            if a and b:
                flags.append({"check": f"{k}: lambda_hat({low:g} dB) > lambda_hat({high:g} dB)",
                              "holds": bool(np.mean(a) > np.mean(b))})
    if "tone" in kinds and "white" in kinds:
        for snr in snrs:
            a, b = cells.get(("tone", snr)), cells.get(("white", snr))
            if a and b:
                flags.append({"check": f"{snr:g} dB: lambda_hat(tone) < lambda_hat(white)",
                              "holds": bool(np.mean(a) < np.mean(b))})
    return {"cell_means": means, "soft_checks": flags}


# ------------------------------------------------------------------ CSV

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        d = r if isinstance(r, dict) else r.__dict__
        w.writerow([_fmt(d[h]) for h in header])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch(f"{path}: empty CSV") from None
    rows = [dict(zip(header, r)) for r in reader if r]
    return header, rows


def summary_path(out_csv) -> Path:
    p = Path(out_csv)
    return p.with_name(p.stem + "_summary" + p.suffix)


# ------------------------------------------------------------------ SVG

_W, _H, _PAD = 640, 420, 56
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _summary_rows(path) -> list[dict]:
    header, rows = read_csv(path)
    if header == SUMMARY_HEADER:
        if not rows:
            raise SchemaMismatch(f"{path}: no data rows")
        try:
            return [{**r, **{k: float(r[k]) for k in SUMMARY_HEADER[1:]}} for r in rows]
        except ValueError as exc:
            raise SchemaMismatch(f"{path}: {exc}") from exc
    if header == CONTROL_HEADER:
        if not rows:
            raise SchemaMismatch(f"{path}: no data rows")
        try:
            recs = [EvalRecord(r["method"], float(r["input_snr_db"]), float(r["target_snri_db"]),
                               float(r["achieved_snri_db"]), r["utterance_id"]) for r in rows]
        except ValueError as exc:
            raise SchemaMismatch(f"{path}: {exc}") from exc
        return summarize(recs)
    raise SchemaMismatch(f"{path}: header {header} is not an eval-control schema")


def render_svg(summary: list[dict]) -> str:
    """Target on x, achieved mean on y; one polyline and one CI band per (method, input SNR)."""
    series: dict[tuple, list[dict]] = {}
    for r in summary:
        series.setdefault((r["method"], r["input_snr_db"]), []).append(r)
    xs = [r["target_snri_db"] for r in summary]
    ys = [v for r in summary for v in (r["ci99_lo_db"], r["ci99_hi_db"])] + xs
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def py(y):
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
           f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
           f'<line x1="{px(x0):.2f}" y1="{py(x0):.2f}" x2="{px(x1):.2f}" y2="{py(x1):.2f}" '
           'stroke="gray" stroke-dasharray="4 4"/>',
           f'<text x="{_W / 2:.0f}" y="{_H - 16}" text-anchor="middle" font-size="13">'
           'target SNRi (dB)</text>',
           f'<text x="16" y="{_H / 2:.0f}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 16 {_H / 2:.0f})">achieved SNRi (dB)</text>']
    for x in sorted(set(xs)):
        out.append(f'<text x="{px(x):.2f}" y="{_H - _PAD + 16}" text-anchor="middle" '
                   f'font-size="11">{x:g}</text>')
    for i, ((method, snr), rows) in enumerate(sorted(series.items())):
        rows = sorted(rows, key=lambda r: r["target_snri_db"])
        color = _COLORS[i % len(_COLORS)]
        band = [(r["target_snri_db"], r["ci99_hi_db"]) for r in rows] + \
               [(r["target_snri_db"], r["ci99_lo_db"]) for r in reversed(rows)]
        out.append('<polygon class="ci" points="' + " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in band)
                   + f'" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append('<polyline class="mean" points="'
                   + " ".join(f"{px(r['target_snri_db']):.2f},{py(r['mean_db']):.2f}" for r in rows)
                   + f'" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 16 * i}" text-anchor="end" font-size="12" '
                   f'fill="{color}">{method} @ {snr:g} dB</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(in_csv, out_svg) -> Path:
    svg = render_svg(_summary_rows(in_csv))
    path = Path(out_svg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
    return path


# ------------------------------------------------------------------ task metrics

def heldout_task(corpus: Corpus, backend, snr_range: tuple[float, float], n_utterances: int,
                 seed: int, snri_net: SnriNet | None = None, pred_net: PredNet | None = None,
                 batch_size: int = 8) -> dict:
    """Backend loss and accuracy on fixed noisy mixtures, optionally behind a frontend.

    With a conditioned ``snri_net`` the target comes from ``pred_net``; with
    neither network the backend sees the mixture itself.
    """
    from . import losses as L
    rng = np.random.default_rng([seed, 17])
    mixtures = make_mixtures(corpus, 0.0, n_utterances, seed)
    losses, correct, lambdas = [], 0, []
    for start in range(0, len(mixtures), batch_size):
        chunk = mixtures[start:start + batch_size]
        xs = []
        for m in chunk:
            snr = rng.uniform(*snr_range)
            xs.append(m.s + scale_noise(m.s, m.n, snr))
        x = np.stack(xs)
        labels = np.array([m.label for m in chunk])
        if snri_net is not None:
            if snri_net.cfg.conditioned:
                lam = pred_net(x).value
                lambdas.extend(lam.tolist())
                x = snri_net(x, lam)[0].value
            else:
                x = snri_net(x)[0].value
        logp = backend(x)
        losses.append(L.task_loss(logp, labels).item() * len(chunk))
        correct += int(np.sum(np.argmax(logp.value, axis=1) == labels))
    out = {"task_loss": float(np.sum(losses) / len(mixtures)),
           "accuracy": correct / len(mixtures)}
    if lambdas:
        out.update(lambda_hat_mean=float(np.mean(lambdas)), lambda_hat_min=float(np.min(lambdas)),
                   lambda_hat_max=float(np.max(lambdas)))
    return out


def clean_accuracy(corpus: Corpus, backend, batch_size: int = 16) -> float:
    items = corpus.speech
    correct = 0
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x = np.stack([corpus.audio[e.id].samples for e in chunk])
        pred = np.argmax(backend(x).value, axis=1)
        correct += int(np.sum(pred == np.array([e.label for e in chunk])))
    return correct / len(items)
