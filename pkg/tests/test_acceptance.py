"""Acceptance criteria 1-10. Each test prints one ``CRITERION k: PASS|FAIL`` line.

Criteria 7-9 train at desk scale (2000 + 2000 pretraining steps, 1000 fine-tune
steps) and take roughly 25 minutes on one core.
"""
import json
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from snri_lab import checkpoint
from snri_lab import grad as G
from snri_lab import harness as H
from snri_lab import losses as L
from snri_lab import metrics as M
from snri_lab.cli import main
from snri_lab.config import RunConfig
from snri_lab.gradsuite import run_all, stop_gradient_split
from snri_lab.models import Backend, PredNet, SnriNet
from snri_lab.trainer import RunLog, finetune_joint, pretrain_backend, pretrain_se

LAMBDAS = [0.0, 3.0, 6.0, 9.0, 12.0]


def report(capsys, k: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")


def _vectors(rng, n, k):
    """``n`` groups of ``k`` random vectors with random length and scale."""
    for _ in range(n):
        length = int(rng.integers(16, 1024))
        yield rng.standard_normal((k, length)) * rng.uniform(1e-3, 1e3, size=(k, 1))


# ------------------------------------------------------------------ 1-4: algebra

def test_c1_metric_oracles(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_snri = worst_loss = 0.0
    for s, n, a in _vectors(rng, 1000, 3):
        worst_snri = max(worst_snri, abs(M.snri(s, n, s + n)))
        worst_loss = max(worst_loss, abs(M.thresholded_snr_loss(a, a, 1e-3) + 30.0))
    dt = time.perf_counter() - t0
    ok = worst_snri <= 1e-12 and worst_loss <= 1e-12 and dt < 1.0
    report(capsys, 1, ok, f"max|snri(s,n,s+n)|={worst_snri:.1e} max|loss(a,a)+30|={worst_loss:.1e} "
                          f"time={dt:.2f}s")
    assert ok


def test_c2_sar_decomposition(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_complete = worst_orth = 0.0
    optimal = True
    for s, n, y in _vectors(rng, 1000, 3):
        dec = M.sar_decompose(s, n, y)
        r = y - s
        worst_complete = max(worst_complete, np.linalg.norm(dec.e_interf + dec.e_artif - r)
                             / np.linalg.norm(r))
        na = np.linalg.norm(dec.e_artif)
        for ref in (s, n):
            worst_orth = max(worst_orth, abs(np.dot(dec.e_artif, ref)) / (na * np.linalg.norm(ref)))
        coef = rng.standard_normal((1000, 2)) * np.abs(np.linalg.lstsq(
            np.stack([s, n], 1), r, rcond=None)[0]).max() * 2
        dist = np.linalg.norm(r[None, :] - coef @ np.stack([s, n]), axis=1)
        optimal &= bool(np.all(dist >= na * (1 - 1e-12)))
    dt = time.perf_counter() - t0
    ok = worst_complete <= 1e-12 and worst_orth <= 1e-9 and optimal and dt < 5.0
    report(capsys, 2, ok, f"completeness={worst_complete:.1e} orthogonality={worst_orth:.1e} "
                          f"optimal={optimal} time={dt:.2f}s")
    assert ok


def test_c3_mixture_consistency(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_sum = worst_idem = 0.0
    for x, a, b in _vectors(rng, 1000, 3):
        zeta = float(rng.uniform(0, 1))
        once = M.mixture_consistency(x, M.SeparatedPair(a, b), zeta)
        twice = M.mixture_consistency(x, once, zeta)
        scale = np.abs(x).max() + np.abs(a).max() + np.abs(b).max()
        worst_sum = max(worst_sum, np.abs(once.speech + once.noise - x).max() / scale)
        worst_idem = max(worst_idem, max(np.abs(twice.speech - once.speech).max(),
                                         np.abs(twice.noise - once.noise).max()) / scale)
        g1, g2 = L.mixture_consistency(x, G.constant(a), G.constant(b), zeta)
        worst_sum = max(worst_sum, np.abs(g1.value + g2.value - x).max() / scale)
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-12 and worst_idem <= 1e-12 and dt < 1.0
    report(capsys, 3, ok, f"sum={worst_sum:.1e} idempotence={worst_idem:.1e} time={dt:.2f}s")
    assert ok


def test_c4_postmix_algebra(capsys):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for lam in rng.uniform(0, 20, size=100):
        s, n = rng.standard_normal((2, int(rng.integers(64, 4096))))
        y = M.postmix_control(M.SeparatedPair(s, n), float(lam))
        worst = max(worst, abs(M.snri(s, n, y) - lam))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 1.0
    report(capsys, 4, ok, f"max|achieved-lambda|={worst:.1e} time={dt:.2f}s")
    assert ok


# ------------------------------------------------------------------ 5-6: gradients

def test_c5_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = run_all(seed=0, tol=1e-4)
    dt = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    ok = not failed and dt < 60.0
    report(capsys, 5, ok, f"{len(results)} checks, max_rel_error={worst:.1e}, failed={failed} "
                          f"time={dt:.1f}s")
    assert ok


def test_c6_stop_gradient(capsys):
    t0 = time.perf_counter()
    splits = [stop_gradient_split(seed) for seed in range(3)]
    dt = time.perf_counter() - t0
    ok = all(d["se"] == 0.0 and d["se_max_abs"] == 0.0 and d["task"] > 0.0 for d in splits) \
        and dt < 10.0
    report(capsys, 6, ok, "predictor grad norms (snri term, task term): "
           + ", ".join(f"({d['se']:g}, {d['task']:.2e})" for d in splits) + f" time={dt:.1f}s")
    assert ok


# ------------------------------------------------------------------ 7-9: desk-scale training

@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig()
    corpus = H.make_corpus(cfg.corpus)
    log = RunLog()
    t0 = time.perf_counter()
    snri_net = pretrain_se(cfg.train, corpus, SnriNet(cfg.snri_net, seed=cfg.train.seed), log)
    se_net = pretrain_se(cfg.train, corpus,
                         SnriNet(replace(cfg.snri_net, conditioned=False), seed=cfg.train.seed),
                         log, kind="conventional")
    return {"cfg": cfg, "corpus": corpus, "test": H.make_corpus(cfg.eval.corpus), "log": log,
            "snri_net": snri_net, "se_net": se_net, "pretrain_s": time.perf_counter() - t0}


@pytest.mark.slow
def test_pretraining_loss_decreases(desk):
    for phase in ("pretrain_snri", "pretrain_conventional"):
        losses = [r["loss"] for r in desk["log"].steps(phase)]
        assert len(losses) == desk["cfg"].train.steps
        assert np.mean(losses[-100:]) < np.mean(losses[:100]), phase


@pytest.mark.slow
def test_c7_control_accuracy(capsys, desk):
    cfg, test = desk["cfg"], desk["test"]
    t0 = time.perf_counter()
    rows = H.eval_control(test, LAMBDAS, cfg.eval.input_snrs, cfg.eval.n_utterances,
                          cfg.eval.seed, desk["snri_net"], desk["se_net"])
    dt = desk["pretrain_s"] + time.perf_counter() - t0
    net = {(r.target_snri_db, r.utterance_id): r.achieved_snri_db for r in rows
           if r.method == "snri_net" and r.input_snr_db == 5.0}
    err = {t: float(np.mean([abs(v - t) for (lam, _), v in net.items() if lam == t]))
           for t in (3.0, 6.0)}
    means = [float(np.mean([v for (lam, _), v in net.items() if lam == t])) for t in LAMBDAS]
    rho = stats.spearmanr(LAMBDAS, means).statistic
    pooled = stats.spearmanr([lam for lam, _ in net], list(net.values())).statistic
    cells = {(c["input_snr_db"], c["target_snri_db"]): c["mean_db"]
             for c in H.summarize(rows) if c["method"] == "postmix"}
    under = all(v <= t + 0.5 for (_, t), v in cells.items())
    ok = all(e <= 2.0 for e in err.values()) and rho > 0.9 and under and dt < 1800
    report(capsys, 7, ok,
           f"@5dB mean|err| t3={err[3.0]:.2f} t6={err[6.0]:.2f} (<=2); means over lambda "
           f"{[round(m, 2) for m in means]} spearman={rho:.3f} (pooled {pooled:.3f}); "
           f"postmix cells {({f'{s:g}/{t:g}': round(v, 2) for (s, t), v in cells.items()})} "
           f"under-separated={under}; time={dt / 60:.1f}min")
    assert ok


@pytest.fixture(scope="module")
def joint(desk):
    cfg, test = desk["cfg"], desk["test"]
    snri_net = SnriNet(desk["snri_net"].cfg)
    snri_net.load_state(desk["snri_net"].state())
    t0 = time.perf_counter()
    backend = pretrain_backend(cfg.train, desk["corpus"], Backend(cfg.backend, seed=cfg.train.seed))
    pred_net = PredNet(cfg.pred_net, seed=cfg.train.seed)
    snr_range = (cfg.eval.mix_snr_min, cfg.eval.mix_snr_max)

    def heldout():
        return H.heldout_task(test, backend, snr_range, cfg.eval.n_utterances, cfg.eval.seed,
                              snri_net, pred_net)

    before = heldout()
    log = RunLog()
    st = finetune_joint(cfg.train, desk["corpus"], snri_net, backend, pred_net, "proposed", log)
    after = heldout()
    return {"snri_net": snri_net, "pred_net": pred_net, "before": before, "after": after,
            "stats": st, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_c8_joint_finetune(capsys, joint):
    b, a, st = joint["before"], joint["after"], joint["stats"]
    lam_lo = min(st.lambda_hat_min, b["lambda_hat_min"], a["lambda_hat_min"])
    lam_hi = max(st.lambda_hat_max, b["lambda_hat_max"], a["lambda_hat_max"])
    ok = a["task_loss"] < b["task_loss"] and 0.0 <= lam_lo and lam_hi <= 20.0 \
        and joint["seconds"] < 1200
    report(capsys, 8, ok, f"held-out task loss {b['task_loss']:.4f} -> {a['task_loss']:.4f} "
                          f"(acc {b['accuracy']:.3f} -> {a['accuracy']:.3f}); lambda_hat in "
                          f"[{lam_lo:.2f}, {lam_hi:.2f}]; time={joint['seconds'] / 60:.1f}min")
    assert ok


@pytest.mark.slow
def test_c9_lambda_analysis(capsys, desk, joint, tmp_path):
    cfg = desk["cfg"]
    rows = H.eval_lambda(desk["test"], cfg.eval.noise_kinds, cfg.eval.input_snrs,
                         cfg.eval.n_utterances, cfg.eval.seed, joint["snri_net"], joint["pred_net"])
    rep = H.lambda_report(rows)
    path = H.write_csv(tmp_path / "lambda.csv", H.LAMBDA_HEADER, rows)
    header, back = H.read_csv(path)
    expected = len(cfg.eval.noise_kinds) * len(cfg.eval.input_snrs)
    ok = header == H.LAMBDA_HEADER and len(back) == expected * cfg.eval.n_utterances \
        and len(rep["cell_means"]) == expected \
        and all(0.0 <= v <= 20.0 for v in rep["cell_means"].values())
    flags = "; ".join(f"{f['check']}: {'holds' if f['holds'] else 'FLAG'}" for f in rep["soft_checks"])
    report(capsys, 9, ok, f"cell means {({k: round(v, 2) for k, v in rep['cell_means'].items()})}; "
                          f"soft checks (not gated): {flags}")
    assert ok


# ------------------------------------------------------------------ 10: reproducibility

def _pipeline(root, cfg_path) -> dict:
    def cli(*argv):
        code = main([str(a) for a in argv])
        assert code == 0, argv
    out = root / "runs"
    files = {}
    cli("mix", "--config", cfg_path, "--out", root / "mix", "--n", 4)
    files["mix/index.json"] = root / "mix" / "index.json"
    cli("pretrain-se", "--config", cfg_path, "--out", out)
    cli("pretrain-backend", "--config", cfg_path, "--out", out)
    run = out / "repro"
    ckpt = {p.name: p for p in run.glob("*.json")}
    cli("finetune-joint", "--config", cfg_path, "--out", out, "--mode", "proposed",
        "--ckpt", ckpt["snri_net-30.json"], "--ckpt", ckpt["backend-20.json"])
    cli("finetune-joint", "--config", cfg_path, "--out", out, "--mode", "baseline",
        "--ckpt", ckpt["se_net-30.json"], "--ckpt", ckpt["backend-20.json"])
    cli("eval-control", "--config", cfg_path, "--out", root / "control.csv",
        "--ckpt", ckpt["snri_net-30.json"], "--ckpt", ckpt["se_net-30.json"])
    cli("eval-lambda", "--config", cfg_path, "--out", root / "lambda.csv",
        "--ckpt", run / "joint_proposed-20.json")
    cli("plot", root / "control.csv", "--out", root / "control.svg")
    for p in run.glob("*.json"):
        files[p.name] = p
    for name in ("control.csv", "control_summary.csv", "lambda.csv", "control.svg"):
        files[name] = root / name
    return {k: checkpoint.file_hash(p) for k, p in files.items()}


def test_c10_reproducibility(capsys, tmp_path, monkeypatch):
    cfg = RunConfig(run_id="repro")
    cfg = replace(cfg, train=replace(cfg.train, steps=30, backend_steps=20, finetune_steps=20,
                                     audit_every=10),
                  eval=replace(cfg.eval, n_utterances=4))
    cfg_path = cfg.save(tmp_path / "cfg.json")
    t0 = time.perf_counter()
    monkeypatch.setenv("SNRI_LAB_THREADS", "1")
    first = _pipeline(tmp_path / "a", cfg_path)
    monkeypatch.setenv("SNRI_LAB_THREADS", "2")
    second = _pipeline(tmp_path / "b", cfg_path)
    dt = time.perf_counter() - t0
    differ = sorted(k for k in first if first[k] != second.get(k))
    ok = set(first) == set(second) and not differ and len(first) >= 10
    report(capsys, 10, ok, f"{len(first)} artifacts hashed twice (1 and 2 workers), "
                           f"mismatches={differ} time={dt:.0f}s")
    assert ok
