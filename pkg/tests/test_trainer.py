import json

import numpy as np
import pytest
from scipy import stats

from snri_lab import checkpoint
from snri_lab.audio import Corpus, plan_corpus
from snri_lab.errors import EmptyCorpus, IncompatibleCheckpoint, InvalidParams, NonFiniteValue
from snri_lab.models import Backend, BackendConfig, PredNet, PredNetConfig, SnriNet, SnriNetConfig
from snri_lab.trainer import (RunLog, TrainConfig, draw_lambda, finetune_joint, load_networks,
                              pretrain_backend, pretrain_se, sample_batch, save_networks,
                              step_rng)

TINY_SE = SnriNetConfig(encoder_basis=16, bottleneck=6, window_ms=4.0, hop_ms=2.0, n_blocks=1,
                        hidden=8)
TINY_PRED = PredNetConfig(n_blocks=1, hidden=6, n_mels=8)
TINY_BACKEND = BackendConfig(n_classes=10, n_blocks=1, hidden=6, n_mels=8)


@pytest.fixture(scope="module")
def corpus():
    return Corpus.render(plan_corpus(1, 2, seed=3, duration_s=0.3))


def cfg(**kw):
    base = dict(steps=5, finetune_steps=5, backend_steps=5, batch_size=2, utterance_s=0.1)
    return TrainConfig(**{**base, **kw})


def test_sample_batch_snr_and_crop(corpus):
    b = sample_batch(corpus, np.random.default_rng(0), 6, 800, (-5.0, 15.0))
    assert b.x.shape == (6, 800)
    np.testing.assert_allclose(b.x, b.s + b.n, atol=1e-15)
    got = 10 * np.log10(np.sum(b.s ** 2, 1) / np.sum(b.n ** 2, 1))
    np.testing.assert_allclose(got, b.snr_db, atol=1e-9)
    assert np.all((b.snr_db >= -5) & (b.snr_db <= 15))
    with pytest.raises(EmptyCorpus):
        sample_batch(corpus, np.random.default_rng(0), 2, 800, (0.0, 0.0), noise_pool=[])


def test_lambda_draws_are_uniform():
    lam = draw_lambda(np.random.default_rng(0), 10_000, 0.0, 20.0)
    assert stats.kstest(lam, stats.uniform(0.0, 20.0).cdf).statistic < 0.05
    assert lam.min() >= 0.0 and lam.max() <= 20.0


def test_step_rng_is_hierarchical():
    a = step_rng(1, 2, 3).random(4)
    np.testing.assert_array_equal(a, step_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, step_rng(1, 2, 4).random(4))
    assert not np.array_equal(a, step_rng(1, 3, 3).random(4))


def test_config_validation():
    with pytest.raises(InvalidParams):
        TrainConfig(random_lambda_prob=1.5)
    with pytest.raises(InvalidParams):
        TrainConfig(snr_min=5.0, snr_max=0.0)
    with pytest.raises(InvalidParams):
        TrainConfig(finetune_lr_scale=0.0)


def test_runlog_monotone_and_jsonl(tmp_path):
    log = RunLog(tmp_path / "log.jsonl")
    log.write({"phase": "a", "step": 0, "loss": 1.0})
    log.write({"phase": "b", "step": 0})
    log.event("a", "note", x=1)
    with pytest.raises(ValueError):
        log.write({"phase": "a", "step": 0})
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == log.records and len(lines) == 3
    assert [r["step"] for r in log.steps("a")] == [0]


def _pretrain(corpus, tmp_path, name, seed=0):
    net = SnriNet(TINY_SE, seed=seed)
    log = RunLog(tmp_path / f"{name}.jsonl")
    pretrain_se(cfg(seed=seed), corpus, net, log)
    return save_networks(tmp_path / f"{name}.json", {"snri_net": net}, {"seed": seed}), log


def test_pretrain_is_bit_reproducible(corpus, tmp_path):
    p1, log = _pretrain(corpus, tmp_path, "a")
    p2, _ = _pretrain(corpus, tmp_path, "b")
    p3, _ = _pretrain(corpus, tmp_path, "c", seed=1)
    assert checkpoint.file_hash(p1) == checkpoint.file_hash(p2)
    assert checkpoint.file_hash(p1) != checkpoint.file_hash(p3)
    steps = log.steps("pretrain_snri")
    assert [r["step"] for r in steps] == list(range(5))
    assert all(0.0 <= r["lambda_mean"] <= 20.0 for r in steps)


def test_pretrain_kind_checks(corpus):
    with pytest.raises(InvalidParams):
        pretrain_se(cfg(), corpus, SnriNet(TINY_SE), kind="conventional")
    conv = SnriNet(SnriNetConfig(**{**TINY_SE.__dict__, "conditioned": False}))
    with pytest.raises(InvalidParams):
        pretrain_se(cfg(), corpus, conv, kind="snri")
    before = conv.state()
    pretrain_se(cfg(), corpus, conv, kind="conventional")
    assert any(not np.array_equal(before[k], v) for k, v in conv.state().items())


def test_backend_pretraining_mixes_clean_and_noisy(corpus):
    log = RunLog()
    pretrain_backend(cfg(backend_steps=200, batch_size=4), corpus, Backend(TINY_BACKEND), log)
    n_clean = sum(r["n_clean"] for r in log.steps("pretrain_backend"))
    p = stats.binomtest(n_clean, 800, 0.5).pvalue
    assert p > 1e-3


def test_abort_on_non_finite(corpus):
    net = SnriNet(TINY_SE)
    net.p("mask.b").value[:] = np.nan
    log = RunLog()
    with pytest.raises(NonFiniteValue):
        pretrain_se(cfg(), corpus, net, log)
    assert log.records[-1]["event"] == "abort"


def _joint(corpus, mode, **kw):
    conditioned = mode == "proposed"
    se = SnriNet(SnriNetConfig(**{**TINY_SE.__dict__, "conditioned": conditioned}))
    pred = PredNet(TINY_PRED) if conditioned else None
    log = RunLog()
    st = finetune_joint(cfg(**kw), corpus, se, Backend(TINY_BACKEND), pred, mode, log)
    return st, log


def test_finetune_lr_scale_and_audit(corpus):
    st, log = _joint(corpus, "proposed", learning_rate=2e-3, finetune_lr_scale=0.1, audit_every=2)
    assert st.learning_rate == pytest.approx(2e-4, rel=0, abs=1e-18)
    start = log.records[0]
    assert start["event"] == "start" and start["learning_rate"] == st.learning_rate
    audits = [r for r in log.steps("finetune_proposed") if "audit_se_grad_norm" in r]
    assert len(audits) == st.audits == 3
    assert all(r["audit_se_grad_norm"] == 0.0 and r["audit_task_grad_norm"] > 0 for r in audits)
    assert 0.0 <= st.lambda_hat_min <= st.lambda_hat_max <= 20.0


@pytest.mark.parametrize("mode,prob_key,p", [("proposed", "skip_frontend_prob", 0.3),
                                             ("baseline", "baseline_skip_prob", 0.5)])
def test_curriculum_frequencies(corpus, mode, prob_key, p):
    n = 300
    st, log = _joint(corpus, mode, finetune_steps=n, batch_size=1, audit_every=0,
                     **{prob_key: p, "random_lambda_prob": 0.4})
    assert stats.binomtest(st.skipped, n, p).pvalue > 1e-3
    if mode == "proposed":
        assert stats.binomtest(st.random_lambda, n - st.skipped, 0.4).pvalue > 1e-3
        for r in log.steps("finetune_proposed"):
            assert (r["se"] is None) == r["skipped"]
    else:
        assert st.random_lambda == 0


def test_finetune_mode_checks(corpus):
    with pytest.raises(IncompatibleCheckpoint):
        finetune_joint(cfg(), corpus, SnriNet(TINY_SE), Backend(TINY_BACKEND), None, "proposed")
    with pytest.raises(IncompatibleCheckpoint):
        finetune_joint(cfg(), corpus, SnriNet(TINY_SE), Backend(TINY_BACKEND), None, "baseline")
    with pytest.raises(InvalidParams):
        finetune_joint(cfg(), corpus, SnriNet(TINY_SE), Backend(TINY_BACKEND), PredNet(TINY_PRED),
                       "other")


def test_checkpoint_round_trip(tmp_path):
    nets = {"snri_net": SnriNet(TINY_SE, seed=3), "pred_net": PredNet(TINY_PRED, seed=3),
            "backend": Backend(TINY_BACKEND, seed=3)}
    path = save_networks(tmp_path / "c.json", nets, {"k": 1})
    back, meta = load_networks(path)
    assert meta["k"] == 1 and set(back) == set(nets)
    for name, net in nets.items():
        assert back[name].cfg == net.cfg
        for k, v in net.state().items():
            np.testing.assert_array_equal(back[name].state()[k], v)
    again = save_networks(tmp_path / "d.json", back, {"k": 1})
    assert checkpoint.file_hash(path) == checkpoint.file_hash(again)
    checkpoint.save(tmp_path / "e.json", {"mystery": {"w": np.zeros(2)}}, {})
    with pytest.raises(IncompatibleCheckpoint):
        load_networks(tmp_path / "e.json")


@pytest.mark.slow
def test_backend_desk_accuracy():
    from snri_lab import harness as H
    from snri_lab.config import RunConfig
    cfg = RunConfig()
    backend = pretrain_backend(cfg.train, H.make_corpus(cfg.corpus), Backend(cfg.backend))
    test = H.make_corpus(cfg.eval.corpus)
    clean = H.clean_accuracy(test, backend)
    noisy = H.heldout_task(test, backend, (0.0, 0.0), cfg.eval.n_utterances, cfg.eval.seed)
    print(f"backend accuracy: clean {clean:.3f}, 0 dB {noisy['accuracy']:.3f}")
    assert clean >= 0.9
