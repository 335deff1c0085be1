"""Command-line entry point: ``snri-lab <command> [options]``.

Exit codes: 0 success, 1 internal error or failed check, 2 usage or contract error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import harness as H
from . import metrics as M
from .audio import wav_read
from .config import RunConfig
from .errors import ContractError, IncompatibleCheckpoint, IoError, SnriLabError
from .models import Backend, PredNet, SnriNet
from .trainer import (RunLog, checkpoint_path, finetune_joint, load_networks, pretrain_backend,
                      pretrain_se, save_networks)

EXIT_OK, EXIT_INTERNAL, EXIT_CONTRACT = 0, 1, 2


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed),
                      eval=replace(cfg.eval, seed=args.seed))
    return cfg


def _gather(paths) -> dict:
    nets: dict = {}
    for p in paths or []:
        loaded, _ = load_networks(p)
        nets.update(loaded)
    return nets


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ------------------------------------------------------------------ commands

def cmd_mix(args) -> int:
    cfg = _load_config(args)
    corpus_cfg = cfg.corpus if args.split == "train" else cfg.eval.corpus
    corpus = H.make_corpus(corpus_cfg)
    lo, hi = args.snr_range or [cfg.eval.mix_snr_min, cfg.eval.mix_snr_max]
    seed = cfg.eval.seed if args.seed is None else args.seed
    path = H.cmd_mix(corpus, args.out, (lo, hi), args.n, seed)
    print(path)
    return EXIT_OK


def cmd_pretrain_se(args) -> int:
    cfg = _load_config(args)
    corpus = H.make_corpus(cfg.corpus)
    out = Path(args.out)
    kinds = ["snri", "conventional"] if args.kind == "both" else [args.kind]
    written = {}
    for kind in kinds:
        net_cfg = replace(cfg.snri_net, conditioned=kind == "snri")
        net = SnriNet(net_cfg, seed=cfg.train.seed)
        name = "snri_net" if kind == "snri" else "se_net"
        log = RunLog(out / cfg.run_id / f"{name}.log.jsonl")
        pretrain_se(cfg.train, corpus, net, log, kind=kind)
        path = checkpoint_path(out, cfg.run_id, name, cfg.train.steps)
        save_networks(path, {name: net}, {"kind": kind, "steps": cfg.train.steps,
                                          "seed": cfg.train.seed})
        written[name] = str(path)
    _print(written)
    return EXIT_OK


def cmd_pretrain_backend(args) -> int:
    cfg = _load_config(args)
    corpus = H.make_corpus(cfg.corpus)
    backend = Backend(cfg.backend, seed=cfg.train.seed)
    out = Path(args.out)
    pretrain_backend(cfg.train, corpus, backend, RunLog(out / cfg.run_id / "backend.log.jsonl"))
    path = checkpoint_path(out, cfg.run_id, "backend", cfg.train.backend_steps)
    save_networks(path, {"backend": backend}, {"steps": cfg.train.backend_steps,
                                               "seed": cfg.train.seed})
    test = H.make_corpus(cfg.eval.corpus)
    noisy = H.heldout_task(test, backend, (0.0, 0.0), cfg.eval.n_utterances, cfg.eval.seed)
    _print({"checkpoint": str(path), "clean_accuracy": H.clean_accuracy(test, backend),
            "noisy_0db_accuracy": noisy["accuracy"]})
    return EXIT_OK


def cmd_finetune_joint(args) -> int:
    cfg = _load_config(args)
    nets = _gather(args.ckpt)
    if "backend" not in nets:
        raise IncompatibleCheckpoint("finetune-joint needs a backend checkpoint")
    backend = nets["backend"]
    if args.mode == "proposed":
        if "snri_net" not in nets:
            raise IncompatibleCheckpoint("proposed mode needs an snri_net checkpoint")
        frontend = nets["snri_net"]
        pred_net = nets.get("pred_net") or PredNet(cfg.pred_net, seed=cfg.train.seed)
        name = "snri_net"
    else:
        if "se_net" not in nets:
            raise IncompatibleCheckpoint("baseline mode needs an se_net checkpoint")
        frontend, pred_net, name = nets["se_net"], None, "se_net"
    test = H.make_corpus(cfg.eval.corpus)
    snr_range = (cfg.eval.mix_snr_min, cfg.eval.mix_snr_max)

    def heldout():
        return H.heldout_task(test, backend, snr_range, cfg.eval.n_utterances, cfg.eval.seed,
                              frontend, pred_net)

    before = heldout()
    corpus = H.make_corpus(cfg.corpus)
    out = Path(args.out)
    stats = finetune_joint(cfg.train, corpus, frontend, backend, pred_net, args.mode,
                           RunLog(out / cfg.run_id / f"joint_{args.mode}.log.jsonl"))
    after = heldout()
    group = {name: frontend, "backend": backend}
    if pred_net is not None:
        group["pred_net"] = pred_net
    path = checkpoint_path(out, cfg.run_id, f"joint_{args.mode}", cfg.train.finetune_steps)
    save_networks(path, group, {"mode": args.mode, "steps": cfg.train.finetune_steps,
                                "seed": cfg.train.seed})
    _print({"checkpoint": str(path), "heldout_before": before, "heldout_after": after,
            "curriculum": {k: v for k, v in asdict(stats).items() if k != "extra"}})
    return EXIT_OK


def cmd_eval_control(args) -> int:
    cfg = _load_config(args)
    nets = _gather(args.ckpt)
    snri_net, se_net = nets.get("snri_net"), nets.get("se_net")
    if snri_net is None and se_net is None:
        raise IncompatibleCheckpoint("no snri_net or se_net in the given checkpoints")
    corpus = H.make_corpus(cfg.eval.corpus)
    targets = args.targets or cfg.eval.targets
    snrs = args.input_snrs or cfg.eval.input_snrs
    rows = H.eval_control(corpus, targets, snrs, cfg.eval.n_utterances, cfg.eval.seed,
                          snri_net, se_net, audio_dir=args.save_audio)
    path = H.write_csv(args.out, H.CONTROL_HEADER, rows)
    summary = H.write_csv(H.summary_path(args.out), H.SUMMARY_HEADER, H.summarize(rows))
    _print({"rows": str(path), "summary": str(summary)})
    return EXIT_OK


def cmd_eval_lambda(args) -> int:
    cfg = _load_config(args)
    nets = _gather(args.ckpt)
    if "snri_net" not in nets or "pred_net" not in nets:
        raise IncompatibleCheckpoint("eval-lambda needs a joint checkpoint with snri_net and pred_net")
    corpus = H.make_corpus(cfg.eval.corpus)
    snrs = args.input_snrs or cfg.eval.input_snrs
    rows = H.eval_lambda(corpus, cfg.eval.noise_kinds, snrs, cfg.eval.n_utterances,
                         cfg.eval.seed, nets["snri_net"], nets["pred_net"],
                         audio_dir=args.save_audio)
    path = H.write_csv(args.out, H.LAMBDA_HEADER, rows)
    _print({"rows": str(path), **H.lambda_report(rows)})
    return EXIT_OK


def cmd_metrics(args) -> int:
    s, n, y = (wav_read(p) for p in (args.clean, args.noise, args.enhanced))
    report = M.metrics_report(s, n, y, args.lambda_db)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    print(H.cmd_plot(args.csv, args.out))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_all
    results = run_all(seed=args.seed or 0, tol=args.tol)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e} "
              f"n={r.n_checked}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INTERNAL


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snri-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, seed=True, out=True, out_required=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="run config JSON")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the config seeds")
        if out:
            p.add_argument("--out", required=out_required, help="output path")
        p.set_defaults(func=fn)
        return p

    p = add("mix", cmd_mix, "write a mixture set of WAV triples")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--n", type=int, default=20, help="number of mixtures")
    p.add_argument("--snr-range", type=_floats, help="lo,hi in dB (default: eval preset)")

    p = add("pretrain-se", cmd_pretrain_se, "pretrain the SNRi-Net and/or a conventional net")
    p.add_argument("--kind", choices=["snri", "conventional", "both"], default="both")

    add("pretrain-backend", cmd_pretrain_backend, "pretrain the toy classifier")

    p = add("finetune-joint", cmd_finetune_joint, "joint fine-tuning with the backend")
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint (repeatable)")
    p.add_argument("--mode", choices=["proposed", "baseline"], default="proposed")

    p = add("eval-control", cmd_eval_control, "achieved vs target SNRi")
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint (repeatable)")
    p.add_argument("--targets", type=_floats, help="target SNRi list, e.g. 3,6,9,12")
    p.add_argument("--input-snrs", type=_floats, help="input SNR list, e.g. -5,5")
    p.add_argument("--save-audio", help="directory for the scored WAVs (s, n and every output)")

    p = add("eval-lambda", cmd_eval_lambda, "predicted targets per noise kind and input SNR")
    p.add_argument("--ckpt", action="append", required=True, help="joint checkpoint")
    p.add_argument("--input-snrs", type=_floats, help="input SNR list, e.g. -5,5")
    p.add_argument("--save-audio", help="directory for the scored WAVs (s, n and enhanced)")

    p = add("metrics", cmd_metrics, "SNR/SNRi/SAR of an enhanced WAV", config=False, seed=False,
            out=False)
    p.add_argument("clean")
    p.add_argument("noise")
    p.add_argument("enhanced")
    p.add_argument("--lambda-db", type=float, help="target SNRi for the snri_loss field")

    p = add("plot", cmd_plot, "SVG chart from an eval-control CSV", config=False, seed=False)
    p.add_argument("csv")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", config=False,
            out=False)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


_LIST_FLAGS = ("--targets", "--input-snrs", "--snr-range")


def _join_list_flags(argv: list[str]) -> list[str]:
    """``--input-snrs -5,5`` -> ``--input-snrs=-5,5`` so negative lists parse."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _LIST_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_list_flags(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONTRACT
    try:
        H.worker_count()
        return args.func(args)
    except (ContractError, IoError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except SnriLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
