"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 data validation failure,
4 missing artifact. Every command that writes outputs also writes a
``*.config.json`` record holding its argv and resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import __version__
from .datagen import MODES, PerturbConfig, build_pairs, generate_tasks
from .errors import ConfigurationError, FormatError, ValidationError
from .evaluation import evaluate, write_comparison
from .gradcheck import ordering_experiment, write_reports
from .losses import METHODS, LossConfig
from .rng import PRNG_NAME, SEED_SCHEME, derive_seed
from .spans import dataset_hash, read_dataset, validate_dataset, write_dataset
from .toylm import ToyLM, ToyModelConfig, load_weights, save_weights
from .trainer import (TrainConfig, Trainer, is_checkpoint, load_checkpoint_model, pretrain,
                      resume, write_metrics)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISSING = 0, 2, 3, 4

CHUNKED_MODES = {"LS", "GS", "LS-Mask", "GS-Mask"}


class _Usage(Exception):
    pass


class _Missing(Exception):
    pass


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise _Missing(f"{what} not found: {path}")
    return path


def _write_record(path, args, argv, **resolved):
    rec = {"argv": list(argv), "command": args.command, "version": __version__,
           "prng": PRNG_NAME, "seed_scheme": SEED_SCHEME,
           "flags": {k: v for k, v in vars(args).items() if k != "func"}}
    rec.update(resolved)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_model(path):
    _require_file(path, "model")
    if is_checkpoint(path):
        return load_checkpoint_model(path)
    return load_weights(path)


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v < 1:
            raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
        return v
    return conv


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv):
    if args.mask_min > args.mask_max:
        raise _Usage("--mask-min must not exceed --mask-max")
    if args.chunk_size is not None and args.mode not in CHUNKED_MODES:
        raise _Usage(f"--chunk-size only applies to {sorted(CHUNKED_MODES)}")
    try:
        cfg = PerturbConfig(mode=args.mode, mask_frac_range=(args.mask_min, args.mask_max),
                            chunk_size=args.chunk_size, seed=derive_seed(args.seed, "perturb"),
                            whole_frame_mask=args.whole_frame_mask)
    except ConfigurationError as exc:
        raise _Usage(str(exc)) from None
    tasks = generate_tasks(args.n_tasks, derive_seed(args.seed, "tasks"), prefix=args.prefix)
    try:
        pairs, summary = build_pairs(tasks, cfg, dedup=not args.no_dedup)
    except ConfigurationError as exc:
        raise _Usage(str(exc)) from None
    write_dataset(pairs, args.out)
    _write_record(args.out + ".config.json", args, argv,
                  perturb=dataclasses.asdict(cfg), summary=summary.as_dict(),
                  dataset_sha256=dataset_hash(pairs))
    print(json.dumps(summary.as_dict()))


def cmd_pretrain(args, argv):
    model = ToyLM(ToyModelConfig(seed=derive_seed(args.seed, "init") % 2**31))
    tasks = generate_tasks(args.n_tasks, derive_seed(args.seed, "sft-tasks"), prefix="sft")
    history = pretrain(model, tasks, steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                       seed=derive_seed(args.seed, "sft"))
    save_weights(model, args.out)
    _write_record(args.out + ".config.json", args, argv,
                  model=dataclasses.asdict(model.config), final_loss=history[-1])
    print(json.dumps({"final_loss": history[-1], "steps": args.steps}))


def _read_pairs(path, method=None):
    _require_file(path, "dataset")
    pairs = read_dataset(path)
    report = validate_dataset(pairs, method)
    if not pairs:
        raise ValidationError("dataset is empty")
    if not report.ok:
        for pid, problems in report.problems.items():
            print(f"{pid}: {'; '.join(problems)}", file=sys.stderr)
        raise ValidationError(f"{len(report.problems)} invalid pair(s) in {path}")
    return pairs


def cmd_train(args, argv):
    if args.steps < 1:
        raise _Usage("--steps must be >= 1")
    method = args.loss.upper()
    try:
        loss = LossConfig(method=method, alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                          tdpo_live=args.tdpo_live)
        cfg = TrainConfig(loss=loss, lr_max=args.lr, schedule=args.schedule,
                          warmup_ratio=args.warmup_ratio, steps=args.steps,
                          batch_size=args.batch_size, seed=args.seed,
                          weight_decay=args.weight_decay, clip_norm=args.clip_norm)
    except ConfigurationError as exc:
        raise _Usage(str(exc)) from None
    pairs = _read_pairs(args.data, method)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.bin")
    if args.resume:
        tr = resume(_require_file(args.resume, "checkpoint"), pairs)
    else:
        model = _load_model(args.base) if args.base else ToyLM(ToyModelConfig(seed=args.seed))
        tr = Trainer(model, pairs, cfg)
    tr.run(metrics_path=os.path.join(args.out_dir, "metrics.csv"))
    tr.save(ckpt)
    save_weights(tr.model, os.path.join(args.out_dir, "model.bin"))
    _write_record(os.path.join(args.out_dir, "train.config.json"), args, argv,
                  train=tr.cfg.to_dict(), model=dataclasses.asdict(tr.model.config),
                  dataset_sha256=tr.data_hash)
    last = tr.metrics[-1]
    print(json.dumps({"steps": tr.step_count, "final_loss": last.loss,
                      "final_margin": last.total_margin}))


def cmd_grad_report(args, argv):
    if not 0 < args.coverage <= 1:
        raise _Usage("--coverage must lie in (0, 1]")
    res = ordering_experiment(args.n, args.coverage, args.seed, alpha=args.alpha, beta=args.beta)
    write_reports(res.reports, args.out)
    _write_record(args.out + ".config.json", args, argv,
                  fractions={"rank_below_dpo": res.frac_rank_below_dpo,
                             "rrpo_below_rank": res.frac_rrpo_below_rank,
                             "both": res.frac_both,
                             "rank_bound": res.frac_rank_bound,
                             "dpo_bound": res.frac_dpo_bound})
    print(res.summary())


def _eval_setup(args):
    base = _load_model(args.base)
    pairs = _read_pairs(args.data) if args.data else []
    tasks = generate_tasks(args.n_tasks, derive_seed(args.seed, "eval-tasks"), prefix="eval")
    from .evaluation import make_probes
    return base, pairs, tasks, make_probes(tasks)


def _report(model, base, pairs, tasks, probes, name):
    from .evaluation import EvalReport, accuracy, divergence, pref_loglik_drop
    exclude = {p.id for p in pairs}
    if pairs:
        return evaluate(model, base, tasks, probes, pairs, name, exclude)
    return EvalReport(name, accuracy(model, tasks, exclude), divergence(model, base, probes),
                      float("nan"), len(tasks), len(probes))


def cmd_eval(args, argv):
    base, pairs, tasks, probes = _eval_setup(args)
    model = _load_model(args.model)
    rep = _report(model, base, pairs, tasks, probes, args.name)
    print(rep.to_record())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(rep.to_record() + "\n")
        _write_record(args.out + ".config.json", args, argv)


def cmd_compare(args, argv):
    base, pairs, tasks, probes = _eval_setup(args)
    reports = []
    for entry in args.models:
        name, _, path = entry.partition("=")
        if not path:
            raise _Usage(f"--models entries must be NAME=PATH, got {entry!r}")
        reports.append(_report(_load_model(path), base, pairs, tasks, probes, name))
    print(f"{'method':<16}{'accuracy':>10}{'mean_seq_kl':>14}{'pref_loglik_drop':>18}")
    for r in reports:
        print(f"{r.method:<16}{r.accuracy:>10.4f}{r.mean_seq_kl:>14.6f}{r.pref_loglik_drop:>18.6f}")
    if len(reports) >= 2 and reports[1].mean_seq_kl > 0:
        print(f"divergence ratio {reports[0].method}/{reports[1].method}: "
              f"{reports[0].mean_seq_kl / reports[1].mean_seq_kl:.4f}")
    if args.out:
        write_comparison(reports, args.out)
        _write_record(args.out + ".config.json", args, argv,
                      reports=[dataclasses.asdict(r) for r in reports])


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="rrpo", description="Toy self-alignment experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a span-annotated preference dataset")
    g.add_argument("--mode", choices=MODES, default="RS-Mask")
    g.add_argument("--mask-min", type=float, default=0.25)
    g.add_argument("--mask-max", type=float, default=0.50)
    g.add_argument("--chunk-size", type=int, default=None)
    g.add_argument("--whole-frame-mask", action="store_true")
    g.add_argument("--n-tasks", type=_positive(int), default=1000)
    g.add_argument("--prefix", default="task")
    g.add_argument("--no-dedup", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="supervised base model on clean tasks")
    s.add_argument("--n-tasks", type=_positive(int), default=600)
    s.add_argument("--steps", type=_positive(int), default=400)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=_positive(int), default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="align a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--base", default=None, help="weights or checkpoint to start from")
    t.add_argument("--resume", default=None, help="checkpoint to continue")
    t.add_argument("--loss", type=str.lower, choices=[m.lower() for m in METHODS], default="rrpo")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--beta", type=float, default=0.1)
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--tdpo-live", choices=("non_preferred", "preferred"), default="non_preferred")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    t.add_argument("--warmup-ratio", type=float, default=0.03)
    t.add_argument("--steps", type=int, default=100)
    t.add_argument("--batch-size", type=_positive(int), default=8)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--clip-norm", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("grad-report", help="gradient-norm bounds and ordering on random instances")
    r.add_argument("--n", type=_positive(int), default=1000)
    r.add_argument("--coverage", type=float, default=0.3)
    r.add_argument("--alpha", type=float, default=0.05)
    r.add_argument("--beta", type=float, default=0.1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_grad_report)

    for name, func in (("eval", cmd_eval), ("compare", cmd_compare)):
        e = sub.add_parser(name, help=f"{name} aligned models against a base model")
        e.add_argument("--base", required=True)
        e.add_argument("--data", default=None, help="pairs for the preferred-loglik drop")
        e.add_argument("--n-tasks", type=_positive(int), default=150)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", default=None)
        if name == "eval":
            e.add_argument("--model", required=True)
            e.add_argument("--name", default="model")
        else:
            e.add_argument("--models", nargs="+", required=True, metavar="NAME=PATH")
        e.set_defaults(func=func)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        args.func(args, argv)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _Missing as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as exc:
        print(f"invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as exc:
        print(f"bad file: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
