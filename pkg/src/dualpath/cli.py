"""Command line entry point: ``dualpath {synth,train,eval,query,gradcheck}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from .config import RunConfig, parse_config, validate_run
from .data import generate_synthetic, iter_records, load_feature_table, split_dataset
from .errors import CheckpointError, ConfigurationError, DataError, DualPathError
from .retrieval import KIND_FOR_ABLATION, embed_corpus, embed_items, evaluate, rank_for_query

log = logging.getLogger("dualpath")

ABLATION_FLAGS = {"content": "content_only", "emotion": "emotion_only",
                  "splicing": "splicing", "interactive": "interactive"}
METRIC_FLAGS = {"contrastive": "contrastive", "batch": "batch_metric", "ppml": "ppml"}

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "lr": "learning_rate",
    "margin": "margin",
    "pairs": "num_pairs",
    "noise": "noise_sigma",
    "threads": "threads",
    "corpus": "corpus",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads (0 = library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--ablation", choices=sorted(ABLATION_FLAGS))
    model.add_argument("--metric", choices=sorted(METRIC_FLAGS))
    model.add_argument("--batch-size", type=int)
    model.add_argument("--epochs", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--margin", type=float)

    parser = _Parser(prog="dualpath", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic paired-feature dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", parents=[common, model], help="train one ablation on a dataset")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, default=Path("dualpath_run"))

    p = sub.add_parser("eval", parents=[common], help="Recall@K of a checkpoint on its test split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--corpus", choices=("test", "all"))

    p = sub.add_parser("query", parents=[common], help="rank music for one video")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--corpus", choices=("test", "all"))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--trials", type=int, default=20)
    return parser


def run_config(args) -> RunConfig:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "ablation", None):
        overrides["ablation"] = ABLATION_FLAGS[args.ablation]
    if getattr(args, "metric", None):
        overrides["metric_variant"] = METRIC_FLAGS[args.metric]
    cfg = parse_config(args.config, overrides)
    validate_run(cfg)
    return cfg


def _threads(n: int):
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _echo(cfg: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.render().splitlines())


def cmd_synth(args, cfg: RunConfig) -> int:
    out = generate_synthetic(cfg.synthetic_spec(), args.out, extra_files={"synth_config.txt": cfg.render()})
    print(out)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .plots import plot_loss_curves
    from .training import format_loss_log, save_checkpoint, train, write_atomic

    if args.data is None:
        raise UsageError("train: error: the following arguments are required: --data")
    data = load_feature_table(args.data)
    tcfg = cfg.train_config(data.dims)
    train_set, _ = split_dataset(data, cfg.seed, cfg.train_fraction)
    ckpt, history = train(tcfg, train_set)
    out = args.out
    save_checkpoint(ckpt, out / "checkpoint.dpvm")
    write_atomic(out / "loss_log.csv", (_echo(cfg) + format_loss_log(history)).encode())
    write_atomic(out / "config.txt", cfg.render().encode())
    plot_loss_curves(history, out / "loss_curves.png", title=f"{cfg.ablation} / {cfg.metric_variant}")
    print(out / "checkpoint.dpvm")
    return 0


def _load_run(args, cfg: RunConfig):
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    data = load_feature_table(args.data)
    tc = ckpt.config
    train_set, test_set = split_dataset(data, tc.seed, tc.train_fraction)
    corpus = data if cfg.corpus == "all" else test_set
    return ckpt, data, train_set, test_set, corpus


def cmd_eval(args, cfg: RunConfig) -> int:
    from .plots import plot_recall
    from .training import flat_config, write_atomic

    ckpt, _, train_set, test_set, corpus = _load_run(args, cfg)
    report = evaluate(ckpt, test_set, corpus=corpus, train=train_set)
    report.extra.update({"corpus": cfg.corpus, "checkpoint": str(args.checkpoint)})
    report.extra.update(flat_config(ckpt.config))
    label = ckpt.config.ablation
    write_atomic(args.out / "report.txt", report.render(label).encode())
    plot_recall({label: report}, args.out / "recall.png", title=f"{label} / {ckpt.config.loss.metric_variant}")
    print("\n".join(report.lines()))
    return 0


def cmd_query(args, cfg: RunConfig) -> int:
    ckpt, data, _, _, corpus = _load_run(args, cfg)
    if args.video not in data.videos:
        raise DataError(f"unknown video id {args.video!r}")
    kind = KIND_FOR_ABLATION[ckpt.config.ablation]
    index = embed_corpus(ckpt.params, list(iter_records(corpus, "music")), kind)
    q = embed_items(ckpt.params, [data.videos[args.video]], "video", kind)[0]
    print("rank,music_id,similarity")
    for rank, (mid, sim) in enumerate(rank_for_query(index, q, args.k), start=1):
        print(f"{rank},{mid},{sim:.6f}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, run_suite

    if args.trials < 1:
        raise ConfigurationError("--trials must be >= 1")
    worst = run_suite(cfg.seed, args.trials)
    for name, err in worst.items():
        print(f"{name} max_rel_err={err:.3e} {'PASS' if err <= TOLERANCE else 'FAIL'}")
    ok = max(worst.values()) <= TOLERANCE
    print(f"gradcheck seed={cfg.seed} trials={args.trials} tolerance={TOLERANCE:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "query": cmd_query, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = run_config(args)
        with _threads(cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except (ConfigurationError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DualPathError, ArithmeticError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
