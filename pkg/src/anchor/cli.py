"""``anchor`` command line.

Every configuration key can be set in a JSON config file (flat dotted keys)
and overridden by a flag of the same name, e.g. ``--attack.train.eps 0.02``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

from anchor import __version__, pipeline, settings

USAGE_ERROR = 1
RUNTIME_ERROR = 2

SUBCOMMANDS = ("gen-data", "pretrain", "apt", "baseline", "eval", "gradcheck", "oracle-check")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="anchor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"anchor {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="JSON file of dotted configuration keys")
        if out:
            p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="alias for train.seed")
        p.add_argument("--eval-workers", type=int, help="alias for eval.workers")
        return p

    common(sub.add_parser("gen-data", help="write train/test dataset files"))
    common(sub.add_parser("pretrain", help="phase 1: contrastive adversarial pretraining"))
    p = common(sub.add_parser("apt", help="phase 2: adversarial partial training of a fresh classifier"))
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    common(sub.add_parser("baseline", help="clean cross-entropy comparison arm"))
    p = common(sub.add_parser("eval", help="clean and PGD robust accuracy of a checkpoint"), out=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eps", type=float, help="alias for attack.eval.eps")
    p.add_argument("--out", help="optional JSON file for the result")
    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0, help="first of three consecutive seeds")
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("oracle-check", help="compare losses against brute-force oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    return parser


def parse_dotted(extra):
    """``['--a.b', '1', '--c.d=2']`` -> ``{'a.b': '1', 'c.d': '2'}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if key not in settings.DEFAULTS:
            raise UsageError(f"unknown flag --{key}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def resolve_config(args, extra):
    file_cfg = settings.load_file(args.config) if getattr(args, "config", None) else {}
    overrides = parse_dotted(extra)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "eval_workers", None) is not None:
        overrides["eval.workers"] = args.eval_workers
    if getattr(args, "eps", None) is not None:
        overrides["attack.eval.eps"] = args.eps
    return settings.resolve(file_cfg, overrides)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, args):
    from anchor.data import save_dataset

    train, test = pipeline.load_data(cfg)
    manifest, _ = pipeline.prepare_run(cfg, args.out)
    for ds in (train, test):
        save_dataset(ds, os.path.join(args.out, f"{ds.split}.bin"))
    print(json.dumps({"train": len(train), "test": len(test), "run_id": manifest["run_id"]}))


def _eval_record(cfg, bundle, test):
    res = pipeline.evaluate(bundle, test, pipeline.attack_config(cfg, "eval"),
                            workers=cfg["eval.workers"], strong_restarts=cfg["eval.strong_restarts"])
    return res


def _train(cfg, args, phase):
    from anchor.models import load_checkpoint

    train, test = pipeline.load_data(cfg)
    manifest, writer = pipeline.prepare_run(cfg, args.out)
    if phase == "pretrain":
        bundle = pipeline.pretrain(cfg, train, test, writer)
    elif phase == "apt":
        bundle = pipeline.adversarial_partial_train(cfg, train, load_checkpoint(args.ckpt), test, writer)
    else:
        bundle = pipeline.baseline_ce_train(cfg, train, test, writer)
    pipeline.finish_checkpoint(args.out, manifest, bundle, f"{phase}.ckpt")
    result = {"run_id": manifest["run_id"], "checkpoint": os.path.join(args.out, f"{phase}.ckpt")}
    if test is not None:
        result.update(_eval_record(cfg, bundle, test))
    print(json.dumps(result))


def cmd_eval(cfg, args):
    from anchor.models import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    _, test = pipeline.load_data(cfg)
    if test is None:
        raise UsageError("eval needs a test split (data.test_path or generated data)")
    res = _eval_record(cfg, bundle, test)
    text = json.dumps(res)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_gradcheck(args):
    from anchor.verify import gradient_suite

    seeds = (args.seed, args.seed + 1, args.seed + 2)
    worst = gradient_suite(seeds)
    for name, err in sorted(worst.items()):
        print(f"{err:10.3e}  {name}")
    top = max(worst.values())
    print(f"max relative error {top:.3e} over seeds {list(seeds)} (tolerance {args.tol:g})")
    return 0 if top < args.tol else RUNTIME_ERROR


def cmd_oracle_check(args):
    from anchor.verify import oracle_suite

    worst = oracle_suite(args.batches, args.seed)
    for name, err in sorted(worst.items()):
        print(f"{err:10.3e}  {name}")
    top = max(worst.values())
    print(f"max absolute error {top:.3e} over {args.batches} batches (tolerance {args.tol:g})")
    return 0 if top < args.tol else RUNTIME_ERROR


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose one of {', '.join(SUBCOMMANDS)}")
        if args.command == "gradcheck":
            if extra:
                raise UsageError(f"unexpected arguments {extra}")
            return cmd_gradcheck(args)
        if args.command == "oracle-check":
            if extra:
                raise UsageError(f"unexpected arguments {extra}")
            return cmd_oracle_check(args)
        cfg = resolve_config(args, extra)
    except (UsageError, settings.ConfigError) as exc:
        print(f"anchor: error: {exc}", file=sys.stderr)
        return USAGE_ERROR

    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, args)
        elif args.command == "eval":
            cmd_eval(cfg, args)
        else:
            _train(cfg, args, args.command)
    except UsageError as exc:
        print(f"anchor: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # reported as a runtime failure
        print(f"anchor: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
