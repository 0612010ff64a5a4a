"""Command-line surface: bench, verify, train-draft, eval-tpc.

Configuration comes from an optional JSON file plus flag overrides; every
run is fully seeded, so repeated invocations differ only in wall-clock
columns. Human-readable tables go to stdout, CSV to --out, and a JSON
mirror of the same rows to --json.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import distill, verify
from .engine import models_from_dict
from .model import ModelConfig, init_base, init_draft, load_pair, save_pair

DEFAULT_BASE = dict(vocab_size=64, dim=32, n_heads=4, head_dim=8,
                    n_layers=3, ffn_hidden=64)
DEFAULT_DRAFT = dict(vocab_size=64, dim=32, n_heads=4, head_dim=8,
                     n_layers=1, ffn_hidden=64)


class CliError(RuntimeError):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read config {path}: {e}")


def _resolve_models(args, config):
    """(base, draft, model_tag) from checkpoint, config, or seeded init."""
    ckpt = getattr(args, "checkpoint", None) or config.get("checkpoint")
    if ckpt:
        base, draft = load_pair(ckpt)
        return base, draft, os.path.basename(ckpt)
    if "base_model" in config:
        base, draft = models_from_dict(config)
        return base, draft, "config"
    if not getattr(args, "random_weights", False):
        raise CliError("no model source: pass --checkpoint, a config with "
                       "base_model/draft_model, or --random-weights")
    seed = config.get("init_seed", args.seed)
    base = init_base(ModelConfig(**DEFAULT_BASE), seed)
    draft = init_draft(ModelConfig(**DEFAULT_DRAFT), seed + 1, base)
    return base, draft, "random"


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _write_rows(rows, fields, out_path, json_path):
    if out_path:
        with open(out_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {out_path}")
    if json_path:
        with open(json_path, "w") as f:
            json.dump(rows, f, indent=2, default=float)
            f.write("\n")
        print(f"wrote {json_path}")


# -- bench -------------------------------------------------------------------

def cmd_bench(args):
    config = _load_config(args.config)
    base, draft, model_tag = _resolve_models(args, config)
    trees = bench_mod.split_tree_list(args.trees)
    backends = [b for b in args.backends.split(",") if b] \
        if args.backends else None
    rows = bench_mod.run_grid(
        base, draft, model_tag,
        trees=trees,
        batches=_int_list(args.batch),
        contexts=_int_list(args.contexts),
        max_new=args.max_new,
        seed=args.seed,
        include_baseline=not args.no_baseline,
        speculative=args.speculative != "off",
        backends=backends,
    )
    print(bench_mod.to_table(rows))
    _write_rows(rows, bench_mod.FIELDS, args.out, args.json)
    return 0


# -- verify --------------------------------------------------------------

def cmd_verify(args):
    names = [args.suite] if args.suite else list(verify.SUITES)
    failed = 0
    for name in names:
        try:
            results = verify.run_suite(name)
        except KeyError as e:
            raise CliError(str(e))
        for res in results:
            status = "PASS" if res.passed else "FAIL"
            print(f"[{status}] {name}: {res.name} -- {res.detail}")
            failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} check(s) failed")
    return 1 if failed else 0


# -- train-draft ---------------------------------------------------------

def _read_curve(path):
    rows = []
    with open(path) as f:
        for rec in csv.DictReader(f):
            rows.append((int(rec["step"]), float(rec["total"]),
                         float(rec["ce"]), float(rec["l1"])))
    return rows


def _write_curve(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "total", "ce", "l1"])
        w.writerows(rows)


def cmd_train(args):
    config = _load_config(args.config)
    tcfg_kw = dict(config.get("train", {}))
    if args.steps is not None:
        tcfg_kw["steps"] = args.steps
    if args.lr is not None:
        tcfg_kw["lr"] = args.lr
    tcfg_kw.setdefault("seed", args.seed)
    tcfg = distill.TrainConfig(**tcfg_kw)

    prev_curve = []
    if args.resume:
        if not os.path.exists(args.out):
            raise CliError(f"--resume: checkpoint {args.out} not found")
        base, draft = load_pair(args.out)
        if os.path.exists(args.curve):
            prev_curve = _read_curve(args.curve)
    else:
        base, draft, _ = _resolve_models(args, config)

    corpus_kw = dict(config.get("corpus", {}))
    corpus_kw.setdefault("vocab_size", base.config.vocab_size)
    corpus_kw.setdefault("n_seqs", 64)
    corpus_kw.setdefault("seq_len", 24)
    corpus_kw.setdefault("seed", tcfg.seed + 1)
    corpus = distill.make_corpus(**corpus_kw)

    untrained = init_draft(draft.config, 10**6 + tcfg.seed, base)
    history = distill.train_draft(base, draft, corpus, tcfg)
    offset = prev_curve[-1][0] if prev_curve else 0
    curve = prev_curve + [(step + offset, t, c, l) for step, t, c, l
                          in history if step > 0 or not prev_curve]
    _write_curve(args.curve, curve)
    save_pair(args.out, base, draft)
    print(f"trained {tcfg.steps} steps; loss {history[0][1]:.4f} -> "
          f"{history[-1][1]:.4f}")
    print(f"wrote {args.out} and {args.curve}")

    rng = np.random.default_rng(tcfg.seed + 2)
    prompts = [list(rng.integers(0, base.config.vocab_size, size=6))
               for _ in range(8)]
    tpc_trained = distill.eval_tpc(base, draft, prompts,
                                   max_new_tokens=args.max_new)
    tpc_untrained = distill.eval_tpc(base, untrained, prompts,
                                     max_new_tokens=args.max_new)
    print(f"eval TPC (chain:3): trained {tpc_trained:.3f} vs "
          f"untrained {tpc_untrained:.3f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"steps": tcfg.steps,
                       "loss_first": history[0][1],
                       "loss_last": history[-1][1],
                       "tpc_trained": tpc_trained,
                       "tpc_untrained": tpc_untrained}, f, indent=2)
            f.write("\n")
    return 0


# -- eval-tpc --------------------------------------------------------------

def cmd_eval_tpc(args):
    config = _load_config(args.config)
    base, draft, model_tag = _resolve_models(args, config)
    rng = np.random.default_rng(args.seed)
    prompts = [list(rng.integers(0, base.config.vocab_size,
                                 size=args.prompt_len))
               for _ in range(args.prompts)]
    tpc = distill.eval_tpc(base, draft, prompts, tree=args.tree,
                           max_new_tokens=args.max_new,
                           temperature=args.temperature, seed=args.seed)
    print(f"model={model_tag} tree={args.tree} prompts={args.prompts} "
          f"tpc={tpc:.4f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"model_tag": model_tag, "tree": args.tree,
                       "prompts": args.prompts, "tpc": tpc}, f, indent=2)
            f.write("\n")
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="specdec",
        description="CPU speculative decoding: benchmarks, draft training, "
                    "and correctness suites.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="tree x batch x context grid sweep")
    b.add_argument("--config", help="JSON config file")
    b.add_argument("--checkpoint", help="model pair container")
    b.add_argument("--random-weights", action="store_true",
                   help="seeded random models instead of a checkpoint")
    b.add_argument("--trees", default="chain:3",
                   help="comma list, e.g. chain:3,full:2,2")
    b.add_argument("--batch", default="1", help="comma list of batch sizes")
    b.add_argument("--contexts", default="32",
                   help="comma list of prompt lengths")
    b.add_argument("--max-new", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--speculative", choices=("on", "off"), default="on",
                   help="off: baseline rows only")
    b.add_argument("--no-baseline", action="store_true",
                   help="skip the non-speculative baseline rows")
    b.add_argument("--backends",
                   help="comma list of kernel backends to sweep")
    b.add_argument("--out", help="CSV output path")
    b.add_argument("--json", help="JSON output path")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run correctness suites")
    v.add_argument("--suite", choices=sorted(verify.SUITES),
                   help="run one suite instead of all")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train-draft", help="distill the draft model")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--checkpoint", help="starting model pair")
    t.add_argument("--random-weights", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-new", type=int, default=24,
                   help="tokens per prompt in the closing TPC report")
    t.add_argument("--out", default="draft.ckpt", help="checkpoint path")
    t.add_argument("--curve", default="training_curve.csv",
                   help="loss curve CSV path")
    t.add_argument("--resume", action="store_true",
                   help="continue from --out and extend the curve")
    t.add_argument("--json", help="JSON summary path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-tpc", help="tokens per round on seeded prompts")
    e.add_argument("--config", help="JSON config file")
    e.add_argument("--checkpoint", help="model pair container")
    e.add_argument("--random-weights", action="store_true")
    e.add_argument("--tree", default="chain:3")
    e.add_argument("--prompts", type=int, default=16)
    e.add_argument("--prompt-len", type=int, default=8)
    e.add_argument("--max-new", type=int, default=32)
    e.add_argument("--temperature", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", help="JSON output path")
    e.set_defaults(func=cmd_eval_tpc)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
