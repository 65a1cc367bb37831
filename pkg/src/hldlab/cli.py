"""Command-line entry point: ``hldlab <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from hldlab.data import ByteTokenizer, MarkovSource, TokenDataset, VocabTokenizer, markov_dataset, tokenize_corpus
from hldlab.evaluation import load_mc_items, log_perplexity, mc_error_rate
from hldlab.flops import FlopsPlan
from hldlab.harness import GridSpec, load_records, report, run_grid
from hldlab.model import load_checkpoint
from hldlab.teacher_cache import cache_teacher, open_cache
from hldlab.trainer import load_config, plan_for, run


def _tokenizer(spec: str):
    if spec == "byte":
        return ByteTokenizer()
    if spec.startswith("vocab:"):
        return VocabTokenizer.from_file(spec[len("vocab:") :])
    raise SystemExit(f"unknown tokenizer {spec!r} (use 'byte' or 'vocab:<file>')")


def _dataset_for(config, override: str | None) -> TokenDataset | None:
    path = override or config.train_data
    return TokenDataset.load(path) if path else None


def cmd_ingest(args) -> int:
    src = Path(args.input)
    if src.is_dir():
        texts = [p.read_text(encoding="utf-8") for p in sorted(src.glob("*.txt"))]
        if not texts:
            raise SystemExit(f"{src}: no .txt documents")
        ds = tokenize_corpus(texts, _tokenizer(args.tokenizer), args.ctx, args.val_fraction, args.seed)
    else:
        spec = json.loads(src.read_text())
        m = spec["markov"]
        source = MarkovSource.with_entropy(m["num_states"], m["entropy"], m.get("seed", 0), m.get("support"))
        ds = markov_dataset(source, spec["num_train"], spec["num_val"], args.ctx, spec.get("seed", args.seed))
    ds.save(args.out)
    print(json.dumps({"out": args.out, "train": int(ds.train.shape[0]), "val": int(ds.val.shape[0]), "digest": ds.digest}))
    return 0


def cmd_cache_teacher(args) -> int:
    teacher = load_checkpoint(args.model)
    ds = TokenDataset.load(args.corpus)
    header = cache_teacher(
        teacher, ds.split(args.split), args.layer, args.top_k, args.out, args.logit_dtype, args.activation_dtype
    )
    print(json.dumps({"out": args.out, "records": header.num_records, "bytes": header.file_size}))
    return 0


def cmd_plan_flops(args) -> int:
    config = load_config(args.config)
    if args.p1 is not None:
        config = config.replace(p1=args.p1)
    plan = plan_for(args.method, config, _dataset_for(config, args.dataset), ot=args.ot)
    text = json.dumps(plan.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    ds = _dataset_for(config, args.dataset)
    if ds is None:
        raise SystemExit("no training data: set train_data in the config or pass --dataset")
    plan = FlopsPlan.from_json(args.plan) if args.plan else plan_for(args.method, config, ds)
    cache_path = args.cache or config.cache
    cache = open_cache(cache_path) if cache_path and args.method != "nll" else None
    state = run(args.method, config, plan, ds, cache, seed=args.seed, out_dir=args.out)
    print(json.dumps({"out": args.out, "steps": state.step, "cum_flops": state.cum_flops}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    if args.metric == "logppl":
        rep = log_perplexity(model, TokenDataset.load(args.dataset), split=args.split)
    else:
        tok = _tokenizer(args.tokenizer) if args.tokenizer else None
        norm = {"total": "total_nll", "pertoken": "per_token_nll"}[args.norm]
        rep = mc_error_rate(model, load_mc_items(args.dataset, tok), normalization=norm, name=Path(args.dataset).stem)
    print(json.dumps(rep.to_dict()))
    return 0


def cmd_grid(args) -> int:
    spec_path = Path(args.spec)
    raw = json.loads(spec_path.read_text())

    def rel(key):
        value = raw.pop(key, None)
        return None if value is None else str((spec_path.parent / value).resolve())

    config_path, data_path, cache_path = rel("config"), rel("dataset"), rel("cache")
    if config_path is None or data_path is None:
        raise SystemExit("grid spec needs 'config' and 'dataset' entries")
    spec = GridSpec(**raw)
    records = run_grid(spec, load_config(config_path), TokenDataset.load(data_path), cache_path, args.out)
    failed = [r.run_id for r in records if not r.ok]
    print(json.dumps({"runs": len(records), "failed": failed}))
    return 1 if failed else 0


def cmd_report(args) -> int:
    text = report(load_records(args.runs), args.kind, args.metric)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hldlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tokenize a text directory or sample a Markov spec")
    p.add_argument("--in", dest="input", required=True, help="directory of .txt documents, or a Markov JSON spec")
    p.add_argument("--tokenizer", default="byte", help="byte | vocab:<file>")
    p.add_argument("--ctx", type=int, required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cache-teacher", help="write teacher top-k logits and activations")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--logit-dtype", choices=["f32", "f16"], default="f32")
    p.add_argument("--activation-dtype", choices=["f32", "f16"], default="f32")
    p.set_defaults(func=cmd_cache_teacher)

    p = sub.add_parser("plan-flops", help="emit a compute-matched JSON plan")
    p.add_argument("--method", choices=["nll", "kd", "hldc", "hldf"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--ot", type=float, required=True)
    p.add_argument("--p1", type=float)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan_flops)

    p = sub.add_parser("train", help="train one student")
    p.add_argument("--method", choices=["nll", "kd", "hldc", "hldf"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--plan")
    p.add_argument("--cache")
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out log-perplexity or multiple-choice error")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=["logppl", "mc"], default="logppl")
    p.add_argument("--norm", choices=["total", "pertoken"], default="pertoken")
    p.add_argument("--split", default="val")
    p.add_argument("--tokenizer")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run a hyperparameter grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="CSV comparison tables from grid runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--kind", choices=["hist", "scatter", "best", "full"], required=True)
    p.add_argument("--metric")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
