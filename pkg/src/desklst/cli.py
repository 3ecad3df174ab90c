"""Command-line entry point: ``desklst <command> [options]``.

Every command prints one summary line on stdout.  Exit codes: 0 success,
2 usage / configuration / missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as X
from .checkpoint import average_checkpoints, load_checkpoint, load_into, save_checkpoint
from .config import PRESETS, load_config, parse_config_text
from .data import World, read_corpus
from .decoding import decode, evaluate
from .errors import DeskLSTError, NumericError
from .model import LSTModel
from .training import BACKEND_TIERS, FRONTEND_TIERS, make_encoded, train_stage

log = logging.getLogger("desklst")


class CommandError(Exception):
    """Maps to exit code 2."""


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    if out.exists() and not out.is_dir():
        raise CommandError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} is not empty (use --force to overwrite)")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CommandError(f"cannot create {out}: {e.strerror}") from None
    return out


def _config(args):
    overrides = {}
    if args.set:
        for item in args.set:
            if "=" not in item:
                raise CommandError(f"--set expects key=value, got {item!r}")
            k, v = (p.strip() for p in item.split("=", 1))
            overrides[k] = v
    parsed = parse_config_text("\n".join(f"{k} = {v}" for k, v in overrides.items()), "--set")
    return load_config(args.config, args.preset, **parsed)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} {p} not found")
    return p


def _world(path) -> World:
    _existing(Path(path) / "manifest.json", "corpus manifest")
    return World(path)


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> str:
    if args.seed is not None:
        cfg = replace(cfg, world_seed=args.seed)
    out = _out_dir(args, "data")
    path = X.gen_data(cfg, out)
    return f"manifest={path}"


def cmd_pretrain(args, cfg, part: str) -> str:
    if args.seed is not None:
        cfg = replace(cfg, model_seed=args.seed)
    world = _world(args.data) if args.tier != "random" else None
    out = Path(args.out or "foundation")
    target = out / f"{part}-{args.tier}.ckpt"
    if target.exists() and not args.force:
        raise CommandError(f"{target} exists (use --force to overwrite)")
    path, summary = X.pretrain_part(cfg, part, args.tier, world, out)
    (out / f"{part}-{args.tier}.summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    extra = " ".join(f"{k}={v:.4f}" for k, v in summary.items() if isinstance(v, float))
    return f"checkpoint={path} tier={args.tier} {extra}".rstrip()


def cmd_train(args, cfg) -> str:
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    if args.stage == 2 and not args.init and not args.allow_cold_start:
        raise CommandError("stage 2 needs --init <stage-1 checkpoint> (or --allow-cold-start)")
    world = _world(args.corpora)
    if args.init:
        model = X.model_from_checkpoint(_existing(args.init, "checkpoint"))
    else:
        model = LSTModel.create(cfg.model(), seed=seed)
        for part, path in (("frontend", args.frontend), ("backend", args.backend)):
            if path:
                load_into(model.store, load_checkpoint(_existing(path, f"{part} checkpoint")), [part])
    out = _out_dir(args, f"stage{args.stage}")
    scfg = cfg.stage(args.stage, args.data, seed)
    if args.max_steps is not None:
        scfg.max_steps = args.max_steps
    train = make_encoded(model, world.corpus(f"{args.data}.train"), args.data)
    dev = make_encoded(model, world.corpus(f"{args.data}.dev"), args.data)
    meta = {"init": Path(args.init).name if args.init else None, "stage1_data": args.data}
    res = train_stage(model, scfg, train, dev, out_dir=out, tag=f"stage{args.stage}", meta=meta)
    dev_rows = [r for r in res.metrics if r["split"] == "dev"]
    last = f" dev_loss={dev_rows[-1]['loss']:.4f}" if dev_rows else ""
    return f"checkpoint={res.final_checkpoint} steps={res.state.t}{last}"


def _corpus(path):
    return read_corpus(_existing(path, "corpus"))


def cmd_eval(args, cfg) -> str:
    if not args.ckpt and not args.oracle:
        raise CommandError("eval needs --ckpt")
    corpus = _corpus(args.corpus)
    model = X.model_from_checkpoint(_existing(args.ckpt, "checkpoint")) if args.ckpt else None
    hyps = [list(t.translation) for t in corpus] if args.oracle else None
    res = evaluate(model, corpus, beam=args.beam or cfg.beam, max_len=cfg.max_len,
                   n_buckets=cfg.n_buckets, hyps=hyps)
    out = _out_dir(args, "eval")
    res.write(out / "report.json", out / "sentences.tsv")
    with open(out / "buckets.tsv", "w", encoding="utf-8") as fh:
        fh.write("min_dur\tmax_dur\tcount\tbleu\n")
        for b in res.report.buckets:
            fh.write(f"{b['min_dur']}\t{b['max_dur']}\t{b['count']}\t{b['bleu']:.2f}\n")
    return f"BLEU={res.report.bleu:.2f}"


def cmd_decode(args, cfg) -> str:
    model = X.model_from_checkpoint(_existing(args.ckpt, "checkpoint"))
    corpus = _corpus(args.corpus)
    hyps = decode(model, [t.speech for t in corpus], beam=args.beam or cfg.beam, max_len=cfg.max_len)
    out = _out_dir(args, "decode")
    path = out / "hyps.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tlogprob\tfinished\thyp\n")
        for t, h in zip(corpus, hyps):
            toks = " ".join(model.vocab.token_str(x) for x in h.content(model.vocab.EOS))
            fh.write(f"{t.id}\t{h.logprob!r}\t{int(h.finished)}\t{toks}\n")
    return f"decoded={len(hyps)} out={path}"


def cmd_avg_ckpt(args, cfg) -> str:
    paths = [_existing(p, "checkpoint") for p in args.ckpts]
    if len(paths) < 2:
        raise CommandError("avg-ckpt needs at least two checkpoints")
    out = Path(args.out or "averaged.ckpt")
    if out.exists() and not args.force:
        raise CommandError(f"{out} exists (use --force to overwrite)")
    ck = average_checkpoints(paths)
    save_checkpoint(ck, out)
    return f"checkpoint={out} averaged={len(paths)}"


def cmd_ablate(args, cfg, kind: str) -> str:
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    ws = X.Workspace(args.out or "workspace", cfg)
    if args.prepare:
        if kind == "strategies":
            ws.prepare(("ctc",), ("mt",))
        elif kind == "frontend":
            ws.prepare(args.tiers or FRONTEND_TIERS, ("mt",))
        else:
            ws.prepare(("ctc",), args.tiers or BACKEND_TIERS)
    if kind == "strategies":
        rep = X.run_strategy_ablation(ws, args.labels or ("a", "b", "c", "d"), seeds, args.force)
    elif kind == "frontend":
        rep = X.run_frontend_ablation(ws, args.tiers or FRONTEND_TIERS, seeds, force=args.force)
    else:
        rep = X.run_backend_ablation(ws, args.tiers or BACKEND_TIERS, seeds, force=args.force)
    cells = " ".join(f"{r['name']}={_fmt(r['mean_stage1'])}/{_fmt(r['mean_stage2'])}" for r in rep.rows)
    return f"report={ws.reports_dir / (kind + '.json')} {cells}"


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def cmd_curves(args, cfg) -> str:
    out = Path(args.out or "curves.csv")
    if out.exists() and not args.force:
        raise CommandError(f"{out} exists (use --force to overwrite)")
    rows = X.merge_curves(args.csvs, out, args.names)
    return f"curves={out} rows={len(rows)}"


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named preset (default: toy)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for this command")
    common.add_argument("--out", help="output directory (or file for avg-ckpt / curves)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="desklst", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate ST, ASR and text corpora")

    for part, tiers in (("frontend", FRONTEND_TIERS), ("backend", BACKEND_TIERS)):
        s = sub.add_parser(f"pretrain-{part}", parents=[common], help=f"pretrain a {part} tier")
        s.add_argument("--tier", required=True, choices=tiers)
        s.add_argument("--data", default="data", help="corpus directory from gen-data")

    s = sub.add_parser("train", parents=[common], help="run stage 1 or stage 2")
    s.add_argument("--stage", type=int, required=True, choices=(1, 2))
    s.add_argument("--data", default="st", choices=("asr", "st"))
    s.add_argument("--corpora", default="data", help="corpus directory from gen-data")
    s.add_argument("--init", help="full-model checkpoint to start from (stage 1 output)")
    s.add_argument("--frontend", help="frontend checkpoint (when not using --init)")
    s.add_argument("--backend", help="backend checkpoint (when not using --init)")
    s.add_argument("--allow-cold-start", action="store_true", help="stage 2 from a fresh adapter")
    s.add_argument("--max-steps", type=int, help="stop after this many updates")

    for name, helptext in (("eval", "decode and score a corpus"), ("decode", "write hypotheses")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ckpt", required=name == "decode")
        s.add_argument("--corpus", required=True, help="JSONL corpus")
        s.add_argument("--beam", type=int)
        if name == "eval":
            s.add_argument("--oracle", action="store_true", help="score the references themselves (test hook)")

    s = sub.add_parser("avg-ckpt", parents=[common], help="average checkpoints")
    s.add_argument("ckpts", nargs="+")

    for kind in ("strategies", "frontend", "backend"):
        s = sub.add_parser(f"ablate-{kind}", parents=[common], help=f"{kind} ablation table")
        s.add_argument("--prepare", action="store_true",
                       help="generate missing corpora and foundation tiers first")
        if kind == "strategies":
            s.add_argument("--labels", nargs="+", choices=tuple(X.STRATEGIES))
        else:
            s.add_argument("--tiers", nargs="+", choices=FRONTEND_TIERS if kind == "frontend" else BACKEND_TIERS)

    s = sub.add_parser("curves", parents=[common], help="merge metrics CSVs into one dev-loss table")
    s.add_argument("csvs", nargs="+")
    s.add_argument("--names", nargs="+", help="run names (default: derived from paths)")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-frontend": lambda a, c: cmd_pretrain(a, c, "frontend"),
    "pretrain-backend": lambda a, c: cmd_pretrain(a, c, "backend"),
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "avg-ckpt": cmd_avg_ckpt,
    "ablate-strategies": lambda a, c: cmd_ablate(a, c, "strategies"),
    "ablate-frontend": lambda a, c: cmd_ablate(a, c, "frontend"),
    "ablate-backend": lambda a, c: cmd_ablate(a, c, "backend"),
    "curves": cmd_curves,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        line = COMMANDS[args.command](args, cfg)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CommandError, DeskLSTError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
