"""``hybridssm`` command line: train, convert, score, distill, evaluate, profile, generate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .attention import linear_attention_direct
from .config import RunConfig
from .distill import distill, train_teacher
from .evaluation import evaluate
from .hybrid import (
    ImportanceReport,
    assemble_hybrid,
    build_layout_importance,
    score_layers_cosine,
    score_layers_error,
)
from .layout import STRATEGIES, LayerKind, LayerLayout, build_layout, m_count, parse_ratio
from .mamba import mamba_forward_emulation
from .numerics import NonFiniteError, rel_err
from .profiler import ArchSpec, ProfileReport, parse_arch, qwen05b_like, ratio_archs, sweep
from .svg import line_chart
from .tasks import Dataset, generate, make_batch

log = logging.getLogger("hybridssm")


class UsageError(ValueError):
    pass


# -- shared plumbing ------------------------------------------------------------

CONFIG_FLAGS = {
    "seed": "seed",
    "lr": "distill.lr",
    "steps": "distill.steps",
    "batch_tokens": "distill.batch_tokens",
    "alpha": "distill.alpha",
    "lambda_ce": "distill.lambda_ce",
    "lambda_logits": "distill.lambda_logits",
    "lambda_emb": "distill.lambda_emb",
    "task": "task.kind",
    "text": "task.path",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="run config file of 'key = value' lines")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-tokens", dest="batch_tokens", type=int)
    g.add_argument("--alpha", type=float, help="skew KL mixing weight")
    g.add_argument("--lambda-ce", dest="lambda_ce", type=float)
    g.add_argument("--lambda-logits", dest="lambda_logits", type=float)
    g.add_argument("--lambda-emb", dest="lambda_emb", type=float)
    g.add_argument("--task", choices=("copy", "kv_recall", "textfile"))
    g.add_argument("--text", help="text file for --task textfile")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    for attr, key in CONFIG_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    train = generate(cfg.task_spec())
    if cfg.task.kind == "textfile":
        cut = max(1, len(train) // 10)
        if len(train) < 2:
            raise UsageError("text file too short to split into train and held-out windows")
        return train[:-cut], train[-cut:]
    return train, generate(cfg.task_spec(held_out=True))


def _check_out(path: str | None) -> None:
    if path and not Path(path).resolve().parent.is_dir():
        raise UsageError(f"output directory for {path} does not exist")


def _check_in(path: str | None, flag: str) -> None:
    if path is None:
        raise UsageError(f"missing required {flag}")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")


def _loss_svg(report, path: str, title: str) -> None:
    steps = [float(s) for s in report.column("step")]
    series = {k: (steps, [float(v) for v in report.column(k)]) for k in ("total", "ce", "logits", "emb")}
    series = {k: v for k, v in series.items() if any(np.isfinite(v[1]))}
    ckio.atomic_write_text(path, line_chart(series, title, "step", "loss"))


# -- commands -----------------------------------------------------------------------


def cmd_teacher_train(args) -> int:
    cfg = _run_config(args)
    for p in (args.out, args.loss_csv, args.svg):
        _check_out(p)
    train, held = _datasets(cfg)
    tok = cfg.task_spec().tokenizer()
    mcfg = cfg.model_config(tok.vocab_size)
    need = max(len(s.prompt) + len(s.target) for s in train + held)
    if need > mcfg.max_len:
        raise UsageError(f"sequences of length {need} exceed model.max_len {mcfg.max_len}")
    dcfg = cfg.distill_config()
    model, report = train_teacher(mcfg, dcfg, train, held, tok, init_seed=cfg.seed)
    ckio.save(ckio.Checkpoint(model, tok, cfg.seed, {"role": "teacher"}), args.out)
    if args.loss_csv:
        ckio.atomic_write_text(args.loss_csv, report.to_csv())
    if args.svg:
        _loss_svg(report, args.svg, "teacher training")
    print(f"wrote {args.out} ({model.num_params()} parameters)")
    return 0


def _emulation_selftest(teacher, student, seed: int = 0, length: int = 16) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tb, sb in zip(teacher.blocks, student.blocks):
        if sb.kind is not LayerKind.M:
            continue
        x = rng.standard_normal((1, length, teacher.config.d))
        ref = linear_attention_direct(tb.mixer, x).data
        got = mamba_forward_emulation(sb.mixer, x).data
        worst = max(worst, rel_err(got, ref))
    return worst


def cmd_convert(args) -> int:
    _check_in(args.teacher, "--teacher")
    _check_out(args.out)
    strategy = args.strategy.lower()
    if strategy == "importance" and not args.importance_report:
        raise UsageError("--strategy importance requires --importance-report")
    if args.importance_report:
        _check_in(args.importance_report, "--importance-report")
    ratio_t, ratio_m = parse_ratio(args.ratio)
    ck = ckio.load(args.teacher)
    depth = ck.model.config.depth
    if strategy == "importance":
        report = ImportanceReport.load(args.importance_report)
        if len(report.scores) != depth:
            raise UsageError(f"importance report covers {len(report.scores)} layers, teacher has {depth}")
        layout = build_layout_importance(report, m_count(depth, ratio_t, ratio_m))
    else:
        layout = build_layout(strategy, depth, ratio_t, ratio_m)
    student = assemble_hybrid(ck.model, layout)
    err = _emulation_selftest(ck.model, student)
    ckio.save(ckio.Checkpoint(student, ck.tokenizer, ck.seed, {"role": "student", "strategy": strategy,
                                                              "ratio": args.ratio}), args.out)
    print(f"layout {layout}")
    status = "PASS" if err < 1e-5 else "FAIL"
    print(f"self-test emulation max rel err {err:.3e} {status}")
    return 0 if err < 1e-5 else 1


def cmd_importance(args) -> int:
    _check_in(args.teacher, "--teacher")
    _check_out(args.out)
    cfg = _run_config(args)
    ck = ckio.load(args.teacher)
    _, held = _datasets(cfg)
    held = held[: args.samples]
    if args.criterion == "cosine":
        batch = make_batch(held, ck.tokenizer.PAD)
        report = score_layers_cosine(ck.model, batch.inputs, batch.valid)
    else:
        report = score_layers_error(ck.model, held, ck.tokenizer)
    ckio.atomic_write_text(args.out, report.to_csv())
    print(f"ranking (most replaceable first): {' '.join(map(str, report.ranking))}")
    return 0


def cmd_distill(args) -> int:
    _check_in(args.teacher, "--teacher")
    _check_in(args.student, "--student")
    for p in (args.out, args.loss_csv, args.svg):
        _check_out(p)
    cfg = _run_config(args)
    teacher = ckio.load(args.teacher)
    student = ckio.load(args.student)
    train, held = _datasets(cfg)
    dcfg = replace(cfg.distill_config(), freeze_attention=args.freeze_attention)
    trained, report = distill(teacher.model, student.model, dcfg, train, held, teacher.tokenizer)
    extra = dict(student.extra, role="distilled")
    ckio.save(ckio.Checkpoint(trained, student.tokenizer, cfg.seed, extra), args.out)
    if args.loss_csv:
        ckio.atomic_write_text(args.loss_csv, report.to_csv())
    if args.svg:
        _loss_svg(report, args.svg, f"distillation {trained.layout}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    _check_in(args.ckpt, "--ckpt")
    _check_out(args.out)
    cfg = _run_config(args)
    ck = ckio.load(args.ckpt)
    _, held = _datasets(cfg)
    res = evaluate(ck.model, held[: args.samples], ck.tokenizer, decode=not args.no_decode)
    out = dict(res.to_dict(), layout=str(ck.model.layout), samples=min(len(held), args.samples))
    text = json.dumps(out, sort_keys=True, indent=2) + "\n"
    if args.out:
        ckio.atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def _parse_grid(text: str) -> list[int]:
    try:
        grid = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--context-grid must be comma-separated integers, got {text!r}") from None
    if not grid or min(grid) < 1:
        raise UsageError("--context-grid needs positive context lengths")
    return grid


def cmd_profile(args) -> int:
    sources = [s for s in (args.ckpt, args.arch, args.preset) if s]
    if len(sources) != 1:
        raise UsageError("give exactly one of --ckpt, --arch, --preset")
    _check_out(args.out)
    _check_out(args.svg)
    grid = _parse_grid(args.context_grid)
    if args.ckpt:
        _check_in(args.ckpt, "--ckpt")
        arch = ArchSpec.from_model(ckio.load(args.ckpt).model, bytes_per_elem=args.bytes_per_elem or 4)
    elif args.arch:
        _check_in(args.arch, "--arch")
        arch = parse_arch(Path(args.arch).read_text())
    else:
        arch = qwen05b_like()
    if args.bytes_per_elem:
        arch = replace(arch, bytes_per_elem=args.bytes_per_elem)
    if args.ratios:
        archs = ratio_archs(arch, [parse_ratio(r) for r in args.ratios.split(",")], args.strategy)
        baseline = args.baseline or next(iter(archs))
    else:
        archs = {"model": arch, "all_T": replace(arch, layout=LayerLayout.all_t(arch.depth))}
        baseline = args.baseline or "all_T"
    report = sweep(archs, grid, baseline)
    text = report.to_csv()
    if args.out:
        ckio.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.svg:
        series = {n: ([float(r.L) for r in report.for_arch(n)], [float(r.total_cache_bytes) for r in report.for_arch(n)])
                  for n in archs}
        ckio.atomic_write_text(args.svg, line_chart(series, "cache size vs context", "context length", "bytes"))
    return 0


def cmd_generate(args) -> int:
    _check_in(args.ckpt, "--ckpt")
    if args.max_tokens < 1:
        raise UsageError("--max-tokens must be positive")
    ck = ckio.load(args.ckpt)
    tok = ck.tokenizer
    if tok.mode == "byte":
        ids = [tok.BOS] + list(tok.encode(args.prompt))
    else:
        named = {"BOS": tok.BOS, "SEP": tok.SEP, "EOS": tok.EOS, "PAD": tok.PAD}
        try:
            ids = [named[t] if t in named else int(t) for t in args.prompt.split()]
        except ValueError:
            raise UsageError("symbol prompts are space-separated ids or BOS/SEP/EOS/PAD") from None
        if any(i < 0 or i >= tok.vocab_size for i in ids):
            raise UsageError("prompt id outside the vocabulary")
    if not ids or len(ids) >= ck.model.config.max_len:
        raise UsageError(f"prompt must hold 1..{ck.model.config.max_len - 1} tokens")
    rng = np.random.default_rng(args.seed)
    out = ck.model.generate(np.array([ids]), args.max_tokens, stop=tok.EOS, top_k=args.topk, rng=rng)[0]
    seq = []
    for t in out:
        if t == tok.EOS:
            break
        seq.append(int(t))
    if tok.mode == "byte":
        sys.stdout.write(bytes(b for b in seq if b < 256).decode("utf-8", errors="replace") + "\n")
    else:
        print(" ".join(map(str, seq)))
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridssm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teacher-train", help="train an attention-only teacher")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--svg", help="loss curve chart")
    p.set_defaults(fn=cmd_teacher_train)

    p = sub.add_parser("convert", help="replace attention layers by transferred SSM layers")
    p.add_argument("--teacher", required=True)
    p.add_argument("--strategy", required=True, choices=STRATEGIES, type=str.lower)
    p.add_argument("--ratio", default="1:1", help="T:M, e.g. 1:3")
    p.add_argument("--importance-report", help="CSV from the importance command")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("importance", help="rank layers by how replaceable they are")
    _add_config_args(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--criterion", choices=("cosine", "error"), default="cosine")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_importance)

    p = sub.add_parser("distill", help="distil a converted student from its teacher")
    _add_config_args(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--freeze-attention", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--svg")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="held-out CE, accuracy and token error rate as JSON")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--no-decode", action="store_true", help="teacher-forced error rate only")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="analytic FLOPs and cache sweep as CSV")
    p.add_argument("--ckpt")
    p.add_argument("--arch", help="arch spec file")
    p.add_argument("--preset", choices=("qwen05b",))
    p.add_argument("--context-grid", default="128,256,512,1024,2048,4096")
    p.add_argument("--ratios", help="comma-separated T:M ratios, e.g. 1:0,1:1,1:3")
    p.add_argument("--strategy", default="blockbeg", choices=[s for s in STRATEGIES if s != "importance"])
    p.add_argument("--baseline", help="arch name the reductions are relative to")
    p.add_argument("--bytes-per-elem", type=int)
    p.add_argument("--out")
    p.add_argument("--svg")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("generate", help="decode a continuation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-tokens", type=int, default=32)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", help="argmax decoding (default)")
    mode.add_argument("--topk", type=int, default=0, help="sample from the k most likely tokens")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ValueError, KeyError, OSError, NonFiniteError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"hybridssm {args.command}: error: {msg}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
