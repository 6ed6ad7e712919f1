"""Single executable for the whole pipeline.

Subcommands: tokenizer-train, pack, pretrain, finetune, generate,
evaluate, judge-format, report. Every option can also come from a flat
`key = value` config file via --config; precedence is flags > file >
defaults. Each run writes a manifest plus a resolved config snapshot
beside its outputs, and rerunning from that snapshot is bit-identical.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import codecs
import json
import sys
from pathlib import Path

from . import __version__
from . import accounting, datapipe, metrics, textgen
from . import tokenizer as tok
from . import trainer
from .model import ModelConfig, init_weights, param_count
from .textgen import SamplerConfig
from .trainer import TrainPlan

MODEL_DEFAULTS = dict(dim=768, n_layers=12, n_heads=12, n_kv_groups=4,
                      ffn_hidden=2048, max_context=8192, rope_theta=10000.0,
                      shrink_factor=32.0, norm_eps=1e-5)
PLAN_DEFAULTS = dict(max_lr=0.003, min_lr=3e-4, warmup_steps=1000,
                     lr_decay_steps=100_000, batch_size=8, grad_accum_steps=8,
                     seq_len=8192, grad_clip_norm=1.0, weight_decay=0.1,
                     beta1=0.9, beta2=0.95, scheduler_kind="cosine")

COMMAND_DEFAULTS = {
    "tokenizer-train": dict(corpus=None, target_vocab=2000, out="vocab.ayn.txt",
                            clean=False),
    "pack": dict(corpus=None, vocab=None, seq_len=8192, split_fraction=0.95,
                 seed=0, out_dir="packed", clean=False),
    "pretrain": dict(train_shard=None, val_shard=None, vocab=None, out_dir="run",
                     seed=0, max_steps=None, eval_interval=50,
                     checkpoint_interval=100, peak_flops=312e12,
                     **MODEL_DEFAULTS, **PLAN_DEFAULTS),
    "finetune": dict(checkpoint=None, vocab=None, data=None,
                     out_dir="finetune-run", seed=0, epochs=3, batch_size=8,
                     grad_accum_steps=1, max_lr=2e-5, scheduler_kind="cosine",
                     warmup_ratio=0.05, mask_prompt=False, split_fraction=0.9,
                     peak_flops=312e12),
    "generate": dict(checkpoint=None, vocab=None, prompt_file=None, top_p=0.9,
                     temperature=1.0, max_new_tokens=128, seed=0, stop_eos=True),
    "evaluate": dict(task="summaries", data=None, out=None),
    "judge-format": dict(data=None, out=None),
    "report": dict(metrics=None, gpu_hours=0.0, gpu_power=0.0, pue=1.0,
                   intensity=0.385),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def parse_config_file(path: str | Path) -> dict:
    """Flat `key = value` lines; # starts a comment. Values parse as
    booleans, ints, floats, or (optionally quoted) strings."""
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        settings[key.replace("-", "_")] = _parse_value(value)
    return settings


def _parse_value(text: str):
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults, for the keys the command knows."""
    file_cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
    settings = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
        elif key in file_cfg:
            settings[key] = file_cfg[key]
        else:
            settings[key] = default
    return settings


def _write_manifest(out_dir: Path, subcommand: str, settings: dict,
                    inputs: list[str], outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "subcommand": subcommand,
        "settings": settings,
        "inputs": inputs,
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")
    lines = [f"{k} = {json.dumps(v) if isinstance(v, str) else v}"
             for k, v in settings.items() if v is not None]
    (out_dir / "resolved.config").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_documents(corpus: str) -> list[str]:
    path = Path(corpus)
    if path.is_dir():
        files = sorted(path.glob("**/*.txt"))
        if not files:
            raise ValueError(f"no .txt documents under {corpus}")
        return [f.read_text(encoding="utf-8") for f in files]
    return [path.read_text(encoding="utf-8")]


def _model_config(settings: dict, vocab_size: int) -> ModelConfig:
    keys = MODEL_DEFAULTS.keys()
    return ModelConfig(vocab_size=vocab_size, **{k: settings[k] for k in keys})


def _train_plan(settings: dict) -> TrainPlan:
    keys = PLAN_DEFAULTS.keys()
    return TrainPlan(**{k: settings[k] for k in keys})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_tokenizer_train(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["tokenizer-train"])
    if not s["corpus"]:
        raise UsageError("tokenizer-train needs --corpus")
    docs = _read_documents(s["corpus"])
    if s["clean"]:
        docs = [datapipe.clean_case_text(d) for d in docs]
    vocab = tok.train_bpe(docs, s["target_vocab"])
    out = Path(s["out"])
    tok.save_vocab(vocab, out)
    _write_manifest(out.parent, "tokenizer-train", s, [s["corpus"]], [str(out)])
    print(f"trained vocabulary of {len(vocab)} tokens -> {out}")
    return 0


def _cmd_pack(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["pack"])
    if not s["corpus"] or not s["vocab"]:
        raise UsageError("pack needs --corpus and --vocab")
    vocab = tok.load_vocab(s["vocab"])
    docs = _read_documents(s["corpus"])
    if s["clean"]:
        docs = [datapipe.clean_case_text(d) for d in docs]
    train_docs, val_docs = datapipe.split(docs, s["split_fraction"], s["seed"])
    out_dir = Path(s["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, part in (("train.shard", train_docs), ("val.shard", val_docs)):
        if not part:
            continue
        stream = datapipe.tokenize_documents(part, vocab)
        datapipe.write_token_shard(out_dir / name, stream, vocab=vocab,
                                   seq_len=s["seq_len"], split_seed=s["seed"])
        outputs.append(str(out_dir / name))
    _write_manifest(out_dir, "pack", s, [s["corpus"], s["vocab"]], outputs)
    print(f"packed {len(train_docs)}/{len(val_docs)} train/val documents -> {out_dir}")
    return 0


def _cmd_pretrain(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["pretrain"])
    if not s["train_shard"] or not s["vocab"]:
        raise UsageError("pretrain needs --train-shard and --vocab")
    vocab = tok.load_vocab(s["vocab"])
    config = _model_config(s, len(vocab))
    plan = _train_plan(s)
    stream, _ = datapipe.read_token_shard(s["train_shard"])
    windows = datapipe.windows_from_stream(stream, plan.seq_len, vocab.pad_id)
    val_windows = None
    if s["val_shard"]:
        val_stream, _ = datapipe.read_token_shard(s["val_shard"])
        val_windows = datapipe.windows_from_stream(val_stream, plan.seq_len, vocab.pad_id)
    out_dir = Path(s["out_dir"])
    _write_manifest(out_dir, "pretrain", s,
                    [s["train_shard"], s["vocab"]], [str(out_dir / "checkpoint.ayn")])
    weights = init_weights(config, seed=s["seed"])
    sink = trainer.RunSink(out_dir)
    try:
        state = trainer.pretrain(
            weights, config, windows, plan, seed=s["seed"], sink=sink,
            val_windows=val_windows, max_steps=s["max_steps"],
            eval_interval=s["eval_interval"],
            checkpoint_interval=s["checkpoint_interval"],
            peak_flops=s["peak_flops"])
    finally:
        sink.close()
    print(f"pretrained {param_count(config)} parameters for {state.step} steps -> {out_dir}")
    return 0


def _cmd_finetune(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["finetune"])
    if not s["checkpoint"] or not s["vocab"] or not s["data"]:
        raise UsageError("finetune needs --checkpoint, --vocab and --data")
    weights, config, _, _ = trainer.load_checkpoint(s["checkpoint"])
    vocab = tok.load_vocab(s["vocab"])
    records, removed = datapipe.dedup_instructions(datapipe.load_instructions(s["data"]))
    train_recs, val_recs = datapipe.split(records, s["split_fraction"], s["seed"])

    def to_example(rec):
        prompt = datapipe.format_instruction(rec, mode="inference")
        full = datapipe.format_instruction(rec, mode="train")
        ids = tok.encode(vocab, full) + [vocab.eos_id]
        ids = ids[:config.max_context]
        return trainer.FinetuneExample(ids=ids, prompt_len=len(tok.encode(vocab, prompt)))

    plan = TrainPlan.finetuning(
        max_lr=s["max_lr"], min_lr=0.1 * s["max_lr"], epochs=s["epochs"],
        batch_size=s["batch_size"], grad_accum_steps=s["grad_accum_steps"],
        seq_len=config.max_context, scheduler_kind=s["scheduler_kind"],
        mask_prompt=s["mask_prompt"])
    out_dir = Path(s["out_dir"])
    _write_manifest(out_dir, "finetune", s,
                    [s["checkpoint"], s["data"]], [str(out_dir / "checkpoint.ayn")])
    sink = trainer.RunSink(out_dir)
    try:
        result = trainer.finetune(
            weights, config, [to_example(r) for r in train_recs], plan,
            seed=s["seed"], warmup_ratio=s["warmup_ratio"],
            val_examples=[to_example(r) for r in val_recs] or None,
            sink=sink, peak_flops=s["peak_flops"])
    finally:
        sink.close()
    print(f"fine-tuned on {len(train_recs)} instructions ({removed} duplicates removed), "
          f"{result.steps} steps, val loss {result.val_loss}")
    return 0


def _cmd_generate(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["generate"])
    if not s["checkpoint"] or not s["vocab"]:
        raise UsageError("generate needs --checkpoint and --vocab")
    weights, config, _, _ = trainer.load_checkpoint(s["checkpoint"])
    vocab = tok.load_vocab(s["vocab"])
    if s["prompt_file"]:
        prompt = Path(s["prompt_file"]).read_text(encoding="utf-8")
    else:
        prompt = sys.stdin.read()
    cfg = SamplerConfig(
        top_p=s["top_p"], temperature=s["temperature"],
        max_new_tokens=s["max_new_tokens"], seed=s["seed"],
        stop_ids=frozenset({vocab.eos_id}) if s["stop_eos"] else frozenset())
    print(json.dumps({"seed": cfg.seed, "top_p": cfg.top_p,
                      "temperature": cfg.temperature,
                      "max_new_tokens": cfg.max_new_tokens}), file=sys.stderr)
    # stream as tokens arrive; the incremental decoder holds partial UTF-8
    decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
    specials = vocab.special_ids
    for i in textgen.stream_ids(weights, config, vocab, prompt, cfg):
        if i in specials:
            continue
        chunk = decoder.decode(vocab.tokens[i])
        if chunk:
            sys.stdout.write(chunk)
            sys.stdout.flush()
    sys.stdout.write(decoder.decode(b"", final=True))
    sys.stdout.write("\n")
    return 0


def _cmd_evaluate(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["evaluate"])
    if not s["data"]:
        raise UsageError("evaluate needs --data")
    rows = []
    with open(s["data"], encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    if s["task"] == "summaries":
        scores = metrics.evaluate_summaries(
            (r["candidate"], r["reference"]) for r in rows)
        report = {name: {"value": ms.value, "support": ms.support}
                  for name, ms in scores.items()}
    elif s["task"] == "judgements":
        preds = []
        for r in rows:
            try:
                preds.append(textgen.parse_judgement(r["prediction_text"]).label)
            except Exception:
                preds.append(None)
        truths = [int(r["truth_label"]) for r in rows]
        accuracy, macro_f1 = metrics.classification_scores(preds, truths)
        report = {"accuracy": {"value": accuracy, "support": len(rows)},
                  "macro_f1": {"value": macro_f1, "support": len(rows)}}
    else:
        raise UsageError(f"unknown task {s['task']!r}")
    text = json.dumps(report, indent=2)
    if s["out"]:
        Path(s["out"]).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_judge_format(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["judge-format"])
    if not s["data"]:
        raise UsageError("judge-format needs --data")
    payloads = []
    with open(s["data"], encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                payloads.append(json.dumps(metrics.judge_payload(
                    r["instruction"], r.get("input"), r["response"])))
    text = "\n".join(payloads)
    if s["out"]:
        Path(s["out"]).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_report(args) -> int:
    s = _resolve(args, COMMAND_DEFAULTS["report"])
    if not s["metrics"]:
        raise UsageError("report needs --metrics")
    steps, vals = [], []
    with open(s["metrics"], encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                (vals if "val_loss" in rec else steps).append(rec)
    if not steps:
        raise ValueError("metrics stream has no step records")
    mean = lambda key: sum(r[key] for r in steps) / len(steps)
    acc = accounting.RunAccounting(
        mean_loss=mean("loss"), tokens_per_sec=mean("tokens_per_sec"),
        gpu_hours=s["gpu_hours"], gpu_power_watts=s["gpu_power"],
        pue=s["pue"], carbon_intensity=s["intensity"])
    kwh, tco2 = accounting.carbon(acc.gpu_hours, acc.gpu_power_watts,
                                  acc.pue, acc.carbon_intensity)
    rows = [
        ("steps", f"{steps[-1]['step']}"),
        ("final loss", f"{steps[-1]['loss']:.4f}"),
        ("final perplexity", f"{accounting.perplexity(steps[-1]['loss']):.4f}"),
        ("mean tokens/sec", f"{acc.tokens_per_sec:.4f}"),
        ("mean MFU (%)", f"{mean('mfu'):.4f}"),
        ("energy (kWh)", f"{kwh:.4f}"),
        ("carbon (tCO2eq)", f"{tco2:.4f}"),
    ]
    if vals:
        rows.insert(3, ("val loss", f"{vals[-1]['val_loss']:.4f}"))
        rows.insert(4, ("val perplexity", f"{vals[-1]['perplexity']:.4f}"))
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="flat key = value settings file")


def _add_model_flags(p: _Parser) -> None:
    for key, default in MODEL_DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=type(default), default=None)


def _add_plan_flags(p: _Parser) -> None:
    for key, default in PLAN_DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=type(default), default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="lexlm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("tokenizer-train", help="train a BPE vocabulary")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--target-vocab", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--clean", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=_cmd_tokenizer_train)

    p = sub.add_parser("pack", help="tokenize and shard a corpus")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--split-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir")
    p.add_argument("--clean", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=_cmd_pack)

    p = sub.add_parser("pretrain", help="pretrain from a packed shard")
    _add_common(p)
    p.add_argument("--train-shard")
    p.add_argument("--val-shard")
    p.add_argument("--vocab")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument("--peak-flops", type=float, default=None)
    _add_model_flags(p)
    _add_plan_flags(p)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="instruction fine-tuning")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--data")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--grad-accum-steps", type=int, default=None)
    p.add_argument("--max-lr", type=float, default=None)
    p.add_argument("--scheduler-kind", default=None)
    p.add_argument("--warmup-ratio", type=float, default=None)
    p.add_argument("--mask-prompt", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--split-fraction", type=float, default=None)
    p.add_argument("--peak-flops", type=float, default=None)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--prompt-file")
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-new-tokens", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stop-eos", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against references")
    _add_common(p)
    p.add_argument("--task", choices=("summaries", "judgements"), default=None)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("judge-format", help="render LLM-judge request payloads")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_judge_format)

    p = sub.add_parser("report", help="summarize a metrics stream")
    _add_common(p)
    p.add_argument("--metrics")
    p.add_argument("--gpu-hours", type=float, default=None)
    p.add_argument("--gpu-power", type=float, default=None)
    p.add_argument("--pue", type=float, default=None)
    p.add_argument("--intensity", type=float, default=None)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "subcommand", None):
            parser.print_help(sys.stderr)
            return 1
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
