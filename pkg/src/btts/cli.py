"""Command-line interface exposing the full pipeline.

Subcommands: synth, train, transfer, eval, sweep, shots, export-emb.
Exit codes: 0 success, 1 usage error, 2 runtime error. Every output file is
written atomically; report commands also render matplotlib figures next to
their delimited output unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .config import ConfigError, RunConfig
from .corpus import (build_vocab, default_style_specs, load_corpus, load_style_specs,
                     pair_context_target, synth_corpus, RATE_CONTROL_TOKENS)
from .evaluation import EvalExample, build_report, probe_classifier, rule_classifier
from .inference import (InferenceError, TransferConfig, load_exemplars, shot_size_sweep,
                        shots_to_csv, transfer)
from .io_utils import atomic_write_text
from .judge import RequestsTransport, judge_classifier
from .model import init_model, load_checkpoint, save_checkpoint
from .training import metrics_to_csv, sweep, sweep_to_csv, train

DEFAULT_LAMBDA_GRID = "1e-4,1e-3,1e-2,1e-1,1"
DEFAULT_DELTA_GRID = "1e-6,1e-5,1e-4,1e-3,1e-2"
DEFAULT_SHOT_SIZES = "30,16,8,4,2,1,0"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="btts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic style corpus")
    p.add_argument("--spec", help="style spec JSON (default: built-in two styles)")
    p.add_argument("--n-per-style", type=int, default=256, help="sentences per style (default 256)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--out", required=True, help="output corpus path (jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True, help="training corpus (jsonl)")
    p.add_argument("--format", choices=("jsonl", "plain"), default="jsonl",
                   help="corpus format (default jsonl)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--lambda", dest="lam", type=float, help="contrastive weight (default 1e-2)")
    p.add_argument("--delta", type=float, help="off-diagonal weight (default 1e-4)")
    p.add_argument("--steps", type=int, help="training steps (default 1000)")
    p.add_argument("--batch-size", type=int, help="batch size (default 16)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--bt-level", choices=("sentence", "paragraph", "both"),
                   help="contrastive level (default sentence)")
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="restyle sentences with exemplar sets")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--input", required=True, help="input sentences file, or - for stdin")
    p.add_argument("--src-exemplars", required=True, help="source-style exemplar file")
    p.add_argument("--tgt-exemplars", required=True, help="target-style exemplar file")
    p.add_argument("--beta", type=float, help="restyle strength (default 4.0)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--max-new-tokens", type=int, help="decode length cap (default 32)")
    p.add_argument("--mode", choices=("greedy", "beam"), help="decode mode (default greedy)")
    p.add_argument("--beam-width", type=int, help="beam width (default 1)")
    p.add_argument("--out", required=True, help="output transfers path (jsonl)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="score a transfers file")
    p.add_argument("--transfers", required=True, help="transfer output (jsonl)")
    p.add_argument("--classifier", required=True, choices=("judge", "rule", "probe"),
                   help="style classifier backend")
    p.add_argument("--labels", help="comma-separated label set (judge)")
    p.add_argument("--target-style", required=True, help="intended output style label")
    p.add_argument("--style-spec", help="style spec JSON (rule classifier)")
    p.add_argument("--model", help="model checkpoint (probe classifier)")
    p.add_argument("--corpus", help="labeled corpus (probe classifier)")
    p.add_argument("--judge-config",
                   help="run config JSON supplying the judge section "
                        "(default: built-in judge settings)")
    p.add_argument("--out", required=True, help="output report path (json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train a model per loss-weight grid cell")
    p.add_argument("--corpus", required=True, help="labeled training corpus (jsonl)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--lambda-grid", default=DEFAULT_LAMBDA_GRID,
                   help=f"comma-separated lambdas (default {DEFAULT_LAMBDA_GRID})")
    p.add_argument("--delta-grid", default=DEFAULT_DELTA_GRID,
                   help=f"comma-separated deltas (default {DEFAULT_DELTA_GRID})")
    p.add_argument("--steps", type=int, help="steps per cell (default 1000)")
    p.add_argument("--seed", type=int, help="shared per-cell seed (default 0)")
    p.add_argument("--no-figures", action="store_true", help="skip the heatmap figure")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("shots", help="shot-size ablation on a trained model")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--corpus", required=True, help="labeled corpus for pools and inputs")
    p.add_argument("--style-spec", required=True, help="style spec JSON (rule scoring)")
    p.add_argument("--src-style", required=True, help="style label of the inputs")
    p.add_argument("--tgt-style", required=True, help="style label to transfer into")
    p.add_argument("--sizes", default=DEFAULT_SHOT_SIZES,
                   help=f"comma-separated shot sizes (default {DEFAULT_SHOT_SIZES})")
    p.add_argument("--n-eval", type=int, default=50, help="evaluation inputs (default 50)")
    p.add_argument("--beta", type=float, help="restyle strength (default 4.0)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--no-figures", action="store_true", help="skip the trend figure")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_shots)

    p = sub.add_parser("export-emb", help="export style vectors as CSV")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--corpus", required=True, help="corpus to embed")
    p.add_argument("--format", choices=("jsonl", "plain"), default="jsonl",
                   help="corpus format (default jsonl)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_export_emb)

    return parser


def cmd_synth(args) -> str:
    specs = load_style_specs(args.spec) if args.spec else default_style_specs()
    sentences = synth_corpus(specs, args.n_per_style, args.seed)
    out = Path(args.out)
    lines = []
    for s in sentences:
        lines.append(json.dumps({"doc_id": s.doc_id, "sent_id": s.sent_id,
                                 "text": s.text, "style": s.style}, ensure_ascii=False))
    atomic_write_text(out, "\n".join(lines) + "\n")
    return f"wrote {len(sentences)} sentences ({len(specs)} styles) to {out}"


def _load_run_config(args, attr: str = "config") -> RunConfig:
    cfg = RunConfig.load(getattr(args, attr, None))
    for section, key, arg in (
        ("training", "seed", "seed"), ("training", "steps", "steps"),
        ("training", "batch_size", "batch_size"), ("training", "lr", "lr"),
        ("loss", "lambda", "lam"), ("loss", "delta", "delta"),
        ("loss", "bt_level", "bt_level"),
        ("inference", "beta", "beta"), ("inference", "decode_mode", "mode"),
        ("inference", "beam_width", "beam_width"),
        ("inference", "max_new_tokens", "max_new_tokens"),
    ):
        if hasattr(args, arg):
            cfg.override(section, key, getattr(args, arg))
    return cfg


def cmd_train(args) -> str:
    cfg = _load_run_config(args)
    sentences = load_corpus(args.corpus, format=args.format)
    train_cfg = cfg.train_config()
    control = RATE_CONTROL_TOKENS if train_cfg.corruption.emit_rate_tokens else ()
    vocab = build_vocab(sentences, control_tokens=control)
    pairs = pair_context_target(sentences)
    model = init_model(cfg.model_config(vocab.size), train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = train(model, vocab, pairs, train_cfg, checkpoint_dir=out)
    save_checkpoint(out / "model.ckpt", model, vocab,
                    {"seed": train_cfg.seed, "step": train_cfg.steps})
    atomic_write_text(out / "metrics.csv", metrics_to_csv(metrics))
    if metrics and not args.no_figures:
        from .plots import save_loss_curves
        save_loss_curves(metrics, out / "loss.png")
    final = metrics[-1].ce if metrics else float("nan")
    return (f"trained {train_cfg.steps} steps on {len(pairs)} pairs "
            f"(final ce={final:.4f}) -> {out}")


def cmd_transfer(args) -> str:
    model, vocab, _ = load_checkpoint(args.model)
    cfg = _load_run_config(args)
    tcfg = TransferConfig(beta=cfg.beta(), decode=cfg.decode_config())
    if args.input == "-":
        texts = [ln.strip() for ln in sys.stdin.read().splitlines() if ln.strip()]
    else:
        texts = [ln.strip() for ln in Path(args.input).read_text(encoding="utf-8").splitlines()
                 if ln.strip()]
    if not texts:
        raise InferenceError("no input sentences")
    src = load_exemplars(args.src_exemplars)
    tgt = load_exemplars(args.tgt_exemplars)
    results = [transfer(model, vocab, text, src, tgt, tcfg) for text in texts]
    atomic_write_text(args.out, "\n".join(r.to_json() for r in results) + "\n")
    return f"transferred {len(results)} sentences (beta={tcfg.beta:g}) -> {args.out}"


def _load_transfers(path: str) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    if not rows:
        raise ConfigError(f"{path}: no transfer records")
    return rows


def cmd_eval(args) -> str:
    rows = _load_transfers(args.transfers)
    examples = [EvalExample(r["input"], r["output"], args.target_style) for r in rows]
    if args.classifier == "rule":
        if not args.style_spec:
            raise ConfigError("--classifier rule requires --style-spec")
        classifier = rule_classifier(load_style_specs(args.style_spec))
    elif args.classifier == "probe":
        if not (args.model and args.corpus):
            raise ConfigError("--classifier probe requires --model and --corpus")
        model, vocab, _ = load_checkpoint(args.model)
        classifier = probe_classifier(model, vocab, load_corpus(args.corpus))
    else:
        if not args.labels:
            raise ConfigError("--classifier judge requires --labels")
        labels = [x.strip() for x in args.labels.split(",") if x.strip()]
        jcfg = RunConfig.load(args.judge_config).judge_config()
        classifier = judge_classifier(jcfg, RequestsTransport(), labels)
    report = build_report(examples, classifier)
    atomic_write_text(args.out, report.to_json() + "\n")
    return (f"accuracy={report.accuracy:.1f} bleu={report.bleu:.1f} "
            f"g={report.g:.1f} (n={report.n}) -> {args.out}")


def cmd_sweep(args) -> str:
    cfg = _load_run_config(args)
    sentences = load_corpus(args.corpus)
    base = cfg.train_config()
    cells = sweep(sentences, cfg.model_config(vocab_size=0), base,
                  _floats(args.lambda_grid), _floats(args.delta_grid))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "sweep.csv", sweep_to_csv(cells))
    if not args.no_figures:
        from .plots import save_sweep_heatmap
        save_sweep_heatmap(cells, out / "sweep_heatmap.png")
    best = max(cells, key=lambda c: c.probe_acc)
    return (f"swept {len(cells)} cells; best probe accuracy "
            f"{best.probe_acc:.1f}% at lambda={best.lam:g}, delta={best.delta:g} -> {out}")


def cmd_shots(args) -> str:
    model, vocab, _ = load_checkpoint(args.model)
    cfg = _load_run_config(args)
    sentences = load_corpus(args.corpus)
    specs = load_style_specs(args.style_spec)
    classifier = rule_classifier(specs)
    src_sents = [s.text for s in sentences if s.style == args.src_style]
    tgt_sents = [s.text for s in sentences if s.style == args.tgt_style]
    if not src_sents or not tgt_sents:
        raise ConfigError("corpus lacks sentences for the requested styles")
    rng = np.random.default_rng(args.seed)
    n_eval = min(args.n_eval, len(src_sents) // 2)
    eval_idx = set(int(i) for i in rng.choice(len(src_sents), size=n_eval, replace=False))
    eval_texts = [src_sents[i] for i in sorted(eval_idx)]
    src_pool = [t for i, t in enumerate(src_sents) if i not in eval_idx]
    sizes = _ints(args.sizes)
    from .evaluation import bleu
    tcfg = TransferConfig(beta=cfg.beta(), decode=cfg.decode_config())
    rows, _ = shot_size_sweep(model, vocab, eval_texts, src_pool, tgt_sents, sizes,
                              args.seed, tcfg, args.tgt_style, classifier, bleu)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "shots.csv", shots_to_csv(rows))
    if not args.no_figures:
        from .plots import save_shot_curves
        save_shot_curves(rows, out / "shots.png")
    return f"ran {len(rows)} shot sizes over {len(eval_texts)} inputs -> {out}"


def cmd_export_emb(args) -> str:
    model, vocab, _ = load_checkpoint(args.model)
    sentences = load_corpus(args.corpus, format=args.format)
    from .evaluation import export_embeddings
    atomic_write_text(args.out, export_embeddings(model, vocab, sentences))
    return f"exported {len(sentences)} style vectors -> {args.out}"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except (ConfigError, corpus_mod.CorpusError, InferenceError) as exc:
        print(f"btts: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"btts: error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
