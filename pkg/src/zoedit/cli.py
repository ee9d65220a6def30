"""Command-line entry points.

Subcommands: train-toy, calibrate, quantize, edit, eval, ablate, noiselab,
memstat. Every command takes an explicit --seed (no wall-clock seeding),
accepts --config pointing at a JSON file whose keys preload flag defaults
(explicit flags win), and honors ZOEDIT_OUTDIR as an output-dir override.

Artifacts are written atomically (temp file + rename). Exit codes:
0 success; 1 operational failure (edit did not converge, metric threshold
missed, stage error); 2 bad usage or unreadable inputs.

Deterministic outputs: report JSON excludes volatile telemetry (wall time,
peak memory), which goes to a *_telemetry.json sidecar instead — two runs
with the same seed produce byte-identical reports.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import bootstrap, evaluation, noiselab, quant, telemetry, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .editor import (
    EditLossEvaluator,
    EditRequest,
    ZOConfig,
    compute_key,
    edit,
    estimate_covariance,
    sample_prefixes,
)
from .errors import EditFailure, ZoeditError
from .model import ModelConfig
from .zo import CosineLR, StaticLR, zo_gradient


def write_json(path: str, obj, volatile: bool = False) -> None:
    """Atomic JSON write with stable key order."""
    dirpath = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(dirpath, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirpath, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def write_csv(path: str, header, rows) -> None:
    import csv

    dirpath = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(dirpath, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirpath, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _outdir(args) -> str:
    out = os.environ.get("ZOEDIT_OUTDIR", args.out)
    os.makedirs(out, exist_ok=True)
    return out


def _read_corpus(path: str, tok: bootstrap.Tokenizer) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [tok.encode(line) for line in f if line.strip()]


def _zo_config(args) -> ZOConfig:
    if args.schedule == "cosine":
        schedule = CosineLR(lr_max=args.lr_max, lr_min=args.lr_min)
    else:
        schedule = StaticLR(lr=args.lr_max)
    return ZOConfig(
        mu=args.mu,
        n_directions=args.n_directions,
        lr_schedule=schedule,
        max_steps=args.max_steps,
        check_period=args.check_period,
        success_threshold=args.threshold,
        kl_weight=args.kl_weight,
        use_early_stop=not args.no_early_stop,
        use_prefix_cache=not args.no_cache,
        rng_seed=args.seed,
    )


def _add_zo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-directions", type=int, default=5)
    p.add_argument("--max-steps", type=int, default=150)
    p.add_argument("--schedule", choices=("cosine", "static"), default="cosine")
    p.add_argument("--lr-max", type=float, default=0.5)
    p.add_argument("--lr-min", type=float, default=0.02)
    p.add_argument("--mu", type=float, default=1e-3)
    p.add_argument("--kl-weight", type=float, default=1.0)
    p.add_argument("--check-period", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-prefixes", type=int, default=4)
    p.add_argument("--cov-samples", type=int, default=120,
                   help="corpus sentences used for the key covariance")
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--no-cache", action="store_true")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_toy(args) -> int:
    out = _outdir(args)
    facts, corpus, tok = bootstrap.generate_corpus(args.n_facts, seed=args.seed)
    config = ModelConfig(
        n_layers=args.n_layers,
        d_model=args.d_model,
        d_mlp=args.d_mlp,
        n_heads=args.n_heads,
        vocab_size=len(tok),
        max_seq_len=args.max_seq_len,
    )
    bundle, report = trainer.train_toy(
        config, corpus, args.steps, facts=facts, tokenizer=tok,
        batch_size=args.batch_size, block_size=args.block_size,
        lr=args.lr, seed=args.seed,
    )
    save_checkpoint(bundle, os.path.join(out, "model.ckpt"))
    tok.save(os.path.join(out, "vocab.json"))
    write_json(os.path.join(out, "facts.json"), [f.to_dict() for f in facts])
    evaluation.write_dataset(
        os.path.join(out, "dataset.jsonl"),
        bootstrap.eval_records(facts, layer=args.edit_layer, seed=args.seed),
    )
    with open(os.path.join(out, "corpus.txt"), "w", encoding="utf-8") as f:
        for seq in corpus:
            f.write(tok.decode(seq) + "\n")
    write_json(os.path.join(out, "train_report.json"), report.to_dict())
    print(f"trained {args.steps}-step budget, recall={report.final_recall}")
    return 0


def cmd_calibrate(args) -> int:
    tok = bootstrap.Tokenizer.load(args.vocab)
    model = load_checkpoint(args.model)
    corpus = _read_corpus(args.corpus, tok)
    stats = quant.calibrate(model, corpus)
    write_json(args.out, {"site_max_abs": stats.site_max_abs,
                          "sample_count": stats.sample_count})
    print(f"calibrated {stats.sample_count} sequences over {len(stats.site_max_abs)} sites")
    return 0


def cmd_quantize(args) -> int:
    model = load_checkpoint(args.model)
    with open(args.stats, "r", encoding="utf-8") as f:
        raw = json.load(f)
    stats = quant.CalibrationStats(site_max_abs=raw["site_max_abs"],
                                   sample_count=raw["sample_count"])
    if args.all_fp:
        policy = quant.MixedPrecisionPolicy.all_fp(model.config)
    else:
        policy = quant.MixedPrecisionPolicy.default(model.config, args.edit_layer)
    qmodel = quant.quantize_model(model, stats, policy)
    save_checkpoint(qmodel, args.out)
    frac = quant.fp_flop_fraction(model.config, policy)
    print(f"quantized; floating-point matmul share {frac:.4f}")
    return 0


def cmd_edit(args) -> int:
    out = _outdir(args)
    tok = bootstrap.Tokenizer.load(args.vocab)
    model = load_checkpoint(args.model)
    with open(args.request, "r", encoding="utf-8") as f:
        req_raw = json.load(f)
    request = EditRequest(
        subject=tuple(tok.encode(req_raw["subject"])),
        fact_prompt=tuple(tok.encode(req_raw["prompt"])),
        target=tuple(tok.encode(req_raw["target"])),
        preservation_prompt=tuple(tok.encode(req_raw["preservation_prompt"])),
        edit_layer=int(req_raw["layer"]),
    )
    corpus = _read_corpus(args.corpus, tok)
    cov = estimate_covariance(model, request.edit_layer, corpus[: args.cov_samples])
    config = _zo_config(args)
    try:
        edited, report = edit(
            model, request, config, cov,
            prefix_corpus=corpus, n_prefixes=args.n_prefixes,
            track_memory=args.track_memory,
        )
    except EditFailure as e:
        write_json(os.path.join(out, "edit_report.json"),
                   e.report.to_dict(include_volatile=False))
        write_json(os.path.join(out, "edit_telemetry.json"),
                   {"wall_time_s": e.report.wall_time_s,
                    "peak_memory_bytes": e.report.peak_memory_bytes})
        print(f"edit failed: {e}", file=sys.stderr)
        return 1
    save_checkpoint(edited, os.path.join(out, "edited.ckpt"))
    write_json(os.path.join(out, "edit_report.json"),
               report.to_dict(include_volatile=False))
    write_json(os.path.join(out, "edit_telemetry.json"),
               {"wall_time_s": report.wall_time_s,
                "peak_memory_bytes": report.peak_memory_bytes})
    print(f"stop_reason={report.stop_reason} steps={report.steps_used} "
          f"confidence={report.confidence:.3f}")
    return 0 if report.stop_reason == "success" else 1


def _load_eval_inputs(args):
    tok = bootstrap.Tokenizer.load(args.vocab)
    model = load_checkpoint(args.model)
    cases = evaluation.load_dataset(args.dataset, tok, default_layer=0)
    corpus = _read_corpus(args.corpus, tok)
    return tok, model, cases, corpus


def cmd_eval(args) -> int:
    out = _outdir(args)
    tok, model, cases, corpus = _load_eval_inputs(args)
    config = _zo_config(args)
    cov = estimate_covariance(model, cases[0].request.edit_layer, corpus[: args.cov_samples])
    metrics, reports = evaluation.run_editing_suite(
        model, cases, config, cov, prefix_corpus=corpus, n_prefixes=args.n_prefixes
    )
    write_json(os.path.join(out, "metrics.json"), metrics.to_dict(), volatile=True)
    rows = [
        (i, int(c["edit_success"]), sum(c["rephrase_hits"]), len(c["rephrase_hits"]),
         sum(c["locality_hits"]), len(c["locality_hits"]))
        for i, c in enumerate(metrics.per_case)
    ]
    write_csv(os.path.join(out, "metrics.csv"),
              ["case", "edit_success", "rephrase_hits", "rephrases",
               "locality_hits", "locality_probes"], rows)
    print(f"edit_success={metrics.edit_success:.3f} locality={metrics.locality:.3f} "
          f"portability={metrics.portability:.3f}")
    failed = []
    if args.min_edit_success is not None and metrics.edit_success < args.min_edit_success:
        failed.append("edit_success")
    if args.min_locality is not None and metrics.locality < args.min_locality:
        failed.append("locality")
    if args.min_portability is not None and metrics.portability < args.min_portability:
        failed.append("portability")
    if failed:
        print(f"thresholds missed: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    out = _outdir(args)
    tok, model, cases, corpus = _load_eval_inputs(args)
    config = _zo_config(args)
    variants = args.variants.split(",")
    cov = estimate_covariance(model, cases[0].request.edit_layer, corpus[: args.cov_samples])
    result = evaluation.ablation_run(
        model, cases, variants, config, cov, prefix_corpus=corpus,
        n_prefixes=args.n_prefixes,
    )
    write_json(os.path.join(out, "ablation.json"), result, volatile=True)
    rows = [
        (v, r["edit_success"], r["mean_steps"], r["forward_calls"],
         r["matmul_flops"], f"{r['wall_time_s']:.3f}")
        for v, r in result.items()
    ]
    write_csv(os.path.join(out, "ablation.csv"),
              ["variant", "edit_success", "mean_steps", "forward_calls",
               "matmul_flops", "wall_time_s"], rows)
    for v, r in result.items():
        print(f"{v:14s} success={r['edit_success']:.2f} steps={r['mean_steps']:.1f} "
              f"time={r['wall_time_s']:.1f}s")
    return 0


def cmd_noiselab(args) -> int:
    depths = [int(d) for d in args.depths.split(",")]
    rows = noiselab.variance_sweep(
        depths=depths, trials=args.trials, sigma=args.sigma,
        spectral_norm=args.norm, seed=args.seed, dim=args.dim, delta=args.delta,
    )
    noiselab.write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"depth={r['depth']:3d} var_bp={r['var_bp']:.4e} var_zo={r['var_zo']:.4e} "
              f"normalized_zo={r['normalized_zo_var']:.3f}")
    return 0


def cmd_memstat(args) -> int:
    facts, corpus, tok = bootstrap.generate_corpus(args.n_facts, seed=args.seed)
    config = ModelConfig(
        n_layers=2, d_model=128, d_mlp=512, n_heads=4,
        vocab_size=len(tok), max_seq_len=64,
    )
    stream = bootstrap.token_stream(corpus, eos_id=tok.eos_id)
    toy = trainer.ToyTrainer(config, stream, batch_size=args.batch_size,
                             block_size=args.block_size, seed=args.seed)
    for _ in range(3):  # warm up Adam state so the measured step is steady-state
        toy.step()
    with telemetry.MemoryTracker() as trainer_mem:
        toy.step()
    tape_bytes = toy.last_tape_bytes

    bundle = toy.bundle()
    fact = facts[0]
    request = EditRequest(
        subject=tuple(tok.encode(fact.subject)),
        fact_prompt=tuple(tok.encode(fact.prompt(0))),
        target=tuple(tok.encode(fact.counterfactual)),
        preservation_prompt=tuple(tok.encode(fact.essence_prompt())),
        edit_layer=0,
    )
    prefixes = sample_prefixes(4, (2, 8), rng_seed=args.seed, corpus=corpus,
                               include_empty=True)
    key = compute_key(bundle, request, prefixes)
    evaluator = EditLossEvaluator(bundle, request, prefixes, kl_weight=1.0)
    evaluator.build_caches()
    v = bundle.w64("layers.0.mlp.w_down") @ key.k_star
    mu = 1e-3 * float(np.linalg.norm(v))
    zo_gradient(evaluator, v, mu, n_directions=5, rng_seed=args.seed)  # warm up
    with telemetry.MemoryTracker() as zo_mem:
        grad = zo_gradient(evaluator, v, mu, n_directions=5, rng_seed=args.seed)
        v = v - 0.5 * grad

    report = {
        "trainer_peak_bytes": trainer_mem.peak_bytes,
        "trainer_tape_bytes": tape_bytes,
        "activation_share": tape_bytes / max(trainer_mem.peak_bytes, 1),
        "zo_peak_bytes": zo_mem.peak_bytes,
        "zo_over_trainer_ratio": zo_mem.peak_bytes / max(trainer_mem.peak_bytes, 1),
    }
    write_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoedit",
        description="Forward-only knowledge editing for toy decoder transformers.",
    )
    parser.add_argument("--config", help="JSON file preloading flag defaults")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (read before numpy import by __main__)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train a synthetic-facts toy model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-facts", type=int, default=10)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--d-mlp", type=int, default=512)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--block-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--edit-layer", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("calibrate", help="collect activation-scale statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="emit a W8A16 mixed-quantized checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--edit-layer", type=int, default=0)
    p.add_argument("--all-fp", action="store_true",
                   help="degenerate policy keeping every tensor floating point")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("edit", help="inject one fact")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--request", required=True, help="JSON: subject/prompt/target/...")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--track-memory", action="store_true")
    _add_zo_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="edit every dataset case and score metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--min-edit-success", type=float, default=None)
    p.add_argument("--min-locality", type=float, default=None)
    p.add_argument("--min-portability", type=float, default=None)
    _add_zo_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare optimizer variants")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--variants", default="zo,zo+earlystop,zo+cache,full")
    _add_zo_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noiselab", help="backprop vs forward-difference noise sweep")
    p.add_argument("--depths", default="2,4,8,16")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--sigma", type=float, default=1e-2)
    p.add_argument("--norm", type=float, default=1.2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noiselab)

    p = sub.add_parser("memstat", help="trainer vs ZO peak-memory comparison")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-facts", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--block-size", type=int, default=32)
    p.set_defaults(func=cmd_memstat)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                overrides = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            print(f"bad config file: {e}", file=sys.stderr)
            return 2
        for sp in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in known})
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 2
    except ZoeditError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
