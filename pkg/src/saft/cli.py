"""Command-line driver.

Subcommands: ``sensitivity`` (per-layer std report and plot), ``train``
(clean / full noise-injection / sensitivity-aware), ``compare`` (paired runs,
one table row per noise configuration) and ``oracle`` (brute-force layer
drops vs the std and KL rankings).

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
`SAFT_THREADS` caps internal parallelism (oracle evaluations).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .model import ModelGraph, build_model, load_checkpoint_file, save_checkpoint_file
from .noise import NoiseSpec, wrap_noisy
from .sensitivity import (
    brute_force_oracle,
    compute_stats,
    kl_sensitivity,
    rank_agreement,
    select_top_k,
)
from .trainer import evaluate, full_plan, noise_injection_train, saft_pipeline
from . import report


def _threads() -> int:
    raw = os.environ.get("SAFT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SAFT_THREADS must be an integer, got {raw!r}")


def _zero_noise(seed: int) -> NoiseSpec:
    return NoiseSpec("gaussian", "multiplicative", 0.0, seed)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pretrained_model(cfg: ExperimentConfig, train, test) -> ModelGraph:
    """Load the configured checkpoint, or pretrain a clean model from scratch."""
    if cfg.pretrained:
        return load_checkpoint_file(cfg.pretrained)
    model = build_model(cfg.layers, cfg.input_shape, cfg.init_seed)
    noise_injection_train(
        model, _zero_noise(cfg.pretrain.seed), full_plan(model), cfg.pretrain, train, test
    )
    return model


def suggest_k(report_obj) -> int:
    """Knee heuristic: cut at the largest relative gap in the sorted stds.

    A suggestion to eyeball against the plot, nothing more.
    """
    stds = [report_obj.per_layer[lid].std for lid in report_obj.ranking]
    best_k, best_gap = 1, -1.0
    for i in range(len(stds) - 1):
        if stds[i] <= 0:
            break
        gap = (stds[i] - stds[i + 1]) / stds[i]
        if gap > best_gap:
            best_gap, best_k = gap, i + 1
    return best_k


def cmd_sensitivity(cfg: ExperimentConfig, want_suggestion: bool = False) -> dict:
    train, test = cfg.dataset.load()
    model = _pretrained_model(cfg, train, test)
    noisy = wrap_noisy(model, cfg.noise)
    batch = train.inputs[: cfg.train.batch_size]
    rep = compute_stats(model, noisy, batch, repeat=cfg.sensitivity_repeat)
    select_top_k(rep, cfg.k)
    kls = kl_sensitivity(model, noisy, batch)
    out = _out_dir(cfg)
    csv_path = out / "report.csv"
    csv_path.write_text(report.sensitivity_csv(rep, model, kl=kls), encoding="utf-8")
    svg_path = out / "sensitivity.svg"
    report.sensitivity_svg(rep, model, svg_path)
    print(f"wrote {csv_path} and {svg_path}")
    print("ranking (most sensitive first):", ", ".join(rep.ranking))
    if want_suggestion:
        print(f"suggested k (largest relative std gap, heuristic): {suggest_k(rep)}")
    return {"report": rep, "csv": csv_path, "svg": svg_path}


def cmd_train(cfg: ExperimentConfig, mode: str) -> dict:
    if mode not in ("clean", "full", "saft"):
        raise ConfigError(f"mode must be clean, full or saft, got {mode!r}")
    train, test = cfg.dataset.load()
    out = _out_dir(cfg)
    extras: dict = {}
    if mode == "clean":
        model = build_model(cfg.layers, cfg.input_shape, cfg.init_seed)
        result = noise_injection_train(
            model, _zero_noise(cfg.train.seed), full_plan(model), cfg.train, train, test
        )
    elif mode == "full":
        model = _pretrained_model(cfg, train, test)
        result = noise_injection_train(
            model, cfg.noise, full_plan(model), cfg.train, train, test, eval_seed=cfg.eval_seed
        )
    else:
        model = _pretrained_model(cfg, train, test)
        run = saft_pipeline(
            model, cfg.noise, cfg.k, cfg.train, train, test,
            repeat=cfg.sensitivity_repeat, eval_seed=cfg.eval_seed,
        )
        result = run.result
        extras["report"] = run.report
        (out / "report.csv").write_text(
            report.sensitivity_csv(run.report, model), encoding="utf-8"
        )
    record = report.train_result_record(result, label=mode)
    record["noise"] = {
        "distribution": cfg.noise.distribution,
        "mode": cfg.noise.mode,
        "scale": cfg.noise.scale,
        "seed": cfg.noise.seed,
    }
    if mode == "saft":
        record["k"] = cfg.k
    result_path = out / "result.json"
    result_path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    ckpt_path = out / "model.saft"
    save_checkpoint_file(model, ckpt_path)
    print(f"wrote {result_path} and {ckpt_path}")
    print(
        f"{mode}: clean accuracy {result.final_accuracy_clean:.4f}, "
        f"noisy accuracy {result.final_accuracy_noisy:.4f}"
    )
    return {"result": result, "model": model, **extras}


def cmd_compare(cfg: ExperimentConfig) -> dict:
    train, test = cfg.dataset.load()
    base = _pretrained_model(cfg, train, test)
    clean_acc = evaluate(base, test)
    rows = []
    records = []
    for spec in cfg.noise_grid:
        untrained = evaluate(base, test, spec, eval_seed=cfg.eval_seed)
        full_model = base.clone()
        full_res = noise_injection_train(
            full_model, spec, full_plan(full_model), cfg.train, train, test,
            eval_seed=cfg.eval_seed,
        )
        saft_model = base.clone()
        saft_run = saft_pipeline(
            saft_model, spec, cfg.k, cfg.train, train, test,
            repeat=cfg.sensitivity_repeat, eval_seed=cfg.eval_seed,
        )
        saft_res = saft_run.result
        row = {
            "mode": spec.mode,
            "distribution": spec.distribution,
            "scale": spec.scale,
            "clean": clean_acc,
            "untrained": untrained,
            "noise_injection": full_res.final_accuracy_noisy,
            "saft": saft_res.final_accuracy_noisy,
            "speedup_work": full_res.param_grad_scalars / max(saft_res.param_grad_scalars, 1),
            "speedup_wall": full_res.wall_time_ms / max(saft_res.wall_time_ms, 1),
        }
        rows.append(row)
        for label, res in (("full", full_res), ("saft", saft_res)):
            rec = report.train_result_record(res, label=label)
            rec["noise"] = {"distribution": spec.distribution, "mode": spec.mode,
                            "scale": spec.scale, "seed": spec.seed}
            if label == "saft":
                rec["k"] = cfg.k
                rec["trainable_layers"] = sorted(saft_run.plan.trainable)
                rec["sensitivity_wall_ms"] = saft_run.sensitivity_wall_ms
            records.append(rec)
    out = _out_dir(cfg)
    csv_path = out / "compare.csv"
    csv_path.write_text(report.compare_csv(rows), encoding="utf-8")
    text = report.compare_text(rows)
    (out / "compare.txt").write_text(text, encoding="utf-8")
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(report.jsonl_line(rec))
    print(text, end="")
    print(f"wrote {csv_path}, {out / 'compare.txt'}, {out / 'runs.jsonl'}")
    return {"rows": rows, "csv": csv_path}


def cmd_oracle(cfg: ExperimentConfig) -> dict:
    train, test = cfg.dataset.load()
    model = _pretrained_model(cfg, train, test)
    noisy = wrap_noisy(model, cfg.noise)
    batch = train.inputs[: cfg.train.batch_size]
    rep = compute_stats(model, noisy, batch, repeat=cfg.sensitivity_repeat)
    select_top_k(rep, cfg.k)
    kls = kl_sensitivity(model, noisy, batch)
    drops = brute_force_oracle(
        model, cfg.noise, test.inputs, test.labels,
        eval_seed=cfg.eval_seed, max_workers=_threads(),
    )
    eligible = model.eligible_ids()
    stds = {lid: rep.per_layer[lid].std for lid in eligible}
    kls_eligible = {lid: kls[lid] for lid in eligible}
    if len(set(drops.values())) <= 1:
        rho_std = rho_kl = None  # flat oracle: agreement undefined
    else:
        rho_std = rank_agreement(stds, drops)
        rho_kl = rank_agreement(kls_eligible, drops)
    top1 = max(drops, key=lambda lid: drops[lid])
    lines = [
        f"oracle evaluations: {len(eligible)} layers x full eval set "
        f"(vs 1 pass for the std ranking)",
        f"top-1 oracle layer: {top1} "
        f"(std rank {rep.ranking.index(top1) + 1 if top1 in rep.ranking else 'n/a'})",
        f"spearman std vs oracle: {'n/a' if rho_std is None else format(rho_std, '.4f')}",
        f"spearman kl  vs oracle: {'n/a' if rho_kl is None else format(rho_kl, '.4f')}",
    ]
    summary = "\n".join(lines) + "\n"
    out = _out_dir(cfg)
    csv_path = out / "oracle.csv"
    csv_path.write_text(report.oracle_csv(model, stds, kls_eligible, drops), encoding="utf-8")
    (out / "agreement.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    print(f"wrote {csv_path} and {out / 'agreement.txt'}")
    return {"report": rep, "kl": kls, "drops": drops, "rho_std": rho_std, "rho_kl": rho_kl}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saft",
        description="Per-layer weight-noise sensitivity analysis and freeze-aware noise-injection training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("sensitivity", "train", "compare", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None, help="override noise and train seeds")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--k", type=int, default=None, help="override trainable layer count")
        if name == "sensitivity":
            p.add_argument("--suggest-k", action="store_true",
                           help="print a knee-point suggestion for k")
        if name == "train":
            p.add_argument("--mode", choices=("clean", "full", "saft"), required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, seed=args.seed, out_dir=args.out, k=args.k)
        _threads()  # validate the env var before doing work
        if args.command == "sensitivity":
            cmd_sensitivity(cfg, want_suggestion=args.suggest_k)
        elif args.command == "train":
            cmd_train(cfg, args.mode)
        elif args.command == "compare":
            cmd_compare(cfg)
        else:
            cmd_oracle(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
