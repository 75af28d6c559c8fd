"""Bridges an ExperimentConfig to the engine: builds streams, runs training,
and writes the run artifacts (metrics, checkpoint, manifest, summary)."""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

from . import data as datapipe
from .config import (ExperimentConfig, RunManifest, config_to_dict,
                     resolve_output_dir, save_config)
from .data import ShardPlan
from .engine import init_run, train
from .model import count_non_embedding


def build_streams(cfg: ExperimentConfig):
    """Train/validation token streams for a config (deterministic in seed)."""
    d = cfg.data
    if d.source == "synthetic":
        stream = datapipe.synthetic_corpus(
            d.seed, d.kind, d.length_tokens, entropy=d.entropy, period=d.period,
            vocab_size=cfg.model.vocab_size)
    else:
        stream = datapipe.stream_from_file(d.path)
    if stream.vocab_size > cfg.model.vocab_size:
        raise datapipe.DataError(
            f"stream vocab {stream.vocab_size} exceeds model vocab "
            f"{cfg.model.vocab_size}")
    return stream.split(d.val_fraction)


def run_experiment(cfg: ExperimentConfig, out_dir=None, max_workers: int = 1,
                   write_artifacts: bool = True):
    """Run one training experiment; returns (records, summary dict)."""
    cfg.validate()
    out = None
    manifest = None
    if write_artifacts:
        out = resolve_output_dir(cfg, out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.begin(cfg)
        save_config(out / "config.yaml", cfg)

    train_stream, val_stream = build_streams(cfg)
    plan = ShardPlan(cfg.topology.m, cfg.schedule.global_batch_tokens,
                     cfg.model.seq_len)
    run = init_run(cfg.model, cfg.topology.m, cfg.policy, cfg.master_seed)
    schedule = cfg.cosine_schedule()

    t0 = time.time()
    records = train(
        run, train_stream, plan, schedule, cfg.schedule.total_rounds,
        eval_stream=val_stream, eval_token_budget=cfg.eval.token_budget,
        eval_every=cfg.eval.every,
        metrics_path=(out / "metrics.jsonl") if out else None,
        max_workers=max_workers,
    )
    wall = time.time() - t0

    n_non_emb = count_non_embedding(run.global_params)
    tokens_seen = cfg.schedule.global_batch_tokens * run.step
    train_losses = [r.train_loss for r in records if r.phase == "inner"]
    eval_losses = [r.eval_loss for r in records if r.phase == "eval"]
    summary = {
        "final_train_loss": train_losses[-1] if train_losses else None,
        "final_eval_loss": eval_losses[-1] if eval_losses else None,
        "n_non_embedding": n_non_emb,
        "n_total": int(run.global_params.values.size),
        "tokens_seen": tokens_seen,
        "steps": run.step,
        "rounds": run.round,
        "truncated": run.truncated,
        "tokens_per_second": tokens_seen / wall if wall > 0 else None,
        "wall_seconds": wall,
    }
    if out is not None:
        from .engine import save_checkpoint
        save_checkpoint(out / "checkpoint.npz", run)
        with open(out / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        manifest.finish(out)
    return records, summary


def sweep_local_steps(cfg: ExperimentConfig, s_list, seeds=(0,), sizes=None,
                      out_dir=None, max_workers: int = 1):
    """One run per (size, s, seed) at matched total inner steps.

    Total inner steps are held at the config's total (so D = B*S is constant
    across s); every s in s_list must divide it. Returns rows of
    (s, n_non_embedding, seed, final_eval_loss) and writes sweep.csv when an
    output directory is given.
    """
    from .config import SIZE_TABLE
    total_steps = cfg.total_inner_steps
    for s in s_list:
        if total_steps % s != 0:
            raise ValueError(
                f"total inner steps {total_steps} not divisible by s={s}")
    model_variants = [(None, cfg.model)]
    if sizes:
        model_variants = []
        for name in sizes:
            d_model, n_layers, n_heads = SIZE_TABLE[name]
            model_variants.append((name, replace(
                cfg.model, d_model=d_model, n_layers=n_layers, n_heads=n_heads)))

    rows = []
    for size_name, model in model_variants:
        for s in s_list:
            for seed in seeds:
                sub = replace(
                    cfg,
                    model=model,
                    policy=replace(cfg.policy, s=s),
                    schedule=replace(cfg.schedule, total_rounds=total_steps // s),
                    master_seed=seed,
                )
                _, summary = run_experiment(sub, write_artifacts=False,
                                            max_workers=max_workers)
                rows.append({
                    "s": s,
                    "N": summary["n_non_embedding"],
                    "seed": seed,
                    "size": size_name or "config",
                    "final_eval_loss": summary["final_eval_loss"],
                })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w") as f:
            f.write("s,N,seed,size,final_eval_loss\n")
            for r in rows:
                f.write(f"{r['s']},{r['N']},{r['seed']},{r['size']},"
                        f"{r['final_eval_loss']!r}\n")
    return rows
