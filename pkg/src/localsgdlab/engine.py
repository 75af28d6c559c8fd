"""Two-level training engine: m in-process replicas each run s inner steps
on their shard of every global batch; at round boundaries the averaged
pseudo-gradients drive one outer Nesterov step and the new global
parameters are re-broadcast. A fully synchronous data-parallel baseline
(gradients averaged every step) shares the same data path.

Determinism: replicas may run on a thread pool, but each replica's work is
independent between syncs and the reduction always sums in ascending
replica order, so results are identical for any worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import ShardPlan, TokenStream, next_global_batch
from .errors import ConfigError, EndOfData, IntegrityError, TrainingDiverged
from .model import (ModelConfig, ParameterVector, TokenBatch, backward,
                    build_model, forward_loss)
from .optim import (AdamWHyper, AdamWState, CosineSchedule, NesterovHyper,
                    NesterovState, adamw_step, cosine_lr, nesterov_step,
                    sgd_step)

MODE_LOCAL = "local_sgd"
MODE_DDP = "ddp_baseline"


@dataclass(frozen=True)
class SyncPolicy:
    s: int = 32
    mode: str = MODE_LOCAL
    inner: str = "adamw"          # "adamw" | "sgd"
    inner_hyper: AdamWHyper = field(default_factory=AdamWHyper)
    outer: NesterovHyper = field(default_factory=NesterovHyper)
    reset_inner_state: bool = False

    def validate(self):
        if self.mode not in (MODE_LOCAL, MODE_DDP):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.inner not in ("adamw", "sgd"):
            raise ConfigError(f"unknown inner optimizer {self.inner!r}")
        if self.s < 1:
            raise ConfigError("s must be >= 1")
        return self

    def effective_s(self) -> int:
        # the baseline synchronizes every step by definition
        return 1 if self.mode == MODE_DDP else self.s


@dataclass
class Replica:
    params: ParameterVector
    inner_state: AdamWState | None
    shard_id: int


@dataclass
class RunState:
    model_config: ModelConfig
    policy: SyncPolicy
    global_params: ParameterVector
    replicas: list[Replica]
    outer_state: NesterovState
    step: int = 0
    round: int = 0
    truncated: bool = False


@dataclass
class MetricsRecord:
    step: int
    round: int
    phase: str                    # "inner" | "outer" | "eval"
    train_loss: float | None = None
    eval_loss: float | None = None
    lr_inner: float | None = None
    tokens_seen: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def init_run(model_config: ModelConfig, m: int, policy: SyncPolicy,
             seed: int) -> RunState:
    """All replicas start from one shared initialization; states zeroed."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    policy.validate()
    global_params = build_model(model_config, seed)
    n = global_params.values.size

    def inner_state():
        if policy.inner == "adamw":
            return AdamWState.init(n, policy.inner_hyper)
        return None

    replicas = [Replica(global_params.copy(), inner_state(), i) for i in range(m)]
    return RunState(
        model_config=model_config, policy=policy, global_params=global_params,
        replicas=replicas, outer_state=NesterovState.init(n, policy.outer),
    )


def pseudo_gradient(replica: Replica, global_params: ParameterVector) -> ParameterVector:
    """Delta = global - replica, so the outer optimizer descends toward the
    replica's updated parameters."""
    if not global_params.same_layout(replica.params):
        raise IntegrityError("replica layout diverged from global parameters")
    return ParameterVector(global_params.values - replica.params.values,
                           global_params.segments)


def _first_nonfinite_segment(vec: ParameterVector) -> str:
    bad = ~np.isfinite(vec.values)
    if not bad.any():
        return "<none>"
    idx = int(np.argmax(bad))
    for seg in vec.segments:
        if seg.offset <= idx < seg.offset + seg.length:
            return seg.name
    return "<unknown>"


def _replica_inner_steps(run: RunState, replica: Replica,
                        batches: list[TokenBatch],
                        lrs: list[float]) -> list[float]:
    """Run len(batches) inner steps on one replica; returns per-step losses."""
    losses = []
    for batch, lr in zip(batches, lrs):
        loss, grad = backward(replica.params, run.model_config, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {run.step}, replica {replica.shard_id}",
                diagnostic={"step": run.step, "replica": replica.shard_id,
                            "segment": _first_nonfinite_segment(grad)},
            )
        if run.policy.inner == "adamw":
            replica.params.values, replica.inner_state = adamw_step(
                replica.params.values, grad.values, replica.inner_state, lr)
        else:
            replica.params.values = sgd_step(replica.params.values, grad.values, lr)
        losses.append(loss)
    return losses


def inner_phase(run: RunState, step_shards: list[list[TokenBatch]],
                schedule: CosineSchedule, max_workers: int = 1) -> list[float]:
    """Each replica takes len(step_shards) inner steps on its own shards.

    step_shards[t][i] is replica i's shard of global step t. Global
    parameters are untouched. Returns the mean train loss per global step
    (fixed ascending-replica averaging order).
    """
    n_steps = len(step_shards)
    lr_at = schedule if callable(schedule) else (lambda t: cosine_lr(schedule, t))
    lrs = [lr_at(run.step + t) for t in range(n_steps)]
    cols = [[step_shards[t][i] for t in range(n_steps)]
            for i in range(len(run.replicas))]
    if max_workers > 1 and len(run.replicas) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_replica_inner_steps, run, r, col, lrs)
                       for r, col in zip(run.replicas, cols)]
            per_replica = [f.result() for f in futures]
    else:
        per_replica = [_replica_inner_steps(run, r, col, lrs)
                       for r, col in zip(run.replicas, cols)]
    mean_losses = []
    for t in range(n_steps):
        acc = 0.0
        for i in range(len(run.replicas)):
            acc += per_replica[i][t]
        mean_losses.append(acc / len(run.replicas))
    return mean_losses


def outer_sync(run: RunState):
    """Average pseudo-gradients (ascending replica order), take one outer
    step, and broadcast the new global parameters to every replica. Inner
    optimizer states persist across rounds unless the policy resets them."""
    m = len(run.replicas)
    acc = np.zeros_like(run.global_params.values)
    for replica in run.replicas:
        acc += pseudo_gradient(replica, run.global_params).values
    delta_bar = acc / m

    h = run.outer_state.hyper
    if h.lr == 1.0 and h.momentum == 0.0:
        # pure averaging: algebraically theta - delta_bar, computed directly
        # as the replica mean so the m=1 reduction is exact
        acc_p = np.zeros_like(run.global_params.values)
        for replica in run.replicas:
            acc_p += replica.params.values
        run.global_params.values = acc_p / m
        run.outer_state = NesterovState(delta_bar.copy(), h)
    else:
        run.global_params.values, run.outer_state = nesterov_step(
            run.global_params.values, delta_bar, run.outer_state)

    for replica in run.replicas:
        replica.params = run.global_params.copy()
        if run.policy.reset_inner_state and replica.inner_state is not None:
            replica.inner_state = AdamWState.init(
                run.global_params.values.size, run.policy.inner_hyper)
    run.round += 1


def _ddp_step(run: RunState, shards: list[TokenBatch], lr: float) -> float:
    """One synchronous step: average the shard gradients, step once."""
    m = len(shards)
    loss_acc = 0.0
    grad_acc = np.zeros_like(run.global_params.values)
    for i, batch in enumerate(shards):
        loss, grad = backward(run.global_params, run.model_config, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {run.step}, shard {i}",
                diagnostic={"step": run.step, "replica": i,
                            "segment": _first_nonfinite_segment(grad)},
            )
        loss_acc += loss
        grad_acc += grad.values
    grad_acc /= m
    state = run.replicas[0].inner_state
    if run.policy.inner == "adamw":
        run.global_params.values, state = adamw_step(
            run.global_params.values, grad_acc, state, lr)
        run.replicas[0].inner_state = state
    else:
        run.global_params.values = sgd_step(run.global_params.values, grad_acc, lr)
    for replica in run.replicas:
        replica.params = run.global_params.copy()
    return loss_acc / m


def evaluate(params: ParameterVector, config: ModelConfig,
             eval_stream: TokenStream, token_budget: int,
             rows_per_chunk: int = 64) -> float:
    """Mean loss over a fixed token budget from the validation stream."""
    L = config.seq_len
    rows = min(token_budget, len(eval_stream) - 1) // L
    if rows < 1:
        raise ConfigError("eval stream shorter than one sequence")
    tokens = eval_stream.tokens
    losses = []
    for start in range(0, rows, rows_per_chunk):
        r = min(rows_per_chunk, rows - start)
        base = start * L
        inputs = tokens[base:base + r * L].reshape(r, L)
        targets = tokens[base + 1:base + r * L + 1].reshape(r, L)
        losses.append((forward_loss(params, config, TokenBatch(inputs, targets)), r))
    total_rows = sum(r for _, r in losses)
    return sum(l * r for l, r in losses) / total_rows


def train(run: RunState, stream: TokenStream, plan: ShardPlan,
          schedule: CosineSchedule, total_rounds: int, *,
          eval_stream: TokenStream | None = None,
          eval_token_budget: int = 200_000, eval_every: int = 1,
          metrics_path=None, max_workers: int = 1) -> list[MetricsRecord]:
    """Full training loop; returns (and optionally writes) the metrics series.

    Runs total_rounds rounds of s inner steps + one outer sync (the DDP
    baseline is rounds of a single synchronous step). Ends cleanly at a
    round boundary on data exhaustion, truncating the last round if needed.
    """
    if plan.m != len(run.replicas):
        raise ConfigError(f"plan.m={plan.m} != number of replicas {len(run.replicas)}")
    B = plan.global_batch_tokens
    s = run.policy.effective_s()
    records: list[MetricsRecord] = []

    def emit(rec):
        records.append(rec)

    def eval_record():
        if eval_stream is not None:
            loss = evaluate(run.global_params, run.model_config, eval_stream,
                            eval_token_budget)
            emit(MetricsRecord(step=run.step, round=run.round, phase="eval",
                               eval_loss=loss, tokens_seen=B * run.step))

    try:
        eval_record()
        for rnd in range(total_rounds):
            step_shards = []
            try:
                for _ in range(s):
                    step_shards.append(next_global_batch(stream, plan))
            except EndOfData:
                if not step_shards:
                    break
                run.truncated = True
            if run.policy.mode == MODE_DDP:
                lr = cosine_lr(schedule, run.step)
                loss = _ddp_step(run, step_shards[0], lr)
                emit(MetricsRecord(step=run.step + 1, round=run.round + 1,
                                   phase="inner", train_loss=loss, lr_inner=lr,
                                   tokens_seen=B * (run.step + 1)))
                run.step += 1
                run.round += 1
            else:
                losses = inner_phase(run, step_shards, schedule, max_workers)
                for t, loss in enumerate(losses):
                    lr = cosine_lr(schedule, run.step + t)
                    emit(MetricsRecord(step=run.step + t + 1, round=run.round,
                                       phase="inner", train_loss=loss,
                                       lr_inner=lr,
                                       tokens_seen=B * (run.step + t + 1)))
                run.step += len(losses)
                outer_sync(run)
                emit(MetricsRecord(step=run.step, round=run.round, phase="outer",
                                   tokens_seen=B * run.step))
            if (rnd + 1) % eval_every == 0:
                eval_record()
            if run.truncated:
                break
    except TrainingDiverged as exc:
        if metrics_path is not None:
            _write_metrics(metrics_path, records, diagnostic=exc.diagnostic)
        raise

    if metrics_path is not None:
        _write_metrics(metrics_path, records)
    return records


def _write_metrics(path, records, diagnostic=None):
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
        if diagnostic is not None:
            f.write(json.dumps({"phase": "abort", **diagnostic}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Loss-spike scanning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpikeEvent:
    index: int
    value: float
    baseline_median: float
    post_sync: bool
    recovered: bool


def spike_scan(losses, window: int, k: float,
               sync_steps=()) -> list[SpikeEvent]:
    """Flag loss[t] > median + k*MAD over the trailing window.

    For each spike, reports whether it falls within `window` steps after an
    outer sync (given the 1-based step indices in `sync_steps`) and whether
    the loss recovered to at or below the pre-spike median later on.
    """
    losses = np.asarray(losses, dtype=float)
    if window < 2:
        raise ValueError("window must be >= 2")
    if losses.size < window:
        raise ValueError(f"series of length {losses.size} shorter than window {window}")
    sync_steps = sorted(int(x) for x in sync_steps)
    events = []
    for t in range(window, losses.size):
        ref = losses[t - window:t]
        med = float(np.median(ref))
        mad = float(np.median(np.abs(ref - med)))
        if losses[t] > med + k * max(mad, 1e-12):
            post_sync = any(0 <= t - ss < window for ss in sync_steps)
            recovered = bool(np.any(losses[t + 1:] <= med)) if t + 1 < losses.size else False
            events.append(SpikeEvent(index=t, value=float(losses[t]),
                                     baseline_median=med, post_sync=post_sync,
                                     recovered=recovered))
    return events


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, run: RunState):
    """Resumable snapshot: global params + optimizer states + progress, as a
    .npz with a JSON layout header."""
    header = {
        "version": CHECKPOINT_VERSION,
        "step": run.step,
        "round": run.round,
        "segments": [[s.name, s.offset, s.length, s.is_embedding]
                     for s in run.global_params.segments],
        "model_config": asdict(run.model_config),
        "policy": {"s": run.policy.s, "mode": run.policy.mode,
                   "inner": run.policy.inner,
                   "inner_hyper": asdict(run.policy.inner_hyper),
                   "outer": asdict(run.policy.outer),
                   "reset_inner_state": run.policy.reset_inner_state},
        "adamw_step_counts": [r.inner_state.step_count if r.inner_state else None
                              for r in run.replicas],
    }
    arrays = {"global": run.global_params.values,
              "outer_velocity": run.outer_state.velocity}
    for i, r in enumerate(run.replicas):
        arrays[f"replica{i}_params"] = r.params.values
        if r.inner_state is not None:
            arrays[f"replica{i}_m"] = r.inner_state.first_moment
            arrays[f"replica{i}_v"] = r.inner_state.second_moment
    np.savez(path, header=json.dumps(header, sort_keys=True), **arrays)


def load_checkpoint(path) -> RunState:
    from .model import Segment
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {header['version']}")
        segments = [Segment(n, o, l, e) for n, o, l, e in header["segments"]]
        model_config = ModelConfig(**header["model_config"])
        pol = header["policy"]
        policy = SyncPolicy(s=pol["s"], mode=pol["mode"], inner=pol["inner"],
                            inner_hyper=AdamWHyper(**pol["inner_hyper"]),
                            outer=NesterovHyper(**pol["outer"]),
                            reset_inner_state=pol["reset_inner_state"])
        global_params = ParameterVector(z["global"].copy(), segments)
        replicas = []
        for i, t in enumerate(header["adamw_step_counts"]):
            params = ParameterVector(z[f"replica{i}_params"].copy(), segments)
            state = None
            if t is not None:
                state = AdamWState(z[f"replica{i}_m"].copy(),
                                   z[f"replica{i}_v"].copy(), t,
                                   policy.inner_hyper)
            replicas.append(Replica(params, state, i))
        outer = NesterovState(z["outer_velocity"].copy(), policy.outer)
    return RunState(model_config=model_config, policy=policy,
                    global_params=global_params, replicas=replicas,
                    outer_state=outer, step=header["step"],
                    round=header["round"])
