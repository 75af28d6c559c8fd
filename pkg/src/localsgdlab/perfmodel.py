"""Analytic multi-cluster performance model.

Times one training round as s inner steps of compute plus one ring
allreduce of the full parameter set across m clusters, and derives the
scaling efficiency

    K = s * t_compute_step / (t_comm_sync + s * t_compute_step)
      = 1 / (1 + bytes_per_param * (m-1) * n * C_d / (3 * B * s * W))

which is independent of the parameter count (the payload and the compute
cost both scale with N, so it cancels). W is stored in bytes/s; the CLI
converts Gbps via gbps_to_bytes_per_s.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from itertools import product

import numpy as np


def gbps_to_bytes_per_s(gbps: float) -> float:
    return gbps * 1e9 / 8.0


@dataclass(frozen=True)
class Topology:
    m: int                       # clusters
    n: int                       # devices per cluster
    c_d: float                   # achieved FLOP/s per device
    w: float                     # inter-cluster bandwidth, bytes/s
    bytes_per_param: float = 2.0  # half-precision sync payload

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.c_d <= 0 or self.w <= 0 or self.bytes_per_param <= 0:
            raise ValueError("c_d, w and bytes_per_param must be positive")


@dataclass(frozen=True)
class EfficiencyPoint:
    m: int
    n: int
    c_d: float
    w: float
    b_tokens: float
    s: int
    k: float
    t_comm_s: float
    t_compute_round_s: float


def compute_time_per_step(n_params: float, b_tokens: float, topo: Topology) -> float:
    """Intra-cluster wall time for one inner step: 6*N*(B/m) / (n*C_d)."""
    if n_params <= 0 or b_tokens <= 0:
        raise ValueError("n_params and b_tokens must be positive")
    return 6.0 * n_params * (b_tokens / topo.m) / (topo.n * topo.c_d)


def comm_time_per_sync(n_params_total: float, topo: Topology) -> float:
    """Ring-allreduce wall time for one sync of the full parameter payload.

    Bandwidth-only cost: payload * 2(m-1)/(m*W); zero for a single cluster.
    The payload counts every parameter, embeddings included.
    """
    if n_params_total <= 0:
        raise ValueError("n_params_total must be positive")
    if topo.m == 1:
        return 0.0
    payload = topo.bytes_per_param * n_params_total
    return payload * 2.0 * (topo.m - 1) / (topo.m * topo.w)


def scaling_efficiency(topo: Topology, b_tokens: float, s: int) -> float:
    """Closed-form K; equals s*t_comp / (t_comm + s*t_comp) with N cancelled."""
    if b_tokens <= 0 or s < 1:
        raise ValueError("b_tokens must be positive and s >= 1")
    if topo.m == 1:
        return 1.0
    overhead = (topo.bytes_per_param * (topo.m - 1) * topo.n * topo.c_d
                / (3.0 * b_tokens * s * topo.w))
    return 1.0 / (1.0 + overhead)


def min_bandwidth(k_target: float, topo: Topology, b_tokens: float, s: int) -> float:
    """Bandwidth (bytes/s) at which scaling_efficiency hits k_target."""
    if not (0.0 < k_target < 1.0):
        raise ValueError("k_target must be in (0, 1)")
    return (topo.bytes_per_param * (topo.m - 1) * topo.n * topo.c_d * k_target
            / (3.0 * b_tokens * s * (1.0 - k_target)))


def lambda_coeff(alpha_s: float, topo: Topology, b_tokens: float) -> float:
    """Loss-penalty coefficient: bytes_per_param*alpha_s*n*C_d*(m-1)/(3*W*B)."""
    if alpha_s < 0 or b_tokens <= 0:
        raise ValueError("alpha_s must be >= 0 and b_tokens positive")
    return (topo.bytes_per_param * alpha_s * topo.n * topo.c_d * (topo.m - 1)
            / (3.0 * topo.w * b_tokens))


def efficiency_point(topo: Topology, b_tokens: float, s: int,
                     n_params: float = 1e9) -> EfficiencyPoint:
    t_comp = compute_time_per_step(n_params, b_tokens, topo)
    t_comm = comm_time_per_sync(n_params, topo)
    return EfficiencyPoint(
        m=topo.m, n=topo.n, c_d=topo.c_d, w=topo.w, b_tokens=b_tokens, s=s,
        k=scaling_efficiency(topo, b_tokens, s),
        t_comm_s=t_comm, t_compute_round_s=s * t_comp,
    )


# s grid shared by the scenario presets: powers of two from 1 to 1024
S_GRID = tuple(2 ** i for i in range(11))

TFLOPS = 1e12
SCENARIO_PRESETS = {
    1: dict(n=[8], b=[4e6], c_d=[150 * TFLOPS, 300 * TFLOPS],
            m=[2, 8], w_gbps=[0.08, 0.8, 8.0], s=S_GRID),
    2: dict(n=[1024], b=[4e6], c_d=[150 * TFLOPS, 300 * TFLOPS],
            m=[2, 8], w_gbps=[0.8, 8.0, 40.0], s=S_GRID),
    3: dict(n=[8], b=[4e6], c_d=[150 * TFLOPS],
            m=[1024], w_gbps=[0.08, 0.8], s=S_GRID),
}


def sweep_scenarios(grid: dict, n_params: float = 1e9,
                    bytes_per_param: float = 2.0) -> list[EfficiencyPoint]:
    """Evaluate the full cartesian product of a sweep grid.

    Grid keys: m, n, c_d, b, s, and either w (bytes/s) or w_gbps.
    """
    ws = grid.get("w")
    if ws is None:
        ws = [gbps_to_bytes_per_s(g) for g in grid["w_gbps"]]
    cells = list(product(grid["m"], grid["n"], grid["c_d"], ws, grid["b"], grid["s"]))
    if not cells:
        raise ValueError("empty sweep grid")
    rows = []
    for m, n, c_d, w, b, s in cells:
        topo = Topology(m=m, n=n, c_d=c_d, w=w, bytes_per_param=bytes_per_param)
        rows.append(efficiency_point(topo, b, int(s), n_params=n_params))
    return rows


CSV_HEADER = ["m", "n", "C_d_flops", "W_bytes_per_s", "B_tokens", "s",
              "K", "t_comm_s", "t_comp_round_s"]


def write_sweep_csv(path, rows: list[EfficiencyPoint]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.m, r.n, repr(r.c_d), repr(r.w), repr(r.b_tokens),
                             r.s, repr(r.k), repr(r.t_comm_s),
                             repr(r.t_compute_round_s)])


def write_sweep_jsonl(path, rows: list[EfficiencyPoint]):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps({
                "m": r.m, "n": r.n, "C_d_flops": r.c_d, "W_bytes_per_s": r.w,
                "B_tokens": r.b_tokens, "s": r.s, "K": r.k,
                "t_comm_s": r.t_comm_s, "t_comp_round_s": r.t_compute_round_s,
            }) + "\n")
