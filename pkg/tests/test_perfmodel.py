import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localsgdlab.perfmodel import (CSV_HEADER, SCENARIO_PRESETS, Topology,
                                   comm_time_per_sync, compute_time_per_step,
                                   efficiency_point, gbps_to_bytes_per_s,
                                   lambda_coeff, min_bandwidth,
                                   scaling_efficiency, sweep_scenarios,
                                   write_sweep_csv, write_sweep_jsonl)


def topo(**kw):
    base = dict(m=2, n=8, c_d=1.5e14, w=1e8)
    base.update(kw)
    return Topology(**base)


class TestComputeTime:
    def test_unit_ratio(self):
        # 6*N*(B/m) == n*C_d numerically -> 1 second
        t = Topology(m=2, n=1, c_d=6.0, w=1.0)
        assert compute_time_per_step(1, 2, t) == pytest.approx(1.0)

    def test_reference_value(self):
        t = Topology(m=8, n=8, c_d=1.5e14, w=1e8)
        assert compute_time_per_step(1e9, 4e6, t) == pytest.approx(2.5)

    def test_doubling_devices_halves(self):
        a = compute_time_per_step(1e9, 4e6, topo(n=8))
        b = compute_time_per_step(1e9, 4e6, topo(n=16))
        assert b == pytest.approx(a / 2)


class TestCommTime:
    def test_single_cluster_is_zero(self):
        assert comm_time_per_sync(1e9, topo(m=1)) == 0.0

    def test_reference_value(self):
        # 2 bytes/param * 1e9 params * 2(m-1)/(m*W) at m=2, W=1e8 -> 20 s
        assert comm_time_per_sync(1e9, topo(m=2, w=1e8)) == pytest.approx(20.0)

    def test_large_m_limit(self):
        t = topo(m=100_000)
        limit = 2 * t.bytes_per_param * 1e9 / t.w
        assert comm_time_per_sync(1e9, t) == pytest.approx(limit, rel=1e-4)


class TestScalingEfficiency:
    def test_single_cluster_exactly_one(self):
        assert scaling_efficiency(topo(m=1), 4e6, 32) == 1.0

    def test_reference_values(self):
        assert scaling_efficiency(topo(m=2, n=8), 4e6, 32) == pytest.approx(
            1.0 / 1.0625)
        t = Topology(m=8, n=1024, c_d=1.5e14, w=5e9)
        assert scaling_efficiency(t, 4e6, 64) == pytest.approx(1.0 / 1.56)

    def test_large_s_limit(self):
        assert scaling_efficiency(topo(), 4e6, 10 ** 9) == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=200)
    @given(m=st.integers(2, 64), n=st.integers(1, 2048),
           c_exp=st.floats(12, 15), w_exp=st.floats(7, 11),
           b_exp=st.floats(4, 7), s=st.integers(1, 1024))
    def test_consistency_with_time_ratio(self, m, n, c_exp, w_exp, b_exp, s):
        t = Topology(m=m, n=n, c_d=10 ** c_exp, w=10 ** w_exp)
        b = 10 ** b_exp
        for n_params in (1e6, 1e9, 3.7e11):  # K independent of N
            t_comp = compute_time_per_step(n_params, b, t)
            t_comm = comm_time_per_sync(n_params, t)
            ratio = s * t_comp / (t_comm + s * t_comp)
            assert scaling_efficiency(t, b, s) == pytest.approx(ratio, rel=1e-12)

    def test_monotonicity(self):
        k0 = scaling_efficiency(topo(), 4e6, 32)
        assert scaling_efficiency(topo(), 4e6, 64) > k0          # s up
        assert scaling_efficiency(topo(w=2e8), 4e6, 32) > k0     # W up
        assert scaling_efficiency(topo(), 8e6, 32) > k0          # B up
        assert scaling_efficiency(topo(n=16), 4e6, 32) < k0      # n up
        assert scaling_efficiency(topo(c_d=3e14), 4e6, 32) < k0  # C_d up
        assert scaling_efficiency(topo(m=4), 4e6, 32) < k0       # m up

    def test_bandwidth_limits(self):
        assert scaling_efficiency(topo(w=1e30), 4e6, 32) == pytest.approx(1.0)
        assert scaling_efficiency(topo(w=1e-20), 4e6, 32) == pytest.approx(0.0, abs=1e-6)


class TestMinBandwidth:
    def test_round_trip_through_k(self):
        k = scaling_efficiency(topo(), 4e6, 32)
        w = min_bandwidth(k, topo(), 4e6, 32)
        assert w == pytest.approx(1e8, rel=1e-4)
        t2 = Topology(m=2, n=8, c_d=1.5e14, w=w)
        assert scaling_efficiency(t2, 4e6, 32) == pytest.approx(k, abs=1e-12)

    def test_inverse_identity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = Topology(m=int(rng.integers(2, 20)), n=int(rng.integers(1, 100)),
                         c_d=float(10 ** rng.uniform(12, 15)),
                         w=float(10 ** rng.uniform(7, 11)))
            b, s = float(10 ** rng.uniform(4, 7)), int(rng.integers(1, 1025))
            k = scaling_efficiency(t, b, s)
            assert min_bandwidth(k, t, b, s) == pytest.approx(t.w, rel=1e-9)

    def test_target_one_rejected(self):
        with pytest.raises(ValueError):
            min_bandwidth(1.0, topo(), 4e6, 32)

    def test_small_target_small_bandwidth(self):
        assert min_bandwidth(1e-9, topo(), 4e6, 32) < 1.0


class TestLambda:
    def test_single_cluster_zero(self):
        assert lambda_coeff(1e-4, topo(m=1), 4e6) == 0.0

    def test_reference_is_14x(self):
        t = Topology(m=8, n=8, c_d=1.5e14, w=1e8)
        assert lambda_coeff(1.0, t, 4e6) == 14.0

    def test_headline_magnitude(self):
        t = Topology(m=8, n=8, c_d=1.5e14, w=1e8)
        assert lambda_coeff(1.43e-4, t, 4e6) == pytest.approx(2.0e-3, rel=0.01)


class TestSweep:
    def test_scenario1_grid_size(self):
        rows = sweep_scenarios(SCENARIO_PRESETS[1])
        # m(2) * C_d(2) * W(3) * s(11)
        assert len(rows) == 2 * 2 * 3 * 11

    def test_k_increasing_in_s_per_cell(self):
        rows = sweep_scenarios(SCENARIO_PRESETS[1])
        by_cell = {}
        for r in rows:
            by_cell.setdefault((r.m, r.n, r.c_d, r.w), []).append((r.s, r.k))
        for cell in by_cell.values():
            cell.sort()
            ks = [k for _, k in cell]
            assert all(a < b for a, b in zip(ks, ks[1:]))

    def test_scenario2_spot_value(self):
        rows = sweep_scenarios(SCENARIO_PRESETS[2])
        spot = [r for r in rows
                if r.m == 8 and r.c_d == 1.5e14 and r.s == 64
                and r.w == pytest.approx(5e9)]
        assert len(spot) == 1
        assert spot[0].k == pytest.approx(0.641, abs=1e-3)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            sweep_scenarios(dict(m=[], n=[8], c_d=[1e14], b=[4e6], s=[1],
                                 w=[1e8]))

    def test_csv_and_jsonl_output(self, tmp_path):
        rows = sweep_scenarios(dict(m=[1, 2], n=[8], c_d=[1.5e14], b=[4e6],
                                    s=[1, 32], w=[1e8]))
        write_sweep_csv(tmp_path / "t.csv", rows)
        write_sweep_jsonl(tmp_path / "t.jsonl", rows)
        with open(tmp_path / "t.csv") as f:
            got = list(csv.reader(f))
        assert got[0] == CSV_HEADER
        assert len(got) == len(rows) + 1
        with open(tmp_path / "t.jsonl") as f:
            recs = [json.loads(line) for line in f]
        assert recs[0]["K"] == rows[0].k


class TestUnits:
    def test_gbps_conversion(self):
        assert gbps_to_bytes_per_s(0.8) == 1e8

    def test_invalid_topology(self):
        with pytest.raises(ValueError):
            Topology(m=0, n=8, c_d=1e14, w=1e8)
        with pytest.raises(ValueError):
            Topology(m=2, n=8, c_d=-1, w=1e8)
