import csv
import itertools

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from pmol.adapter import ExpertGroupTable, GroupEntry
from pmol.backbone import DataError
from pmol.telemetry import (BenchShape, TelemetryRecord, bench_forward, bench_layer, record_expert_weights,
                            specialization_score, speedups, verify_equivalence, write_bench_csv,
                            write_telemetry_csv)


def records_from(masses_by_pref, groups, step=0, layer=0):
    """Spread each group's mass evenly over its experts; rest goes to the empty slot."""
    out = []
    for pref, masses in masses_by_pref.items():
        w = np.zeros(groups.K + 1)
        for e, m in zip(groups.entries, masses):
            w[e.start:e.end] = m / e.size
        w[-1] = 1.0 - w.sum()
        out.append(TelemetryRecord(layer, pref, w, step))
    return out


class TestRecords:
    def test_uniform_router(self, tiny_model, small_pairs):
        for layer in tiny_model.adapters:
            layer.router.W.assign(np.zeros_like(layer.router.W.data))
        recs = record_expert_weights(tiny_model, small_pairs)
        assert len(recs) == 2 * 3
        for r in recs:
            for m in r.group_masses(tiny_model.groups).values():
                assert m == pytest.approx(2 / 7, abs=1e-12)
            assert r.empty_mass == pytest.approx(1 / 7, abs=1e-12)

    def test_sum_to_one(self, tiny_model, small_pairs):
        for r in record_expert_weights(tiny_model, small_pairs):
            assert abs(r.weights.sum() - 1.0) < 1e-9

    def test_read_only(self, tiny_model, small_pairs):
        before = {k: t.data.copy() for k, t in tiny_model.trainable().items()}
        record_expert_weights(tiny_model, small_pairs)
        assert all(np.array_equal(before[k], t.data) for k, t in tiny_model.trainable().items())

    def test_csv(self, tiny_model, small_pairs, tmp_path):
        recs = record_expert_weights(tiny_model, small_pairs, step=5)
        write_telemetry_csv(recs, tiny_model.groups, tmp_path / "t.csv")
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert len(rows) == len(recs) and rows[0]["step"] == "5"
        assert {"w_empty", "mass_0", "mass_2"} <= rows[0].keys()


class TestScore:
    groups = ExpertGroupTable.even(3, 2)

    def test_uniform_is_zero(self):
        recs = records_from({p: [0.3, 0.3, 0.3] for p in range(3)}, self.groups)
        assert specialization_score(recs, self.groups) == 0.0

    def test_full_own_is_one(self):
        recs = records_from({p: np.eye(3)[p] for p in range(3)}, self.groups)
        assert specialization_score(recs, self.groups) == 1.0

    def test_unequal_group_sizes_uniform(self):
        g = ExpertGroupTable((GroupEntry(0, 0, 1), GroupEntry(1, 1, 4)), 4)
        w = np.full(5, 0.2)
        recs = [TelemetryRecord(0, p, w) for p in range(2)]
        assert specialization_score(recs, g) == pytest.approx(0.0, abs=1e-15)

    def test_relabel_invariant(self):
        masses = {0: [0.6, 0.2, 0.1], 1: [0.1, 0.5, 0.3], 2: [0.2, 0.1, 0.65]}
        base = specialization_score(records_from(masses, self.groups), self.groups)
        for perm in itertools.permutations(range(3)):
            # preference p becomes perm[p], and so does its group
            moved = {perm[p]: [m[perm.index(g)] for g in range(3)] for p, m in masses.items()}
            assert specialization_score(records_from(moved, self.groups), self.groups) == pytest.approx(base, abs=1e-14)

    def test_uses_latest_step_and_top_layer(self):
        old = records_from({p: np.eye(3)[p] for p in range(3)}, self.groups, step=0, layer=1)
        new = records_from({p: [0.3, 0.3, 0.3] for p in range(3)}, self.groups, step=9, layer=1)
        low = records_from({p: np.eye(3)[p] for p in range(3)}, self.groups, step=9, layer=0)
        assert specialization_score(old + new + low, self.groups) == 0.0
        assert specialization_score(old + new + low, self.groups, layer=0) == 1.0

    def test_missing_preference(self):
        recs = records_from({0: [1, 0, 0], 1: [0, 1, 0]}, self.groups)
        with pytest.raises(DataError, match="missing"):
            specialization_score(recs, self.groups)


class TestBench:
    def test_parse(self):
        assert BenchShape.parse("K=4,r=2,batch=8") == BenchShape(K=4, r=2, batch=8)
        for bad in ("K=0", "Q=3", "K=x"):
            with pytest.raises(ValueError):
                BenchShape.parse(bad)

    def test_equivalence_precheck(self):
        layer, W0, x = bench_layer(BenchShape(K=4, r=2, a=8, b=8, batch=2, seq=3))
        assert verify_equivalence(layer, W0, x) < 1e-10

    def test_rows_per_path_phase_shape(self, tmp_path):
        shapes = [BenchShape(K=2, r=2, a=8, b=8, batch=2, seq=4), BenchShape(K=4, r=2, a=8, b=8, batch=2, seq=4)]
        res = bench_forward(shapes, reps=2, warmup=0)
        keys = [(r.path, r.phase, r.K) for r in res]
        assert len(keys) == len(set(keys))
        for K in (2, 4):
            for phase in ("forward", "forward_backward"):
                assert {p for p, ph, k in keys if ph == phase and k == K and p != "egs_loss"} == {"sequential", "parallel", "linear"}
        assert sum(p == "egs_loss" for p, _, _ in keys) == 2
        assert len(speedups(res)) == 4
        write_bench_csv(res, tmp_path / "b.csv")
        assert len(list(csv.DictReader(open(tmp_path / "b.csv")))) == len(res)

    def test_linear_baseline_fastest(self):
        with threadpool_limits(1):
            res = bench_forward([BenchShape(K=8, r=4, a=32, b=32, batch=16, seq=16)], reps=15, warmup=2,
                                phases=("forward",))
        t = {r.path: r.seconds for r in res}
        assert t["linear"] < t["parallel"] and t["linear"] < t["sequential"]

    def test_medians_stable(self):
        shape = [BenchShape(K=16, r=8, a=64, b=64, batch=16, seq=64)]
        with threadpool_limits(1):
            runs = [{r.path: r.seconds for r in bench_forward(shape, reps=30, warmup=5, phases=("forward",),
                                                              include_baselines=False)} for _ in range(2)]
        for path in ("sequential", "parallel"):
            a, b = runs[0][path], runs[1][path]
            assert abs(a - b) / min(a, b) < 0.25, (path, a, b)
