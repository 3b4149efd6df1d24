"""Router-weight telemetry and the sequential-vs-parallel micro-benchmark."""

from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .adapter import (ExpertGroupTable, GroupEntry, init_pmol_layer, pmol_forward_parallel, pmol_forward_sequential,
                      stack_experts)
from .backbone import DataError
from .losses import balance_distribution, egs_loss
from .numcore import Rng, Tensor
from .trainengine import PairStats, PmolModel, collect_stats


@dataclass(frozen=True)
class TelemetryRecord:
    layer: int
    preference: int
    weights: np.ndarray  # K+1 token-and-pair means, last entry = empty expert
    step: int = 0

    def group_masses(self, groups: ExpertGroupTable) -> dict[int, float]:
        return {e.preference: float(self.weights[e.start:e.end].sum()) for e in groups.entries}

    @property
    def empty_mass(self) -> float:
        return float(self.weights[-1])


def record_expert_weights(model: PmolModel, held_out, step: int = 0, batch_size: int = 64,
                          stats: PairStats | None = None) -> list[TelemetryRecord]:
    """Mean router weights per (layer, preference) over chosen-response tokens.

    Each pair's tokens are averaged first, then pairs are averaged, so long
    responses do not dominate.  Reads the model only.
    """
    stats = stats or collect_stats(model, held_out, batch_size)
    records = []
    for layer in range(stats.router_mean.shape[0]):
        for pref in sorted(set(stats.preference.tolist())):
            w = stats.router_mean[layer, stats.preference == pref].mean(axis=0)
            records.append(TelemetryRecord(layer, int(pref), w, step))
    return records


def specialization_score(records, groups: ExpertGroupTable, layer: int | None = None) -> float:
    """How strongly each preference routes to its own group, in [0, 1].

    Uses the top layer unless ``layer`` is given.  For preference p, each
    group's mass is divided by its size and the results are normalized to
    sum to one (so a uniform router gives equal shares whatever the group
    sizes); the margin is ``share[own] - max(share[other])``.  The score is
    the mean margin over preferences, clipped to [0, 1]: 0 for a uniform or
    inverted router, 1 when every preference routes all real-expert mass to
    its own group.
    """
    records = list(records)
    if not records:
        raise DataError("no telemetry records")
    if layer is None:
        layer = max(r.layer for r in records)
    latest = max(r.step for r in records)
    at = {r.preference: r for r in records if r.layer == layer and r.step == latest}
    missing = set(groups.preferences) - set(at)
    if missing:
        raise DataError(f"records missing preferences {sorted(missing)}")
    margins = []
    for e in groups.entries:
        dens = np.array([at[e.preference].weights[g.start:g.end].sum() / g.size for g in groups.entries])
        share = dens / dens.sum()
        own = groups.entries.index(e)
        others = np.delete(share, own)
        margins.append(share[own] - (others.max() if others.size else 0.0))
    return float(np.clip(np.mean(margins), 0.0, 1.0))


def write_telemetry_csv(records, groups: ExpertGroupTable, path) -> None:
    K = groups.K
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "preference"] + [f"w_{k}" for k in range(K)] + ["w_empty"]
                   + [f"mass_{e.preference}" for e in groups.entries])
        for r in records:
            masses = r.group_masses(groups)
            w.writerow([r.step, r.layer, r.preference] + [repr(float(v)) for v in r.weights]
                       + [repr(masses[e.preference]) for e in groups.entries])


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    path: str    # sequential | parallel | linear | egs_loss
    phase: str   # forward | forward_backward
    K: int
    r: int
    a: int
    b: int
    batch: int
    seq: int
    seconds: float   # median per call
    reps: int

    def as_row(self) -> dict:
        return {"path": self.path, "phase": self.phase, "K": self.K, "r": self.r, "a": self.a, "b": self.b,
                "batch": self.batch, "seq": self.seq, "seconds": f"{self.seconds:.6e}", "reps": self.reps}


BENCH_FIELDS = ["path", "phase", "K", "r", "a", "b", "batch", "seq", "seconds", "reps"]


@dataclass(frozen=True)
class BenchShape:
    K: int = 16
    r: int = 8
    a: int = 64
    b: int = 64
    batch: int = 64
    seq: int = 64

    @classmethod
    def parse(cls, text: str) -> BenchShape:
        """``"K=16,r=8,a=64,b=64,batch=64,seq=64"``; omitted keys keep defaults."""
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            if key not in cls.__dataclass_fields__ or not val.strip().isdigit() or int(val) < 1:
                raise ValueError(f"bad shape field {part!r}")
            kw[key] = int(val)
        return cls(**kw)


def _median_time(fn, reps: int, warmup: int) -> float:
    # like timeit: collector off while timing so its pauses do not land in one path's samples
    for _ in range(warmup):
        fn()
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return float(np.median(times))


def bench_layer(shape: BenchShape, seed: int = 0, trained: bool = True):
    """A layer with non-zero B (so neither path can short-circuit) plus inputs."""
    rng = Rng(seed)
    groups = ExpertGroupTable(tuple(GroupEntry(k, k, k + 1) for k in range(shape.K)), shape.K)
    layer = init_pmol_layer(shape.a, shape.b, shape.r, groups, rng)
    if trained:
        for e in layer.experts:
            e.B.assign(rng.normal(e.B.shape, std=0.1))
        stack_experts(layer)
    W0 = Tensor(rng.normal((shape.a, shape.b), std=0.1))
    x = Tensor(rng.normal((shape.batch, shape.seq, shape.a)))
    return layer, W0, x


def verify_equivalence(layer, W0, x, tol: float = 1e-10) -> float:
    with nc.no_grad():
        diff = np.abs(pmol_forward_parallel(layer, W0, x).data - pmol_forward_sequential(layer, W0, x).data).max()
    if diff >= tol:
        raise AssertionError(f"parallel and sequential paths differ by {diff:.3e}")
    return float(diff)


def bench_forward(shapes, reps: int = 30, warmup: int = 5, phases=("forward", "forward_backward"),
                  include_baselines: bool = True, seed: int = 0) -> list[BenchResult]:
    """Median wall time per call for each (path, phase, shape).

    Equivalence of the two adapter paths is checked on every shape before
    any timing.  With ``include_baselines`` the plain ``x W0`` product and
    one group-loss evaluation on the shape's router weights are timed too.
    """
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    results = []
    for shape in shapes:
        layer, W0, x = bench_layer(shape, seed)
        verify_equivalence(layer, W0, x)
        xg = Tensor(x.data, requires_grad=True)
        params = [t for t in layer.parameters().values()]

        def fwd(fn):
            def run():
                with nc.no_grad():
                    fn(layer, W0, x)
            return run

        def fwd_bwd(fn):
            def run():
                with nc.Tape() as tape:
                    loss = fn(layer, W0, xg).sum()
                nc.backward(loss, tape)
                nc.zero_grads(params + [xg])
            return run

        def linear_fwd():
            with nc.no_grad():
                nc.matmul(x, W0)

        def linear_fwd_bwd():
            with nc.Tape() as tape:
                loss = nc.matmul(xg, W0).sum()
            nc.backward(loss, tape)
            xg.grad = None

        def emit(path, phase, seconds):
            results.append(BenchResult(path, phase, shape.K, shape.r, shape.a, shape.b, shape.batch,
                                       shape.seq, seconds, reps))

        for phase in phases:
            wrap = fwd if phase == "forward" else fwd_bwd
            emit("sequential", phase, _median_time(wrap(pmol_forward_sequential), reps, warmup))
            emit("parallel", phase, _median_time(wrap(pmol_forward_parallel), reps, warmup))
            if include_baselines:
                emit("linear", phase, _median_time(linear_fwd if phase == "forward" else linear_fwd_bwd,
                                                   reps, warmup))
        if include_baselines:
            with nc.no_grad():
                w = Tensor(pmol_forward_parallel(layer, W0, x, return_weights=True)[1].data.reshape(-1, shape.K + 1))
            D = balance_distribution(layer.groups, 0)
            emit("egs_loss", "forward", _median_time(lambda: egs_loss(w, D), reps, warmup))
    return results


def speedups(results) -> dict[tuple, float]:
    """sequential / parallel median ratio per (phase, shape)."""
    table = {}
    for r in results:
        table[(r.path, r.phase, r.K, r.r, r.a, r.b, r.batch, r.seq)] = r.seconds
    out = {}
    for (path, *rest), t in table.items():
        if path == "parallel":
            seq = table.get(("sequential", *rest))
            if seq is not None:
                out[tuple(rest)] = seq / t
    return out


def write_bench_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow(r.as_row())
