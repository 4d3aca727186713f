"""Policy benchmarks: frames used, multiplies and accuracy per speed bucket."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, DomainError
from .estimators import (
    Estimators,
    adapted_aggregate,
    motion_net_d_forward,
    motion_net_v_forward,
    size_net_forward,
)
from .features import aggregate, classify, global_cosine
from .policy import (
    SPEED_BUCKETS,
    MappingFn,
    PolicyConfig,
    SamplingStrategy,
    deformable_budget,
    neighborhood,
    sample_frames,
    speed_category_gt,
    vanilla_budget,
)
from .synthetic import world_of

CSV_COLUMNS = (
    "policy",
    "mean_frames",
    "multiplies",
    "wall_ms",
    "acc",
    "acc_slow",
    "acc_medium",
    "acc_fast",
    "cos_to_full",
)


@dataclass
class PolicyTally:
    frames: int = 0
    selected: int = 0
    multiplies: int = 0
    correct: int = 0
    wall_s: float = 0.0
    cos_sum: float = 0.0
    bucket_frames: list[int] = field(default_factory=lambda: [0, 0, 0])
    bucket_correct: list[int] = field(default_factory=lambda: [0, 0, 0])

    def add(self, other: "PolicyTally") -> None:
        self.frames += other.frames
        self.selected += other.selected
        self.multiplies += other.multiplies
        self.correct += other.correct
        self.wall_s += other.wall_s
        self.cos_sum += other.cos_sum
        for i in range(3):
            self.bucket_frames[i] += other.bucket_frames[i]
            self.bucket_correct[i] += other.bucket_correct[i]


@dataclass(frozen=True)
class ReportRow:
    policy: str
    mean_frames: float
    multiplies: int
    wall_ms: float | None
    acc: float
    acc_slow: float
    acc_medium: float
    acc_fast: float
    cos_to_full: float
    frames: int
    bucket_frames: tuple[int, int, int]

    @classmethod
    def from_tally(cls, name: str, t: PolicyTally, timing: bool) -> "ReportRow":
        bucket_acc = [c / n if n else float("nan") for c, n in zip(t.bucket_correct, t.bucket_frames)]
        return cls(
            policy=name,
            mean_frames=t.selected / t.frames,
            multiplies=t.multiplies,
            wall_ms=1000.0 * t.wall_s if timing else None,
            acc=t.correct / t.frames,
            acc_slow=bucket_acc[0],
            acc_medium=bucket_acc[1],
            acc_fast=bucket_acc[2],
            cos_to_full=t.cos_sum / t.frames,
            frames=t.frames,
            bucket_frames=tuple(t.bucket_frames),
        )


@dataclass
class BenchmarkReport:
    rows: list[ReportRow]
    oracle: bool
    seed: int
    notes: dict = field(default_factory=dict)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.policy == name:
                return r
        raise KeyError(name)


def speed_bucket(s_m: float) -> int:
    """0, 1, 2 for slow, medium, fast under the default three-way cut points."""
    return speed_category_gt(s_m) - 1


def _frame_budget(policy: PolicyConfig, clip, t: int, frames: np.ndarray, key_pos: int, est, oracle: bool) -> int:
    k = len(frames)
    if policy.mode == "fixed":
        return min(policy.k, k)
    key = frames[key_pos]
    if policy.mode == "vanilla":
        if oracle:
            delta = speed_category_gt(float(clip.s_m[t]), policy)
        else:
            delta = int(np.argmax(motion_net_v_forward(key, frames, est.motion_v))) + 1
        return vanilla_budget(delta, k, policy.theta)
    if oracle:
        s_m, s_s = float(clip.s_m[t]), float(clip.s_s[t])
    else:
        s_m = motion_net_d_forward(key, frames, est.motion_d)
        s_s = size_net_forward(key, est.size)
    return deformable_budget(s_m, s_s, policy.mapping, k)


def evaluate_clip(
    clip,
    clip_index: int,
    policies: Sequence[PolicyConfig],
    est: Estimators | None,
    oracle: bool,
    seed: int,
    timing: bool = False,
) -> list[PolicyTally]:
    """Run every policy over every key frame of one clip.

    Randomness (random sampling only) comes from ``(seed, clip_index,
    policy_index, strategy seed)`` so results do not depend on evaluation order.
    """
    bank = world_of(clip).bank
    per_elem = int(np.prod(clip.features.shape[1:]))
    tallies = []
    for p_index, policy in enumerate(policies):
        rng = np.random.default_rng(np.random.SeedSequence([seed, clip_index, p_index, policy.strategy.seed]))
        tally = PolicyTally()
        for t in range(clip.num_frames):
            nb = neighborhood(t, policy.k, clip.num_frames)
            start = nb[0]
            frames = clip.features[start : start + len(nb)]
            key_pos = t - start
            tic = time.perf_counter()
            budget = _frame_budget(policy, clip, t, frames, key_pos, est, oracle)
            chosen = sample_frames(nb, t, budget, policy.strategy, rng=rng)
            positions = [c - start for c in chosen]
            if est is not None:
                out = adapted_aggregate(est.adapter, frames, key_pos, positions)
            else:
                out = aggregate(frames[key_pos], frames[positions], chosen).feature
            label, _ = classify(out, bank)
            if timing:
                tally.wall_s += time.perf_counter() - tic
            full = aggregate(frames[key_pos], frames).feature
            hit = int(label == clip.class_id)
            bucket = speed_bucket(float(clip.s_m[t]))
            tally.frames += 1
            tally.selected += len(chosen)
            tally.multiplies += len(chosen) * per_elem
            tally.correct += hit
            tally.cos_sum += global_cosine(out, full)
            tally.bucket_frames[bucket] += 1
            tally.bucket_correct[bucket] += hit
        tallies.append(tally)
    return tallies


def check_policies(policies: Sequence[PolicyConfig], est: Estimators | None, oracle: bool) -> None:
    """Fail early when a policy needs estimators that were not supplied."""
    for p in policies:
        if p.mode != "fixed" and not oracle and est is None:
            raise CheckpointError(f"policy {p.name!r} needs trained estimators; pass a checkpoint or use --oracle")
        if p.mode == "vanilla" and not oracle and est.theta != p.theta:
            raise CheckpointError(f"policy {p.name!r} has theta={p.theta} but the checkpoint was trained with {est.theta}")


def run_benchmark(
    clips,
    policies: Sequence[PolicyConfig],
    est: Estimators | None = None,
    oracle: bool = False,
    seed: int = 0,
    workers: int = 1,
    timing: bool = False,
) -> BenchmarkReport:
    """Evaluate ``policies`` on ``clips``; ``oracle`` swaps estimator outputs for labels."""
    if not policies:
        raise DomainError("at least one policy is required")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise DomainError(f"policy names must be unique: {names}")
    check_policies(policies, est, oracle)

    def job(i):
        return evaluate_clip(clips[i], i, policies, est, oracle, seed, timing)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_clip = list(pool.map(job, range(len(clips))))
    else:
        per_clip = [job(i) for i in range(len(clips))]

    totals = [PolicyTally() for _ in policies]
    for tallies in per_clip:
        for total, t in zip(totals, tallies):
            total.add(t)
    rows = [ReportRow.from_tally(p.name, t, timing) for p, t in zip(policies, totals)]
    return BenchmarkReport(rows, oracle, seed)


def oracle_mode(clips, policies: Sequence[PolicyConfig], est: Estimators | None = None, **kwargs) -> BenchmarkReport:
    return run_benchmark(clips, policies, est, oracle=True, **kwargs)


def sweep_policies(k: int = 30, mapping: MappingFn | None = None, seed: int = 0) -> list[PolicyConfig]:
    """Deformable policies varying the mapping (nearest sampling) and the sampling (linear mapping)."""
    rows = []
    for variant in ("linear", "sqrt", "quadratic", "learnable"):
        m = mapping if variant == "learnable" else MappingFn(variant)
        if m is None:
            raise DomainError("the sweep needs trained learnable mapping weights")
        rows.append(PolicyConfig("deformable", k, mapping=m, name=f"sigma_{variant}"))
    for variant in ("nearest", "furthest", "bin", "random"):
        rows.append(
            PolicyConfig("deformable", k, strategy=SamplingStrategy(variant, seed), name=f"sampling_{variant}")
        )
    return rows


# -- output --------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "nan"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.6f}"


def report_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        wall = "nan" if r.wall_ms is None else f"{r.wall_ms:.3f}"
        writer.writerow(
            [r.policy, _fmt(r.mean_frames), _fmt(r.multiplies), wall]
            + [_fmt(getattr(r, c)) for c in CSV_COLUMNS[4:]]
        )
    return buf.getvalue()


def plot_report(report: BenchmarkReport, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    xs = [r.multiplies for r in report.rows]
    ys = [100.0 * r.acc for r in report.rows]
    ax.scatter(xs, ys)
    for r, x, y in zip(report.rows, xs, ys):
        ax.annotate(r.policy, (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("multiplies")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("compute vs accuracy" + (" (oracle labels)" if report.oracle else ""))
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(report: BenchmarkReport, out_dir, formats: Sequence[str] = ("csv",), stem: str = "report") -> list[Path]:
    """Write the report as ``<stem>.csv`` and/or ``<stem>.png`` plus a ``<stem>.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = out_dir / f"{stem}.csv"
            path.write_text(report_csv(report))
        elif fmt == "plot":
            path = plot_report(report, out_dir / f"{stem}.png")
        else:
            raise DomainError(f"unknown report format {fmt!r}")
        written.append(path)
    sidecar = {
        "oracle": report.oracle,
        "seed": report.seed,
        "columns": list(CSV_COLUMNS),
        "frames": {r.policy: r.frames for r in report.rows},
        "bucket_frames": {r.policy: dict(zip(SPEED_BUCKETS, r.bucket_frames)) for r in report.rows},
        "notes": report.notes,
    }
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def repeat_summary(reports: Sequence[BenchmarkReport]) -> str:
    """Mean and standard deviation of each policy's metrics across repeated seeds."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    metrics = ("mean_frames", "acc", "acc_slow", "acc_medium", "acc_fast", "cos_to_full")
    writer.writerow(["policy", "runs"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
    for i, row in enumerate(reports[0].rows):
        cells = [row.policy, str(len(reports))]
        for m in metrics:
            vals = np.array([getattr(r.rows[i], m) for r in reports], dtype=np.float64)
            cells += [_fmt(float(np.mean(vals))), _fmt(float(np.std(vals)))]
        writer.writerow(cells)
    return buf.getvalue()
