"""Acceptance checks; each test prints one ``criterion N PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python
tests/test_acceptance.py``) to see the summary lines.
"""

import time

import numpy as np
import pytest

from dynagg.bench import oracle_mode
from dynagg.cli import main
from dynagg.estimators import Estimators, TrainConfig, all_examples, evaluate, gradient_check, train
from dynagg.features import aggregate, cosine_weights, global_cosine
from dynagg.policy import (
    MappingFn,
    PolicyConfig,
    SamplingStrategy,
    deformable_budget,
    neighborhood,
    sample_frames,
    speed_category_gt,
    vanilla_budget,
)
from dynagg.synthetic import DatasetSpec, make_dataset


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def test_criterion_01_sampling_table(verdict):
    tic = time.perf_counter()
    expected = {
        "nearest": (8, 9, 10, 11, 12, 13, 14),
        "furthest": (1, 2, 3, 11, 19, 20, 21),
        "bin": (2, 5, 8, 11, 14, 17, 20),
    }
    got = {v: sample_frames(range(1, 22), 11, 7, SamplingStrategy(v)) for v in expected}
    elapsed = time.perf_counter() - tic
    verdict(1, got == expected and elapsed < 1.0, f"{got} in {elapsed:.3f}s")


def test_criterion_02_budget_arithmetic(verdict):
    budgets = tuple(vanilla_budget(d, 30, 3) for d in (1, 2, 3))
    floor = deformable_budget(1.0, 1.0, MappingFn("linear"), 30)
    verdict(2, budgets == (10, 20, 30) and floor == 1, f"vanilla {budgets}, linear floor at s=1 -> {floor}")


def test_criterion_03_speed_buckets(verdict):
    got = tuple(speed_category_gt(s) for s in (0.95, 0.9, 0.8, 0.7, 0.5))
    verdict(3, got == (1, 2, 2, 2, 3), f"categories {got}")


def test_criterion_04_aggregation_identities(verdict):
    tic = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_self = worst_sum = worst_perm = 0.0
    counts_ok = True
    for _ in range(100):
        n, c, h, w = (int(x) for x in rng.integers(1, [9, 9, 7, 7]))
        key = rng.normal(size=(c, h, w))
        nbs = rng.normal(size=(n, c, h, w))
        worst_self = max(worst_self, np.abs(aggregate(key, [key] * n).feature - key).max())
        worst_sum = max(worst_sum, np.abs(cosine_weights(key, nbs).sum(axis=0) - 1.0).max())
        res = aggregate(key, nbs)
        perm = rng.permutation(n)
        worst_perm = max(worst_perm, np.abs(aggregate(key, nbs[perm]).feature - res.feature).max())
        counts_ok &= res.multiplies == n * c * h * w
    elapsed = time.perf_counter() - tic
    ok = worst_self <= 1e-6 and worst_sum <= 1e-6 and worst_perm <= 1e-9 and counts_ok and elapsed < 10
    verdict(
        4,
        ok,
        f"self {worst_self:.1e}, weight sum {worst_sum:.1e}, permutation {worst_perm:.1e}, "
        f"counts exact {counts_ok}, {elapsed:.2f}s",
    )


def test_criterion_05_gradient_check(verdict):
    tic = time.perf_counter()
    worst = 0.0
    names = set()
    for seed, (channels, hw) in enumerate([(4, 3), (8, 4), (6, 2), (8, 3), (5, 4)]):
        errs = gradient_check(seed=seed, channels=channels, hw=hw)
        names |= set(errs)
        worst = max(worst, max(errs.values()))
    elapsed = time.perf_counter() - tic
    complete = names == set(Estimators.init(4).arrays())
    verdict(5, worst < 1e-4 and complete and elapsed < 60, f"max relative error {worst:.2e} over {len(names)} arrays, {elapsed:.1f}s")


def test_criterion_06_slow_motion_similarity(verdict):
    tic = time.perf_counter()
    clips = make_dataset(DatasetSpec(clips=7, frames=30, speed="slow", base_noise=0.05), seed=6)
    cos = []
    for c in clips:
        for t in range(c.num_frames):
            if c.s_m[t] > 0.9 and len(cos) < 200:
                nb = list(neighborhood(t, 30, c.num_frames))
                cos.append(global_cosine(aggregate(c.features[t], c.features[nb]).feature, c.features[t]))
    elapsed = time.perf_counter() - tic
    mean = float(np.mean(cos))
    verdict(6, len(cos) == 200 and mean >= 0.95 and elapsed < 30, f"mean cosine {mean:.4f} over {len(cos)} frames, {elapsed:.1f}s")


def test_criterion_07_distillation(verdict):
    tic = time.perf_counter()
    ds = DatasetSpec(clips=12, frames=30)
    train_clips = make_dataset(ds, seed=70)
    held = make_dataset(ds, seed=71)
    cfg = TrainConfig(lr=0.5, steps=200, batch_size=16, k=16, distill="fixed", student_k=4, seed=0)
    no_dst = TrainConfig(**{**cfg.__dict__, "lambda_dst": 0.0})
    train_ex = all_examples(train_clips, cfg, seed=1)
    held_ex = all_examples(held, cfg, seed=2)
    start = Estimators.init(16, 3, 0)
    before_train = evaluate(start, train_ex, cfg)["dst"]
    before_held = evaluate(start, held_ex, cfg)["cos_to_full"]
    distilled = train(train_clips, cfg, init=start).estimators
    plain = train(train_clips, no_dst, init=start).estimators
    after_train = evaluate(distilled, train_ex, cfg)["dst"]
    after_held = evaluate(distilled, held_ex, cfg)["cos_to_full"]
    plain_held = evaluate(plain, held_ex, cfg)["cos_to_full"]
    elapsed = time.perf_counter() - tic
    reduction = 1.0 - after_train / before_train
    ok = reduction >= 0.5 and after_held > before_held and plain_held < after_held and elapsed < 300
    verdict(
        7,
        ok,
        f"L_dst {before_train:.4g} -> {after_train:.4g} ({100 * reduction:.1f}% lower); held-out cos_to_full "
        f"untrained {before_held:.4f}, distilled {after_held:.4f}, no distillation {plain_held:.4f}; {elapsed:.1f}s",
    )


def test_criterion_08_tradeoff(verdict):
    tic = time.perf_counter()
    mixed = make_dataset(DatasetSpec(clips=36, frames=30, speed="mixed"), seed=80)
    fixed, vanilla = PolicyConfig("fixed", 30), PolicyConfig("vanilla", 30)
    deformable = PolicyConfig("deformable", 30, mapping=MappingFn("linear"))
    rep = oracle_mode(mixed, [fixed, vanilla], workers=4)
    f, v = rep.rows
    saving = 1.0 - v.multiplies / f.multiplies
    drop = f.acc - v.acc
    # slow-heavy: slow motion and large objects, where the size score is high
    slow = make_dataset(
        DatasetSpec(clips=12, frames=30, speed="slow", frame_size=(240.0, 240.0), box_side=(0.85, 0.95)), seed=81
    )
    sv, sd = oracle_mode(slow, [vanilla, deformable]).rows
    elapsed = time.perf_counter() - tic
    ok = f.frames >= 1000 and saving >= 0.25 and drop <= 0.01 and sd.multiplies <= sv.multiplies and elapsed < 300
    verdict(
        8,
        ok,
        f"mixed ({f.frames} frames): vanilla saves {100 * saving:.1f}% multiplies, accuracy {100 * f.acc:.2f}% -> "
        f"{100 * v.acc:.2f}%; slow-heavy: deformable {sd.multiplies} vs vanilla {sv.multiplies} multiplies; {elapsed:.1f}s",
    )


def test_criterion_09_estimator_learnability(verdict):
    tic = time.perf_counter()
    ds = DatasetSpec(clips=500, frames=15, speed="mixed")
    train_clips = make_dataset(ds, seed=90)
    test_clips = make_dataset(DatasetSpec(**{**ds.__dict__, "clips": 200}), seed=91)
    cfg = TrainConfig(lr=0.05, steps=400, batch_size=16, k=15, lambda_size=0.0, lambda_dst=0.0, seed=0)
    est = train(train_clips, cfg).estimators
    acc = evaluate(est, all_examples(test_clips, cfg, seed=0), cfg)["acc_v"]
    elapsed = time.perf_counter() - tic
    verdict(9, acc >= 0.9 and elapsed < 300, f"held-out category accuracy {100 * acc:.1f}% on 200 clips, {elapsed:.1f}s")


def test_criterion_10_reproducibility(verdict, tmp_path, capsys):
    import yaml

    tic = time.perf_counter()
    config = {
        "seed": 10,
        "datasets": [{"split": "eval", "clips": 12, "frames": 30}],
        "policies": [
            {"name": "fixed", "mode": "fixed", "k": 30},
            {"name": "vanilla", "mode": "vanilla", "k": 30},
            {"name": "deformable_random", "mode": "deformable", "k": 30, "strategy": "random"},
        ],
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(config))
    outputs = []
    for run, workers in enumerate(("1", "1", "4")):
        out = tmp_path / f"run{run}"
        code = main(["bench", "--config", str(path), "--out", str(out), "--oracle", "--workers", workers])
        assert code == 0
        outputs.append((out / "report.csv").read_bytes())
    capsys.readouterr()
    elapsed = time.perf_counter() - tic
    same = outputs[0] == outputs[1] == outputs[2]
    verdict(10, same and elapsed < 120, f"3 runs (serial, serial, 4 workers) byte-identical: {same}, {elapsed:.1f}s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
