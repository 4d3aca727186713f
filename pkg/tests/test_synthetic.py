import numpy as np
import pytest

from dynagg.errors import SpecError
from dynagg.features import aggregate, classify, global_cosine
from dynagg.policy import Box, PolicyConfig, neighborhood
from dynagg.synthetic import (
    SPEED_RANGES,
    ClipSpec,
    DatasetSpec,
    coverage_mask,
    degrade,
    generate_clip,
    label_clip,
    load_clips,
    make_dataset,
    make_world,
    save_clips,
    speed_for_motion_iou,
    world_of,
)


def still_spec(**kw):
    base = dict(
        num_frames=6,
        shape=(4, 3, 3),
        class_id=2,
        boxes=(Box(0.0, 0.0, 320.0, 240.0),),
        velocities=((0.0, 0.0),),
        base_noise=0.0,
        amplitude=1.0,
        seed=5,
    )
    base.update(kw)
    return ClipSpec(**base)


def test_static_noiseless_clip_is_the_prototype():
    clip = generate_clip(still_spec())
    proto = world_of(clip).bank.prototypes[2]
    for t in range(clip.num_frames):
        np.testing.assert_array_equal(clip.features[t], proto)
    assert np.all(clip.s_m == 1.0)
    assert np.all(clip.delta == 1)
    assert np.all(clip.s_s == 1.0)


def test_world_background_orthogonal_to_prototypes():
    world = make_world(10, (16, 6, 6), 0)
    bg = np.broadcast_to(world.background[:, None, None], (16, 6, 6))
    for p in world.bank.prototypes:
        assert abs(np.sum(p * bg)) < 1e-12


def test_coverage_mask():
    mask = coverage_mask(np.array([[0.0, 0.0, 160.0, 120.0]]), (320.0, 240.0), (2, 2))
    np.testing.assert_allclose(mask, [[1, 0], [0, 0]])
    mask = coverage_mask(np.array([[0.0, 0.0, 80.0, 240.0]]), (320.0, 240.0), (1, 2))
    np.testing.assert_allclose(mask, [[0.5, 0.0]])


def test_degrade_zero_magnitude_and_determinism():
    x = np.arange(12.0).reshape(3, 2, 2)
    out = degrade(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)
    assert out is not x
    a = degrade(x, 0.3, np.random.default_rng(4))
    b = degrade(x, 0.3, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_degrade_std_matches_target():
    x = np.zeros((100, 10, 10))
    out = degrade(x, 0.1, np.random.default_rng(0), reference_norm=50.0)
    target = 0.1 * 50.0 / np.sqrt(x.size)
    assert abs(out.std() - target) / target < 0.1


def test_trajectory_leaving_frame_is_rejected():
    spec = still_spec(boxes=(Box(0.0, 0.0, 100.0, 100.0),), velocities=((50.0, 0.0),))
    with pytest.raises(SpecError):
        generate_clip(spec)
    with pytest.raises(SpecError):
        generate_clip(still_spec(num_frames=1))
    with pytest.raises(SpecError):
        generate_clip(still_spec(base_noise=-1.0))
    with pytest.raises(SpecError):
        generate_clip(still_spec(class_id=10))


def test_label_round_trip_and_idempotence():
    clip = make_dataset(DatasetSpec(clips=3, frames=12), seed=3)[1]
    again = label_clip(clip)
    for name in ("s_m", "s_s", "delta"):
        np.testing.assert_array_equal(getattr(again, name), getattr(clip, name))
    np.testing.assert_array_equal(label_clip(again).delta, again.delta)


def test_relabel_with_other_thresholds():
    clip = make_dataset(DatasetSpec(clips=1, frames=12, speed="medium"), seed=0)[0]
    relabeled = label_clip(clip, PolicyConfig("vanilla", theta=2, thresholds=(0.5,)))
    assert relabeled.thresholds == (0.5,)
    assert np.all(relabeled.delta == 1)


def test_seed_determinism():
    ds = DatasetSpec(clips=4, frames=10)
    a = make_dataset(ds, seed=11)
    b = make_dataset(ds, seed=11)
    c = make_dataset(ds, seed=12)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.spec == y.spec
    assert a[0].features.tobytes() != c[0].features.tobytes()


def test_speed_ranges_realised():
    for speed in ("slow", "medium", "fast"):
        clips = make_dataset(DatasetSpec(clips=4, frames=20, speed=speed), seed=0)
        lo, hi = SPEED_RANGES[speed]
        for c in clips:
            # constant velocity and a window clipped at the ends keep s_m flat
            assert np.all((c.s_m > lo - 1e-6) & (c.s_m < hi + 1e-6))
            assert np.all(c.delta == {"slow": 1, "medium": 2, "fast": 3}[speed])


def test_speed_for_motion_iou_hits_target():
    from dynagg.synthetic import _mean_iou_at_speed

    v = speed_for_motion_iou(60.0, 50.0, 0.6, 0.8, 0.8, 10)
    assert _mean_iou_at_speed(60.0, 50.0, 0.6, 0.8, v, 10) == pytest.approx(0.8, abs=1e-9)


def test_mixed_dataset_cycles_speeds():
    clips = make_dataset(DatasetSpec(clips=6, frames=10), seed=0)
    assert [int(c.delta[0]) for c in clips] == [1, 2, 3, 1, 2, 3]


def test_clip_archive_round_trip(tmp_path):
    clips = make_dataset(DatasetSpec(clips=3, frames=8), seed=1)
    path = save_clips(tmp_path / "clips.npz", clips)
    back = load_clips(path)
    assert len(back) == 3
    for x, y in zip(clips, back):
        assert x.spec == y.spec
        for name in ("features", "boxes", "s_m", "s_s", "delta"):
            assert getattr(x, name).tobytes() == getattr(y, name).tobytes()
        # the ClipSpec alone regenerates the clip
        assert generate_clip(y.spec).features.tobytes() == x.features.tobytes()


def test_clip_archive_rejects_other_files(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, meta=np.array('{"format": "something", "version": 1}'))
    with pytest.raises(SpecError):
        load_clips(path)
    np.savez(path, meta=np.array('{"format": "dynagg-clips", "version": 99}'))
    with pytest.raises(SpecError):
        load_clips(path)


def test_degradation_ordering_over_velocity():
    speeds = [0.0, 1.0, 2.0, 4.0, 8.0]
    means = []
    for v in speeds:
        cos = []
        for seed in range(5):
            spec = ClipSpec(
                num_frames=10,
                shape=(16, 6, 6),
                class_id=seed % 10,
                boxes=(Box(100.0, 80.0, 160.0, 140.0),),
                velocities=((v, 0.0),),
                seed=seed,
            )
            clip = generate_clip(spec)
            proto = world_of(clip).bank.prototypes[spec.class_id]
            cos += [global_cosine(f, proto) for f in clip.features]
        means.append(np.mean(cos))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_aggregation_helps_fast_clips():
    clips = make_dataset(DatasetSpec(clips=12, frames=30, speed="fast"), seed=4)
    single = full = 0
    for c in clips:
        bank = world_of(c).bank
        for t in range(c.num_frames):
            nb = list(neighborhood(t, 30, c.num_frames))
            single += classify(c.features[t], bank)[0] == c.class_id
            full += classify(aggregate(c.features[t], c.features[nb]).feature, bank)[0] == c.class_id
    assert full >= single


def test_make_clip_spec_reports_impossible_fit():
    ds = DatasetSpec(clips=1, frames=200, speed="fast", box_side=(0.9, 1.0))
    with pytest.raises(SpecError):
        make_dataset(ds, seed=0)
