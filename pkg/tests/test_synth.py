import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifc_lab.synth import (CATEGORIES, CATEGORY_HUES, InstanceSpec, SceneSpec, downsample_masks, generate, load_video,
                           random_scene, rle_decode, rle_encode, save_video, split_clips)
from ifc_lab.tensor import ContractError


def scene(*insts, N=6, **kw):
    return SceneSpec(48, 48, N, list(insts), **kw)


def disk(x, y, vx=0.0, vy=0.0, depth=0, color=(200, 30, 30), size=5.0, kind="disk"):
    return InstanceSpec(kind, size, (x, y), (vx, vy), depth, color)


def test_static_disk_is_constant():
    v = generate(scene(disk(20, 20)))
    m = v.instances[0].masks
    assert all(np.array_equal(m[0], m[t]) for t in range(6))
    assert v.instances[0].category == CATEGORIES.index("disk")


def test_disjoint_moving_shapes_keep_their_area():
    v = generate(scene(disk(10, 10, vx=1.0), disk(30, 36, vx=-1.0, depth=1, color=(30, 200, 30), kind="rectangle"),
                       N=8))
    for inst in v.instances:
        areas = inst.masks.reshape(8, -1).sum(1)
        assert np.all(areas == areas[0])


def test_full_occlusion_frame():
    # the far disk crosses behind a larger near disk
    near = disk(24, 24, depth=0, size=9.0)
    far = disk(6, 24, vx=9.0, depth=1, size=3.0, color=(20, 20, 220))
    v = generate(scene(near, far, N=5))
    vis = v.instances[1].masks.reshape(5, -1).any(1)
    assert vis[0] and not vis[2] and vis[4]


def test_masks_disjoint_and_pixels_colored():
    spec = random_scene(11, occlusion_heavy=True, num_frames=10)
    v = generate(spec)
    stack = np.stack([i.masks for i in v.instances])
    assert stack.sum(0).max() <= 1
    for inst, ispec in zip(v.instances, spec.instances):
        assert np.all(v.frames[inst.masks] == np.array(ispec.color, np.uint8))
    # background pixels never take an instance colour
    bg = ~stack.any(0)
    colors = {tuple(i.color) for i in spec.instances}
    assert not any(tuple(px) in colors for px in v.frames[bg][::50])


def test_determinism():
    a, b = generate(random_scene(5)), generate(random_scene(5))
    assert np.array_equal(a.frames, b.frames)
    assert all(np.array_equal(x.masks, y.masks) for x, y in zip(a.instances, b.instances))


def test_validation_errors():
    with pytest.raises(ContractError):
        generate(scene(N=0))
    with pytest.raises(ContractError):
        generate(scene(disk(5, 5), disk(9, 9, color=(0, 0, 250))))  # duplicate depth
    with pytest.raises(ContractError):
        generate(scene(disk(5, 5, size=-1.0)))


def test_instances_can_leave_and_reenter():
    spec = scene(disk(40, 24, vx=4.0, size=3.0), N=12, margin=12.0)
    vis = generate(spec).instances[0].masks.reshape(12, -1).any(1)
    assert vis[0] and not vis.all() and vis[-1]


# ------------------------------------------------------------------ clips
def test_split_clip_hand_cases():
    assert [c.indices for c in split_clips(10, 10, 1)] == [tuple(range(10))]
    two = split_clips(10, 5, 5)
    assert [c.valid_frames for c in two] == [range(0, 5), range(5, 10)]
    three = split_clips(10, 5, 3)
    assert [c.start for c in three] == [0, 3, 6]
    assert three[-1].indices == (6, 7, 8, 9, 9) and three[-1].num_valid == 4 and three[-1].padded
    with pytest.raises(ContractError):
        split_clips(4, 5, 1)


@given(st.integers(1, 40), st.data())
@settings(max_examples=80, deadline=None)
def test_clip_coverage_and_overlap(N, data):
    T = data.draw(st.integers(1, N))
    S = data.draw(st.integers(1, T))
    clips = split_clips(N, T, S)
    covered = set()
    for c in clips:
        covered.update(c.valid_frames)
        assert len(c.indices) == T
    assert covered == set(range(N))
    for a, b in zip(clips[:-2], clips[1:-1]):
        assert len(set(a.valid_frames) & set(b.valid_frames)) == T - S


# ------------------------------------------------------------------ RLE / IO
def test_rle_hand_cases():
    assert rle_encode(np.zeros((2, 3, 4), bool)) == [24]
    assert rle_encode(np.array([0, 0, 1, 1, 1, 0], bool)) == [2, 3, 1]
    assert rle_encode(np.array([1, 1, 0], bool)) == [0, 2, 1]
    with pytest.raises(ContractError):
        rle_decode([2, 2], (5,))


@given(st.lists(st.booleans(), min_size=1, max_size=60))
@settings(max_examples=80, deadline=None)
def test_rle_round_trip(bits):
    m = np.array(bits)
    assert np.array_equal(rle_decode(rle_encode(m), m.shape), m)


def test_serialization_round_trip(tmp_path):
    v = generate(random_scene(3, num_frames=5, blur=True))
    save_video(v, tmp_path / "v")
    w = load_video(tmp_path / "v")
    assert np.array_equal(v.frames, w.frames)
    assert [i.category for i in v.instances] == [i.category for i in w.instances]
    assert all(np.array_equal(a.masks, b.masks) for a, b in zip(v.instances, w.instances))
    assert w.spec == v.spec
    meta = json.loads((tmp_path / "v" / "meta.json").read_text())
    assert meta["categories"] == list(CATEGORIES) and meta["num_frames"] == 5


def test_load_missing_dir_reports_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        load_video(tmp_path / "nowhere")


def test_downsample_area_threshold():
    m = np.zeros((1, 4, 4), bool)
    m[0, :2, :2] = True
    m[0, 2, 2] = True
    m[0, 2:, :2] = [[True, True], [False, False]]
    out = downsample_masks(m, 2)
    assert out.tolist() == [[[True, False], [True, False]]]


@given(st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_colours_follow_category_families_and_stay_distinct(seed):
    import colorsys
    spec = random_scene(seed)
    cols = [np.array(i.color, float) for i in spec.instances]
    for inst, c in zip(spec.instances, cols):
        h = colorsys.rgb_to_hsv(*(c / 255))[0]
        d = abs((h - CATEGORY_HUES[inst.kind] + 0.5) % 1.0 - 0.5)
        assert d <= 0.08
    assert all(np.abs(a - b).sum() >= 60 for i, a in enumerate(cols) for b in cols[i + 1:])
