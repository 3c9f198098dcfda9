import json
import struct

import numpy as np
import pytest

from ifc_lab import tensor as T
from ifc_lab.model import IFCModel, ModelConfig
from ifc_lab.synth import generate, random_scene
from ifc_lab.tensor import ContractError, Tensor
from ifc_lab.tracker import TrackerConfig
from ifc_lab.trainer import (CKPT_MAGIC, AdamW, NumericAbort, TrainConfig, evaluate_checkpoint, evaluate_videos,
                             gt_predictor, init_training, load_checkpoint, read_checkpoint, run_training,
                             save_checkpoint, train_step)

SMALL = ModelConfig(model_dim=16, num_heads=2, ffn_dim=32, memory_tokens=2, enc_layers=1, dec_layers=1,
                    num_queries=6, stem_channels=(4, 8))


@pytest.fixture(scope="module")
def videos():
    return [generate(random_scene(s, height=32, width=32, num_frames=8)) for s in range(3)]


def small_cfg(**kw):
    base = dict(batch_size=2, total_steps=6, clip_length=3, model=SMALL, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def params_of(state):
    return {k: v.copy() for k, v in state.model.state_dict().items()}


def test_config_invariants():
    with pytest.raises(ContractError):
        TrainConfig(lr_transformer=0.0)
    with pytest.raises(ContractError):
        TrainConfig(total_steps=10, decay_step=10)
    assert TrainConfig(total_steps=100).decay_step == 75
    cfg = TrainConfig(total_steps=100)
    assert cfg.lr_scale(74) == 1.0 and cfg.lr_scale(75) == 0.1
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_identical_steps_from_identical_state(videos):
    a = init_training(videos, small_cfg())
    b = init_training(videos, small_cfg())
    la = train_step(a.sampler.batch(2), a.model, a.optimizer, a.cfg)
    lb = train_step(b.sampler.batch(2), b.model, b.optimizer, b.cfg)
    assert la == lb
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_zero_learning_rate_leaves_parameters(videos):
    st = init_training(videos, small_cfg())
    st.optimizer.groups = [(ps, 0.0) for ps, _ in st.optimizer.groups]
    before = params_of(st)
    train_step(st.sampler.batch(2), st.model, st.optimizer, st.cfg)
    after = params_of(st)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_weight_decay_is_decoupled():
    p = Tensor(np.array([1.0, -2.0, 4.0]), requires_grad=True)
    opt = AdamW([([p], 0.01)], weight_decay=0.5)
    for k in range(1, 4):
        opt.zero_grad()
        opt.step()
        np.testing.assert_array_equal(p.data, np.array([1.0, -2.0, 4.0]) * (1 - 0.01 * 0.5) ** k)
    assert np.all(opt.m[id(p)] == 0) and np.all(opt.v[id(p)] == 0)


def test_adamw_first_step_is_sign_sized():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = AdamW([([p], 0.1)], weight_decay=0.0)
    p.grad = np.array([3.0, -0.002])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-5)


def test_fixed_seed_reproduces_loss_curve(videos):
    curves = []
    for _ in range(2):
        st = run_training(init_training(videos, small_cfg()))
        curves.append(st.history)
    assert curves[0] == curves[1] and len(curves[0]) == 6


def test_checkpoint_format_and_forward_round_trip(videos, tmp_path):
    st = run_training(init_training(videos, small_cfg()), steps=2)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, st)
    raw = path.read_bytes()
    assert raw[:4] == CKPT_MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == 1
    manifest, tensors = read_checkpoint(path)
    assert manifest["step"] == 2 and manifest["config"]["model"]["model_dim"] == 16
    assert all(k.split("/", 1)[0] in ("param", "adam_m", "adam_v") for k in tensors)
    re = load_checkpoint(path, videos)
    frames = videos[0].frames[:3]
    st.model.eval(), re.model.eval()
    with T.no_grad():
        a, b = st.model(frames), re.model(frames)
    assert np.array_equal(a.mask_logits.data, b.mask_logits.data)
    assert np.array_equal(a.class_logits.data, b.class_logits.data)


def test_bad_checkpoint_rejected(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ContractError):
        read_checkpoint(p)


def test_resume_reproduces_next_loss(videos, tmp_path):
    full = run_training(init_training(videos, small_cfg()))
    half = run_training(init_training(videos, small_cfg()), steps=3)
    save_checkpoint(tmp_path / "h.ckpt", half)
    resumed = run_training(load_checkpoint(tmp_path / "h.ckpt", videos))
    assert resumed.history == full.history
    assert all(np.array_equal(a, b) for a, b in zip(params_of(resumed).values(), params_of(full).values()))


def test_non_finite_loss_aborts_with_clip_id(videos):
    st = init_training(videos, small_cfg())
    st.model.decoder.class_head.fc2.bias.data[:] = np.inf
    with pytest.raises(NumericAbort) as exc:
        train_step(st.sampler.batch(1), st.model, st.optimizer, st.cfg)
    assert exc.value.clip_id and exc.value.clip_id in str(exc.value)


def test_training_log_is_json_lines(videos, tmp_path):
    run_training(init_training(videos, small_cfg(total_steps=3)), log_path=tmp_path / "log.jsonl")
    recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert set(recs[0]) == {"step", "loss", "lr", "wall_time"}


def test_sampler_drops_absent_instances(videos):
    st = init_training(videos, small_cfg())
    for clip in st.sampler.batch(20):
        assert clip.frames.shape == (3, 32, 32, 3)
        assert all(g.mask.any() and g.mask.shape == (3, 16, 16) for g in clip.gts)


def test_untrained_model_scores_near_zero_and_is_deterministic(videos):
    model = IFCModel(SMALL)
    a = evaluate_checkpoint(model, videos, 3, 1)
    b = evaluate_checkpoint(model, videos, 3, 1)
    assert a.AP < 0.05 and a.to_json() == b.to_json()


def test_gt_pass_through_offline_equals_near_online():
    vids = []
    for seed in range(60):
        v = generate(random_scene(seed, num_frames=12))
        if all(i.masks.reshape(12, -1).any(1).all() for i in v.instances):
            vids.append(v)
    assert len(vids) >= 3
    offline = evaluate_videos(gt_predictor(3), vids, TrackerConfig(T=12, S=12))
    online = evaluate_videos(gt_predictor(3), vids, TrackerConfig(T=5, S=1))
    assert offline.to_json() == online.to_json()
    assert offline.AP == 1.0


def test_overfits_a_single_clip():
    video = generate(random_scene(3))
    cfg = TrainConfig(batch_size=1, total_steps=200, lr_stem=1e-4, hflip=False,
                      model=ModelConfig(dropout=0.0))
    st = init_training([video], cfg)
    clip = st.sampler.sample()
    losses = [train_step([clip], st.model, st.optimizer, cfg, s) for s in range(200)]
    assert losses[-1] < 0.2 * losses[0]
