import json

import numpy as np
import pytest

from semsplat import checkpoint
from semsplat.codec import CodecConfig, train_codec
from semsplat.core import PARAM_NAMES
from semsplat.deformation import deform, tv_loss
from semsplat.losses import Stage, anchor_loss, anchor_record, l1_loss, masked_image_loss
from semsplat.raster import render
from semsplat.synth import LEVELS, bundled_spec, generate_scene
from semsplat.trainer import (ConfigError, TrainConfig, build_context, densify_and_prune, init_state, total_loss,
                              train)


@pytest.fixture(scope="module")
def tiny():
    spec = bundled_spec("dynamic-clean", width=24, height=24, n_times=3, n_train_views=3, n_test_views=1,
                        supersample=2)
    return generate_scene(spec, seed=0)


def tiny_config(**kw):
    base = dict(coarse_iters=12, fine_iters=12, n_init=150, codec_iters=150, deform_resolution=(4, 4, 4, 3),
                deform_channels=4, deform_hidden=8, densify_interval=10, eval_every=0, max_gaussians=400,
                f64=True)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_codec(tiny):
    codec, _ = train_codec(tiny.codebook, CodecConfig(latent_dim=8, iterations=150, seed=0))
    return codec


def fine_state(tiny, codec, config, seed=0):
    state = init_state(tiny, config)
    ctx = build_context(tiny, codec, config)
    state.gate.advance()
    rng = np.random.default_rng(seed)
    for name in PARAM_NAMES:
        arr = getattr(state.cloud, name)
        arr += 0.01 * rng.normal(size=arr.shape)
    state.field.params["grid"] += 0.01 * rng.normal(size=state.field.params["grid"].shape)
    return state, ctx


def test_total_loss_equals_component_sum(tiny, tiny_codec):
    config = tiny_config(lambda_mask=0.7, lambda_anchor=2.0, lambda_semantic=0.3, lambda_tv=1.5)
    state, ctx = fine_state(tiny, tiny_codec, config)
    batch = tiny.train_frames[:2]
    loss, comps, *_ = total_loss(state, batch, ctx, config)

    photo = sem = 0.0
    for f in batch:
        out = render(state.cloud, deform(state.field, state.cloud, f.time), f.camera, np.zeros(3),
                     config.render_settings)
        photo += masked_image_loss(out.color, f.image, f.mask, ctx.lam_mask)[0] / 2
        for lvl in LEVELS:
            sem += l1_loss(out.feature, ctx.latent_table[f.classes[lvl]])[0] / 2
    anchor = anchor_loss(state.cloud, state.gate, config.anchor)[0] / len(state.cloud)
    tv = tv_loss(state.field)
    expected = 0.7 * photo + 2.0 * anchor + 0.3 * sem + 1.5 * tv
    assert abs(loss - expected) < 1e-8
    assert comps["anchor"] > 0 and comps["tv"] > 0


def test_all_weights_zero(tiny, tiny_codec):
    config = tiny_config(lambda_mask=0.0, lambda_anchor=0.0, lambda_semantic=0.0, lambda_tv=0.0)
    state, ctx = fine_state(tiny, tiny_codec, config)
    loss, _, g_cloud, g_field, _ = total_loss(state, tiny.train_frames[:2], ctx, config)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in g_cloud.values())
    assert all(np.all(g == 0) for g in g_field.values())


def test_tv_only_on_constant_grid(tiny, tiny_codec):
    config = tiny_config(lambda_mask=0.0, lambda_anchor=0.0, lambda_semantic=0.0, lambda_tv=1.0)
    state, ctx = fine_state(tiny, tiny_codec, config)
    state.field.params["grid"][...] = 0.3
    loss, *_ = total_loss(state, tiny.train_frames[:2], ctx, config)
    assert loss == 0.0


def test_coarse_loss_has_no_field_gradient(tiny, tiny_codec):
    config = tiny_config()
    state = init_state(tiny, config)
    ctx = build_context(tiny, tiny_codec, config)
    loss, comps, _, g_field, _ = total_loss(state, tiny.train_frames[:2], ctx, config)
    assert all(np.all(g == 0) for g in g_field.values())
    assert comps["semantic"] == 0 and comps["tv"] == 0


def densify_setup(tiny, n_opt_steps=1):
    config = tiny_config()
    state = init_state(tiny, config)
    grads = {k: np.ones_like(v) for k, v in state.cloud.params().items()}
    for _ in range(n_opt_steps):
        state.optimizer.step({k: v.copy() for k, v in state.cloud.params().items()}, grads,
                             {k: 0.0 for k in grads})
    return config, state


def test_zero_signal_only_prunes(tiny):
    config, state = densify_setup(tiny)
    n = len(state.cloud)
    state.cloud.opacity_logit[:5] = -20.0
    counts = densify_and_prune(state, config, 5.0, signal=np.zeros(n))
    assert counts == {"cloned": 0, "split": 0, "pruned": 5}
    assert len(state.cloud) == n - 5


def test_single_clone(tiny):
    config, state = densify_setup(tiny)
    n = len(state.cloud)
    state.cloud.log_scale[7] = np.log(1e-4)
    signal = np.zeros(n)
    signal[7] = 1.0
    counts = densify_and_prune(state, config, 5.0, signal=signal)
    assert counts["cloned"] == 1 and counts["split"] == 0
    assert len(state.cloud) == n + 1
    assert state.cloud.generation[-1] == state.cloud.round == 1
    np.testing.assert_array_equal(state.cloud.position[-1], state.cloud.position[7])


def test_split_replaces_with_two_smaller(tiny):
    config, state = densify_setup(tiny)
    n = len(state.cloud)
    state.cloud.log_scale[3] = np.log(0.5)
    signal = np.zeros(n)
    signal[3] = 1.0
    counts = densify_and_prune(state, config, 5.0, signal=signal)
    assert counts["split"] == 1
    assert len(state.cloud) == n + 1
    np.testing.assert_allclose(state.cloud.log_scale[-2:], np.log(0.5 / 1.6))


def test_moments_follow_gaussians_through_densify(tiny):
    config, state = densify_setup(tiny)
    cloud = state.cloud
    n = len(cloud)
    rng = np.random.default_rng(9)
    tags = np.arange(1, n + 1, dtype=np.float64)
    for name in PARAM_NAMES:
        m = state.optimizer.m[name]
        m[...] = tags.reshape((-1,) + (1,) * (m.ndim - 1))
        state.optimizer.v[name][...] = m
    cloud.opacity_logit[rng.choice(n, 20, replace=False)] = -20.0
    small = rng.choice(n, 40, replace=False)
    cloud.log_scale[small] = np.log(1e-4)
    cloud.log_scale[np.setdiff1d(np.arange(n), small)] = np.log(0.5)
    signal = rng.random(n) * 2e-4 * 2
    before_pos = cloud.position.copy()
    before_opacity = cloud.opacity()
    chosen = signal >= config.densify_grad_threshold
    big = cloud.scale().max(axis=1) > config.clone_scale_fraction * 5.0
    expect_kept = [i for i in range(n) if not (chosen[i] and big[i]) and before_opacity[i] >= config.prune_opacity]
    densify_and_prune(state, config, 5.0, signal=signal)
    k = len(expect_kept)
    for name in PARAM_NAMES:
        m = state.optimizer.m[name]
        assert m.shape[0] == len(state.cloud)
        np.testing.assert_array_equal(m[:k].reshape(k, -1)[:, 0], tags[expect_kept])
        assert np.all(m[k:] == 0)
    np.testing.assert_array_equal(state.cloud.position[:k], before_pos[expect_kept])
    assert np.all(state.cloud.generation[k:] == 1)
    assert np.all(state.cloud.generation[:k] == 0)


def test_densify_refreshes_anchors(tiny):
    config, state = densify_setup(tiny)
    state.cloud.position += 0.1
    densify_and_prune(state, config, 5.0, signal=np.zeros(len(state.cloud)))
    np.testing.assert_array_equal(state.cloud.anchors["position"], state.cloud.position)


def test_empty_cloud_densify_unchanged(tiny):
    config, state = densify_setup(tiny)
    state.cloud = state.cloud.subset(np.array([], dtype=np.int64))
    assert densify_and_prune(state, config, 5.0, signal=np.zeros(0)) == {"cloned": 0, "split": 0, "pruned": 0}


@pytest.fixture(scope="module")
def tiny_run(tiny, tiny_codec, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    records = []
    field_at_switch = {}

    def watch(state, record):
        records.append((record["iteration"], state.gate.stage, state.cloud.generation.copy(), state.n_densify,
                        state.n_anchor_refresh))
        if record["iteration"] == 12:
            field_at_switch.update({k: v.copy() for k, v in state.field.params.items()})

    config = tiny_config()
    res = train(tiny, config, codec=tiny_codec, out_dir=out, callback=watch)
    return res, records, field_at_switch, out


def test_stage_switch_exactly_once(tiny_run, tiny):
    res, records, field_at_switch, _ = tiny_run
    stages = [r[1] for r in records]
    switches = [i for i in range(1, len(stages)) if stages[i] != stages[i - 1]]
    assert switches == [12]
    fresh = init_state(tiny, res.config)
    for k, v in fresh.field.params.items():
        np.testing.assert_array_equal(field_at_switch[k], v)


def test_generations_and_anchor_counters(tiny_run):
    _, records, _, _ = tiny_run
    prev = np.zeros(0, dtype=np.int64)
    for it, _, gen, n_densify, n_refresh in records:
        # one refresh at start, one per densification, one at the stage switch
        assert n_refresh == 1 + n_densify + (1 if it > 12 else 0)
        assert gen.max() >= (prev.max() if len(prev) else 0)
        prev = gen
    assert records[-1][3] >= 1


def test_metrics_log_and_checkpoint(tiny_run):
    res, _, _, out = tiny_run
    lines = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 24
    assert {"iteration", "loss", "photometric", "semantic", "anchor", "tv"} <= set(lines[0])
    ck = checkpoint.load(out / "checkpoint.bin")
    np.testing.assert_array_equal(ck.cloud.position, res.cloud.position)


def test_identical_seeds_bit_identical(tiny_run, tiny, tiny_codec):
    res, _, _, _ = tiny_run
    again = train(tiny, tiny_config(), codec=tiny_codec)
    assert checkpoint.to_bytes(again.checkpoint()) == checkpoint.to_bytes(res.checkpoint())


def test_fine_iters_zero_is_coarse_only(tiny, tiny_codec):
    cfg = tiny_config(fine_iters=0)
    res = train(tiny, cfg, codec=tiny_codec)
    assert res.state.gate.stage is Stage.COARSE
    fresh = init_state(tiny, cfg)
    for k, v in fresh.field.params.items():
        np.testing.assert_array_equal(res.field.params[k], v)
    from semsplat.trainer import render_frame
    f = tiny.test_frames[0]
    static = render(res.cloud, None, f.camera, np.zeros(3), cfg.render_settings)
    np.testing.assert_array_equal(render_frame(res.state, f, res.context, cfg).color, static.color)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(coarse_iters=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_tv=-0.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"hgg": "yes"})
    cfg = TrainConfig.from_dict({"coarse_iters": 10, "lambda_mask": 2})
    assert cfg.coarse_iters == 10 and cfg.lambda_mask == 2.0
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(p) == cfg
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(p)


def test_anchor_record_fresh_state_gives_zero_anchor(tiny, tiny_codec):
    config = tiny_config(lambda_mask=0.0, lambda_semantic=0.0, lambda_tv=0.0)
    state = init_state(tiny, config)
    ctx = build_context(tiny, tiny_codec, config)
    anchor_record(state.cloud)
    loss, comps, *_ = total_loss(state, tiny.train_frames[:1], ctx, config)
    assert loss == 0.0 and comps["anchor"] == 0.0
