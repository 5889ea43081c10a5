import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from transfield import autodiff as ad
from transfield import transfer as T
from transfield.fields import KPlanesConfig, SirenConfig
from transfield.io import GridSignal, NonFiniteDataError
from transfield.transfer import TrainConfig

TINY = SirenConfig(hidden_layers=2, hidden_width=10, omega0=10.0)


def wave(n=16, shift=0.0):
    x = np.linspace(-1, 1, n)
    return GridSignal.from_array((np.sin(3 * x + shift)[:, None] * np.cos(2 * x)[None, :]).astype(np.float32))


def test_normalize_coords_siren_and_grid():
    g = GridSignal.from_array(np.zeros((3, 1)))
    s = T.normalize_coords(g, "siren")
    np.testing.assert_array_equal(s[:, 0], [-1, 0, 1])
    np.testing.assert_array_equal(s[:, 1], [0, 0, 0])
    h = T.normalize_coords(g, "hashgrid")
    np.testing.assert_array_equal(h[:, 0], [0, 0.5, 1])
    np.testing.assert_array_equal(h[:, 1], [0.5, 0.5, 0.5])


def test_normalize_coords_endpoints_exact():
    c = T.normalize_coords(GridSignal.from_array(np.zeros((7, 13))), "siren")
    assert c.min() == -1.0 and c.max() == 1.0


def test_normalize_outputs_midpoint_and_constant():
    g = GridSignal((3,), ["a", "b"], {"a": np.array([0.0, 5.0, 10.0]), "b": np.full(3, 4.0)})
    scaled, ranges = T.normalize_outputs(g)
    np.testing.assert_array_equal(scaled.data["a"], [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(scaled.data["b"], 0.0)
    assert scaled.norm_meta["b"].constant and not scaled.norm_meta["a"].constant
    assert ranges["a"] == (0.0, 10.0)


def test_normalize_outputs_non_finite():
    g = GridSignal.from_array(np.array([0.0, np.inf, 1.0]), variables=None)
    with pytest.raises(NonFiniteDataError, match="value.*1"):
        T.normalize_outputs(g)


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3), offset=st.floats(-1e3, 1e3))
def test_denormalize_round_trip(seed, scale, offset):
    v = np.random.default_rng(seed).normal(size=20) * scale + offset
    scaled, _ = T.normalize_outputs(GridSignal.from_array(v))
    back = T.denormalize(scaled.data["value"], scaled.norm_meta["value"])
    np.testing.assert_allclose(back, v, rtol=1e-6, atol=1e-6 * (abs(offset) + scale))


def test_loss_examples():
    tape = ad.Tape()
    p = tape.leaf(np.full((4, 1), 1.5))
    assert float(T.loss(p, np.full((4, 1), 1.5)).value) == 0.0
    assert float(T.loss(p, np.full((4, 1), 1.0), "l1").value) == 0.5
    assert float(T.loss(p, np.full((4, 1), 1.0), "l2").value) == 0.25
    with pytest.raises(ValueError):
        T.loss(p, np.zeros((3, 1)))


def _adam(params, grads, steps=1, **kw):
    cfg = TrainConfig(**kw)
    moments = {"m": {k: np.zeros_like(v) for k, v in params.items()},
               "v": {k: np.zeros_like(v) for k, v in params.items()}}
    for s in range(1, steps + 1):
        T.adam_step(params, grads, moments, s, cfg)
    return params, moments


def test_adam_first_step():
    p, _ = _adam({"w": np.zeros(3)}, {"w": np.ones(3)}, lr=1e-3)
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_grad_leaves_params():
    params = {"w": np.array([1.0, 2.0])}
    cfg = TrainConfig()
    moments = {"m": {"w": np.array([0.5, 0.5])}, "v": {"w": np.array([0.25, 0.25])}}
    before = params["w"].copy()
    T.adam_step(params, {"w": np.zeros(2)}, moments, 3, cfg)
    np.testing.assert_allclose(moments["m"]["w"], 0.45)
    np.testing.assert_allclose(moments["v"]["w"], 0.25 * 0.999)
    # zero gradient with non-zero moments still moves params; with fresh moments it does not
    p, _ = _adam({"w": before.copy()}, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], before)


@settings(max_examples=30)
@given(c=st.floats(0.1, 1e3), g=st.floats(-10, 10).filter(lambda x: abs(x) > 0.1))
def test_adam_first_step_scale_invariant(c, g):
    a, _ = _adam({"w": np.zeros(1)}, {"w": np.array([g])}, lr=1e-2)
    b, _ = _adam({"w": np.zeros(1)}, {"w": np.array([c * g])}, lr=1e-2)
    np.testing.assert_allclose(a["w"], b["w"], rtol=1e-6)


@settings(max_examples=30)
@given(g=st.floats(-5, 5), step=st.integers(1, 20))
def test_adam_zero_betas_is_sign_sgd(g, step):
    cfg = TrainConfig(lr=0.1, adam_betas=(0.0, 0.0))
    params = {"w": np.array([0.0])}
    moments = {"m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
    T.adam_step(params, {"w": np.array([g])}, moments, step, cfg)
    assert params["w"][0] == pytest.approx(-0.1 * g / (abs(g) + 1e-8), abs=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(T.NumericError):
        _adam({"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])})
    with pytest.raises(ValueError):
        T.adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, {"m": {}, "v": {}}, 0, TrainConfig())


def test_sample_batch_full_grid_and_determinism():
    g = wave(8)
    c, v = T.sample_batch(g, 64, np.random.default_rng(0), full_grid=True)
    assert len(np.unique(c, axis=0)) == 64
    a = T.sample_batch(g, 100, np.random.default_rng(5))
    b = T.sample_batch(g, 100, np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes()


def test_sample_batch_uniform_chi_square():
    rng = np.random.default_rng(123)
    idx = T._sample_indices(100, 1_000_000, rng)
    counts = np.bincount(idx, minlength=100)
    expected = 10_000
    assert np.all(np.abs(counts - expected) < 3 * np.sqrt(expected * 0.99) + 50)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sample_batch_empty_grid():
    with pytest.raises(ValueError):
        T._sample_indices(0, 4, np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)
    cfg = TrainConfig(seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.schedule_hash() == TrainConfig(seed=9).schedule_hash()
    assert cfg.schedule_hash() != TrainConfig(lr=1e-3).schedule_hash()


CFG = TrainConfig(lr=1e-3, iters=15, batch=64, eval_every=5, seed=2, eval_ssim=False)


@pytest.mark.parametrize("arch,cfg", [("siren", TINY),
                                      ("kplanes", KPlanesConfig(resolution=(6, 6), feature_dim=3, mlp_width=8))])
def test_single_signal_pretrain_equals_random_fit(arch, cfg):
    _, _, run_a = T.pretrain_joint([wave()], arch, cfg, CFG)
    run_b = T.fit_new(wave(), None, arch, cfg, CFG)
    assert run_a.loss_trace == run_b.loss_trace
    assert run_a.metric_trace == run_b.metric_trace
    for k, v in run_a.model.params.items():
        assert v.tobytes() == run_b.model.params[k].tobytes()


def test_identical_copies_train_symmetrically():
    cfg = TrainConfig(lr=1e-3, iters=20, batch=64, full_batch=True, eval_every=20, eval_ssim=False)
    _, decs, run = T.pretrain_joint([wave(), wave()], "siren", TINY, cfg)
    a, b = run.signal_losses
    assert abs(a - b) < 1e-6
    for k in decs[0]:
        np.testing.assert_array_equal(decs[0][k], decs[1][k])


def test_batch_streams_equal_across_inits():
    enc, _, _ = T.pretrain_joint([wave(shift=0.3)], "siren", TINY, CFG)
    seen = {}
    orig = T._sample_indices

    def spy(n, batch, rng, full=False):
        out = orig(n, batch, rng, full)
        seen.setdefault(key, []).append(out.copy())
        return out

    T._sample_indices = spy
    try:
        for key, e in (("random", None), ("pretrained", enc)):
            T.fit_new(wave(), e, "siren", TINY, CFG)
    finally:
        T._sample_indices = orig
    assert len(seen["random"]) == CFG.iters
    for a, b in zip(seen["random"], seen["pretrained"]):
        assert a.tobytes() == b.tobytes()


def test_fresh_decoder_matches_baseline_decoder():
    enc, decs, _ = T.pretrain_joint([wave(shift=0.3)], "siren", TINY, CFG)
    fresh = T.SharedTrainer([wave()], "siren", TINY, CFG, encoder_init=enc)
    base = T.SharedTrainer([wave()], "siren", TINY, CFG)
    for k, v in base.decoders[0].items():
        np.testing.assert_array_equal(fresh.decoders[0][k], v)
    for k, v in enc.items():
        np.testing.assert_array_equal(fresh.encoder[k], v)


@pytest.mark.xfail(strict=False, reason="a fresh random decoder on pretrained features is not better than chance "
                                        "at iteration 0; the advantage appears only once training starts")
def test_pretrained_initial_psnr_not_worse_on_related_signal():
    cfg = TrainConfig(lr=1e-3, iters=300, batch=256, eval_every=300, eval_ssim=False, seed=1)
    enc, _, _ = T.pretrain_joint([wave(32, 0.0), wave(32, 0.1)], "siren", TINY, cfg)
    zero = TrainConfig(lr=1e-3, iters=0, batch=256, eval_ssim=False, seed=7)
    target = wave(32, 0.05)
    r = T.fit_new(target, None, "siren", TINY, zero)
    p = T.fit_new(target, enc, "siren", TINY, zero)
    assert p.psnr_at(0) >= r.psnr_at(0)


def test_threshold_crossings_monotone():
    cfg = TrainConfig(lr=3e-3, iters=60, batch=128, eval_every=2, eval_ssim=False,
                      psnr_thresholds=(5.0, 10.0, 15.0, 20.0, 200.0))
    run = T.fit_new(wave(), None, "siren", TINY, cfg)
    hits = [run.crossings[("psnr", t)] for t in cfg.psnr_thresholds]
    reached = [h for h in hits if h is not None]
    assert reached == sorted(reached)
    assert hits[-1] is None
    # once a threshold is missed, every higher one is too
    first_none = hits.index(None)
    assert all(h is None for h in hits[first_none:])


def test_traces_follow_eval_cadence():
    run = T.fit_new(wave(), None, "siren", TINY, TrainConfig(iters=10, batch=16, eval_every=4, eval_ssim=False))
    assert [it for it, _, _ in run.metric_trace] == [0, 4, 8, 10]
    assert [it for it, _ in run.loss_trace] == list(range(1, 11))


def test_dimension_mismatch_rejected():
    other = GridSignal.from_array(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="dimensions"):
        T.pretrain_joint([wave(), other], "siren", TINY, CFG)


def test_non_finite_loss_aborts_with_iteration():
    cfg = TrainConfig(lr=1e30, iters=50, batch=64, eval_ssim=False)
    with pytest.raises(T.NumericError) as exc:
        T.fit_new(wave(), None, "siren", TINY, cfg)
    assert exc.value.iteration is not None and exc.value.iteration >= 1


def test_freeze_encoder_trains_decoder_only():
    enc, _, _ = T.pretrain_joint([wave(shift=0.3)], "siren", TINY, CFG)
    frozen = TrainConfig.from_dict({**CFG.to_dict(), "freeze_encoder": True})
    tr = T.SharedTrainer([wave()], "siren", TINY, frozen, encoder_init=enc)
    dec0 = {k: v.copy() for k, v in tr.decoders[0].items()}
    tr.train()
    for k, v in enc.items():
        np.testing.assert_array_equal(tr.encoder[k], v)
    assert any(not np.array_equal(tr.decoders[0][k], dec0[k]) for k in dec0)


def test_early_stop_respects_min_iters():
    cfg = TrainConfig(lr=1e-3, iters=40, batch=64, eval_ssim=False, early_stop_psnr=-100.0, min_iters=7)
    run = T.fit_new(wave(), None, "siren", TINY, cfg)
    assert run.iteration == 7


def test_gradient_error_zero_for_exact_linear_field():
    # a field the model reproduces exactly is not needed: check units by an analytic truth of the model itself
    tr = T.SharedTrainer([wave()], "siren", TINY, CFG)
    from transfield.fields import input_gradient

    g = input_gradient(tr.model(0), tr.data[0].coords)
    assert tr.gradient_error(g) == pytest.approx(0.0, abs=1e-12)
