from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import plane_mesh
from profiscan.env import (
    OBS_DIM,
    ActionBounds,
    ActionDelta,
    BadStartError,
    EnvState,
    EpisodeDefaults,
    EpisodeSpec,
    ScanEnv,
    apply_motion,
    clip_scalar,
    dynamic_action_limit,
    observe,
    reward_distance,
    reward_orientation,
    reward_spacing,
    reward_total,
    write_trace_csv,
)
from profiscan.raycast import build_accel
from profiscan.sensor import SensorPose, SensorSpec

SPEC = SensorSpec()
QUIET = replace(SPEC, noise_sigma_z=0.0, speckle_strength=0.0)
BOUNDS = ActionBounds()


def flat_episode(length=100.0, **kw):
    start = SensorPose.from_axes([0, 0, 400.0], [1, 0, 0])
    return EpisodeSpec(start, [1, 0, 0], [length, 0, 400.0], [1, 0, 0], **kw)


def state(D=400.0, alpha=0.0, ds=0.5, valid=True, pos=(0, 0, 400.0), theta=0.0):
    return EnvState(np.array(pos, dtype=float), theta, D, alpha, ds, valid, valid, valid)


@pytest.fixture
def flat_env(flat_accel):
    return ScanEnv(flat_accel, QUIET, flat_episode(), noise=False)


def test_clip_scalar_examples():
    assert clip_scalar(5, -1, 1) == 1
    assert clip_scalar(-2, -1, 1) == -1
    assert clip_scalar(0.3, -1, 1) == 0.3
    with pytest.raises(ValueError):
        clip_scalar(0, 1, -1)


def test_dynamic_limit_examples():
    out = dynamic_action_limit(state(D=450), ActionDelta(0, -0.8, 0), BOUNDS, 400)
    assert out.dz == 0
    out = dynamic_action_limit(state(alpha=-5), ActionDelta(0, 0, 0.6), BOUNDS, 400)
    assert out.dtheta == 0
    raw = ActionDelta(0.4, 0.3, -0.0)
    out = dynamic_action_limit(state(), raw, BOUNDS, 400)
    assert out == ActionDelta(0.4, 0.3, 0.0)
    # invalid measurements fall back to a symmetric clip
    out = dynamic_action_limit(state(D=np.nan, alpha=np.nan, valid=False), ActionDelta(-3, -3, 3), BOUNDS, 400)
    assert out == ActionDelta(-1, -1, 1)


@settings(max_examples=300, deadline=None)
@given(st.floats(200, 600), st.floats(-60, 60), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_dynamic_limit_is_corrective(D, alpha, dy, dz, dth):
    out = dynamic_action_limit(state(D=D, alpha=alpha), ActionDelta(dy, dz, dth), BOUNDS, 400)
    assert np.sign(out.dz) * np.sign(D - 400) >= 0
    assert np.sign(out.dtheta) * np.sign(alpha) >= 0
    assert abs(out.dy) <= 1 and abs(out.dz) <= 1 and abs(out.dtheta) <= 1


def test_reward_examples():
    assert reward_distance(400, SPEC) == 0
    assert reward_distance(525, SPEC) == -1
    assert reward_distance(275, SPEC) == -1
    assert reward_distance(462.5, SPEC) == -0.25
    assert reward_distance(900, SPEC) == -1
    assert reward_orientation(0, 30) == 0
    assert reward_orientation(30, 30) == -1
    assert reward_orientation(-30, 30) == -1
    assert reward_orientation(15, 30) == -0.25
    assert reward_spacing(0.5, 0.5) == 0
    assert reward_spacing(1.0, 0.5) == -1
    assert reward_spacing(0.0, 0.5) == -1
    assert reward_spacing(-0.2, 0.5) == -1


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-180, 180), st.floats(-100, 100), st.integers(0, 300 * 2 ** 20))
def test_reward_ranges_and_symmetry(D, alpha, ds, k):
    for r in (reward_distance(D, SPEC), reward_orientation(alpha, 30), reward_spacing(ds, 0.5)):
        assert -1 <= r <= 0
    # a dyadic offset keeps 400 +/- delta exact, so the inputs really are mirror images
    delta = k / 2 ** 20
    assert reward_distance(400 + delta, SPEC) == reward_distance(400 - delta, SPEC)
    ep = flat_episode()
    t = reward_total(state(D=D, alpha=alpha, ds=ds), SPEC, ep).total
    assert -1 - 1e-12 <= t <= 0


def test_reward_total_examples():
    ep = flat_episode()
    assert reward_total(state(), SPEC, ep).total == 0
    r = reward_total(state(D=525.0), SPEC, ep)
    assert (r.R_D, r.R_alpha, r.R_ds) == (-1, 0, 0)
    assert r.total == pytest.approx(-1 / 3, abs=1e-15)
    r = reward_total(state(D=np.nan, alpha=np.nan, ds=np.nan, valid=False), SPEC, ep)
    assert r.total == pytest.approx(-1.0, abs=1e-15)


def test_weights_validated():
    with pytest.raises(ValueError):
        flat_episode(weights=(0.5, 0.5, 0.5))


def test_argmax_invariant_under_weight_scaling(flat_accel):
    ep = flat_episode()
    cands = [ActionDelta(dy, dz, dth) for dy in (0.2, 0.5, 0.9) for dz in (-0.5, 0, 0.5) for dth in (-1, 0, 1)]
    comps = []
    for a in cands:
        env = ScanEnv(flat_accel, QUIET, ep, noise=False)
        env.reset()
        _, r, _, _ = env.step(a)
        comps.append([r.R_D, r.R_alpha, r.R_ds])
    comps = np.array(comps)
    w = np.array(ep.weights)
    rank = np.argsort(-(comps @ w), kind="stable")
    for k in (0.1, 3.0, 17.0):
        np.testing.assert_array_equal(np.argsort(-(comps @ (k * w)), kind="stable"), rank)


def test_reset_on_flat_plane(flat_env):
    s = flat_env.reset()
    assert s.D == pytest.approx(400.0, abs=1e-9)
    assert s.alpha == pytest.approx(0.0, abs=1e-9)
    assert s.valid
    np.testing.assert_array_equal(flat_env.observe()[4:7], [0, 0, 0])


def test_reset_over_void_is_bad_start(flat_accel):
    start = SensorPose.from_axes([0, 0, 1400.0], [1, 0, 0])
    ep = EpisodeSpec(start, [1, 0, 0], [100, 0, 1400.0], [1, 0, 0])
    with pytest.raises(BadStartError):
        ScanEnv(flat_accel, QUIET, ep).reset()


def test_reset_deterministic(flat_accel):
    a = ScanEnv(flat_accel, SPEC, flat_episode(), seed=4).reset()
    b = ScanEnv(flat_accel, SPEC, flat_episode(), seed=4).reset()
    assert (a.D, a.alpha, a.ds) == (b.D, b.alpha, b.ds)
    np.testing.assert_array_equal(a.position, b.position)


def test_optimal_step_gives_zero_reward(flat_env):
    flat_env.reset()
    s, r, done, info = flat_env.step(ActionDelta(0.5, 0.0, 0.0))
    assert s.ds == pytest.approx(0.5, abs=1e-9)
    assert r.total == pytest.approx(0.0, abs=1e-12)
    assert not done
    assert info["reason"] is None


def test_zero_action_twice_penalizes_spacing(flat_env):
    flat_env.reset()
    for _ in range(2):
        s, r, _, _ = flat_env.step(ActionDelta(0.0, 0.0, 0.0))
    assert s.ds == 0.0
    assert r.R_ds == -1


def test_normalized_action_array(flat_env):
    flat_env.reset()
    _, _, _, info = flat_env.step(np.array([0.5, 0.0, 0.0]))
    assert info["action"] == ActionDelta(0.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        flat_env.step(np.zeros(2))


def test_end_plane_terminates(flat_accel):
    env = ScanEnv(flat_accel, QUIET, flat_episode(length=5.0), noise=False)
    env.reset()
    n = 0
    done = False
    while not done:
        _, _, done, info = env.step(ActionDelta(1.0, 0, 0))
        n += 1
    assert info["reason"] == "end_plane"
    assert n == 5
    with pytest.raises(RuntimeError):
        env.step(ActionDelta(1.0, 0, 0))


def test_lost_surface_and_max_steps():
    acc = build_accel(plane_mesh(half=10.0))
    env = ScanEnv(acc, QUIET, flat_episode(length=1e4, lost_surface_patience=5), noise=False)
    env.reset()
    done = False
    while not done:
        s, r, done, info = env.step(ActionDelta(1.0, 0, 0))
    assert info["reason"] == "lost_surface"
    assert not s.valid and r.total == pytest.approx(-1.0)
    env = ScanEnv(acc, QUIET, flat_episode(length=1e4, max_steps=3), noise=False)
    env.reset()
    for _ in range(3):
        _, _, done, info = env.step(ActionDelta(0.1, 0, 0))
    assert done and info["reason"] == "max_steps"


def test_theta_mechanical_limit(flat_accel):
    env = ScanEnv(flat_accel, QUIET, flat_episode(theta_limit=2.5), noise=False)
    env.reset()
    for _ in range(5):
        env.step(ActionDelta(0.5, 0, -1.0))
    # alpha becomes positive once tilted, which blocks further negative pitch
    assert -2.5 <= env.theta <= 0


def test_pitch_pivots_about_tool_point():
    pose = SensorPose.from_axes([10, 20, 400.0], [1, 0, 0])
    tcp = pose.position + 400 * pose.l_hat
    new = apply_motion(pose, ActionDelta(0, 0, 7.0), 400.0)
    np.testing.assert_allclose(new.position + 400 * new.l_hat, tcp, atol=1e-12)
    t = np.deg2rad(7.0)
    np.testing.assert_allclose(new.l_hat, np.cos(t) * pose.l_hat - np.sin(t) * pose.y_hat, atol=1e-12)
    np.testing.assert_allclose(new.x_hat, pose.x_hat, atol=1e-12)


def test_positive_dz_approaches_surface(flat_env):
    flat_env.reset()
    s, _, _, _ = flat_env.step(ActionDelta(0.5, 0.8, 0))
    assert s.D == pytest.approx(400 - 0.8, abs=1e-9) or s.D > 400
    env_state = state(D=450)
    assert dynamic_action_limit(env_state, ActionDelta(0, 0.8, 0), BOUNDS, 400).dz == 0.8


def test_pitch_corrects_ramp_angle():
    n = np.array([np.sin(np.deg2rad(10)), 0, np.cos(np.deg2rad(10))])
    acc = build_accel(plane_mesh(point=(0, 0, 0), normal=n))
    env = ScanEnv(acc, QUIET, flat_episode(), noise=False)
    s = env.reset()
    assert s.alpha == pytest.approx(10.0, abs=1e-9)
    s, _, _, _ = env.step(ActionDelta(0, 0, 1.0))
    assert s.alpha == pytest.approx(9.0, abs=1e-9)


def test_observe_examples():
    ep = flat_episode()
    o = observe(state(), ep, SPEC)
    assert o.shape == (OBS_DIM,)
    np.testing.assert_array_equal(o[4:7], [0, 0, 0])
    assert o[7] == 1
    o = observe(state(D=525.0), ep, SPEC)
    assert o[4] == 1
    o = observe(state(D=np.nan, alpha=np.nan, ds=np.nan, valid=False), ep, SPEC)
    assert o[7] == 0
    np.testing.assert_array_equal(o[4:7], [-1, -1, -1])
    o = observe(state(D=1e6, pos=(1e6, 0, 0)), ep, SPEC)
    assert np.all(np.abs(o) <= 5)


def test_step_is_deterministic(flat_accel):
    runs = []
    for _ in range(2):
        env = ScanEnv(flat_accel, SPEC, flat_episode(), seed=9, record_trace=True)
        env.reset()
        for a in ([0.3, 0.2, 0.1], [0.6, -0.4, 0.9], [1.0, 1.0, -1.0]):
            env.step(np.array(a))
        runs.append(env.trace)
    assert runs[0] == runs[1]


def test_trace_csv(tmp_path, flat_accel):
    env = ScanEnv(flat_accel, QUIET, flat_episode(), record_trace=True, noise=False)
    env.reset()
    env.step(ActionDelta(0.5, 0, 0))
    p = write_trace_csv(env.trace, tmp_path / "t.csv", meta={"seed": 1})
    lines = p.read_text().splitlines()
    assert lines[0] == '# {"seed": 1}'
    assert lines[1].startswith("step,px")
    assert len(lines) == 3


def test_episode_defaults_build():
    d = EpisodeDefaults(ds_opt=0.25)
    ep = d.episode(SensorPose.from_axes([0, 0, 400.0], [1, 0, 0]), [1, 0, 0], [50, 0, 400])
    assert ep.ds_opt == 0.25
    assert ep.length == pytest.approx(50.0)
    np.testing.assert_array_equal(ep.end_normal, [1, 0, 0])
