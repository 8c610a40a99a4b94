"""Environment dynamics, rendering and scripted controllers.

The cartpole one-step expectations below were computed by hand from the
classic constants (masses 1.0 and 0.1, half-length 0.5, gravity 9.8, force
scale 10, dt 0.02) with the velocity-first Euler update, so they pin the
integrator independently of the implementation.
"""

import numpy as np
import pytest

from vlmpref.envs import (
    BallPush2D,
    CartPoleContinuous,
    ScriptedPolicy,
    ballpush_expert_action,
    cartpole_expert_action,
    env_names,
    make_env,
    register_env,
    render_cartpole,
    scripted_expert,
)


def rollout(env, policy, seed):
    rng = np.random.default_rng(seed)
    s = env.reset(rng)
    states, progress, total = [s], [env.progress(s)], 0.0
    succ = False
    done = False
    while not done:
        res = env.step(policy(s))
        s = res.next_state
        states.append(s)
        progress.append(res.progress)
        total += res.gt_reward
        succ = succ or res.success
        done = res.done
    return states, np.array(progress), total, succ


# ---------------------------------------------------------------------------
# cartpole dynamics
# ---------------------------------------------------------------------------


def test_cartpole_step_from_rest_full_push():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    env._state = np.zeros(4)
    res = env.step(np.array([1.0]))
    expected = np.array([
        0.0039024390243902443,
        0.1951219512195122,
        -0.005853658536585366,
        -0.2926829268292683,
    ])
    np.testing.assert_allclose(res.next_state, expected, rtol=0, atol=1e-15)


def test_cartpole_step_generic_state():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    env._state = np.array([0.01, -0.02, 0.03, 0.04])
    res = env.step(np.array([-0.5]))
    expected = np.array([
        0.007640310722195936,
        -0.11798446389020323,
        0.03391458476684055,
        0.19572923834202735,
    ])
    np.testing.assert_allclose(res.next_state, expected, rtol=0, atol=1e-15)


def test_cartpole_reward_is_one_per_alive_step():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(3))
    res = env.step(np.array([0.0]))
    assert res.gt_reward == 1.0


def test_cartpole_fails_on_angle_threshold():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    env._state = np.array([0.0, 0.0, 0.209, 3.0])
    res = env.step(np.array([0.0]))
    assert res.done
    assert not res.success


def test_cartpole_fails_on_cart_position():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    env._state = np.array([2.39, 3.0, 0.0, 0.0])
    res = env.step(np.array([1.0]))
    assert res.done
    assert not res.success


def test_cartpole_success_only_at_horizon_alive():
    env = make_env("cartpole")
    _, _, total, succ = rollout(env, cartpole_expert_action, seed=5)
    assert total == 200.0
    assert succ

    env2 = make_env("cartpole")
    _, _, _, succ2 = rollout(env2, lambda s: np.array([1.0]), seed=5)
    assert not succ2


def test_cartpole_progress_formula():
    env = CartPoleContinuous()
    state = np.array([1.2, 0.0, 0.104745, 0.0])
    expected = 1.0 - (abs(state[2]) / 0.2095 + abs(state[0]) / 2.4) / 2.0
    assert env.progress(state) == pytest.approx(expected, abs=1e-15)
    assert env.progress(np.array([2.4, 0.0, 0.2095, 0.0])) == 0.0
    assert env.progress(np.array([5.0, 0.0, 1.0, 0.0])) == 0.0
    assert env.progress(np.zeros(4)) == 1.0


def test_step_requires_reset_first():
    env = CartPoleContinuous()
    with pytest.raises(ValueError):
        env.step(np.array([0.0]))


def test_step_after_done_raises():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    env._state = np.array([0.0, 0.0, 0.25, 0.0])
    res = env.step(np.array([0.0]))
    assert res.done
    with pytest.raises(ValueError, match="episode finished"):
        env.step(np.array([0.0]))


def test_action_validation():
    env = CartPoleContinuous()
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(np.array([2.0]))
    with pytest.raises(ValueError):
        env.step(np.array([0.0, 0.0]))


def test_horizon_truncates_episode():
    env = BallPush2D()
    env.reset(np.random.default_rng(0))
    done = False
    steps = 0
    while not done:
        res = env.step(np.zeros(2))
        done = res.done
        steps += 1
    assert steps == env.horizon == 100


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_shape_and_dtype():
    env = CartPoleContinuous(render_resolution=(96, 64))
    env.reset(np.random.default_rng(0))
    img = env.render()
    assert img.shape == (64, 96, 3)
    assert img.dtype == np.uint8


def test_render_is_pure_function_of_state():
    state = np.array([0.3, 0.0, 0.05, 0.0])
    a = render_cartpole(state, (128, 128))
    b = render_cartpole(state, (128, 128))
    assert np.array_equal(a, b)


def test_render_upright_pole_is_left_right_symmetric():
    # odd width puts the cart centerline on an exact pixel column
    img = render_cartpole(np.zeros(4), (129, 96))
    assert np.array_equal(img, img[:, ::-1])


def test_render_tilted_pole_breaks_symmetry():
    img = render_cartpole(np.array([0.0, 0.0, 0.15, 0.0]), (128, 128))
    assert not np.array_equal(img, img[:, ::-1])


def test_ballpush_render_marks_all_three_entities():
    env = BallPush2D(render_resolution=(128, 128))
    s = env.reset(np.random.default_rng(1))
    img = env.render()
    # white field plus at least three distinct non-white colors
    colors = {tuple(c) for c in img.reshape(-1, 3)}
    assert (255, 255, 255) in colors
    assert len(colors) >= 4
    assert env.render_state(s, (128, 128)).shape == (128, 128, 3)


# ---------------------------------------------------------------------------
# ballpush mechanics
# ---------------------------------------------------------------------------


def set_ballpush_state(env, robot, ball, goal):
    env.reset(np.random.default_rng(0))
    env._state = np.array([*robot, *ball, *goal], dtype=np.float64)


def test_ballpush_contact_pushes_along_center_line():
    env = BallPush2D()
    set_ballpush_state(env, robot=(0.40, 0.5), ball=(0.48, 0.5), goal=(0.9, 0.5))
    res = env.step(np.array([1.0, 0.0]))
    robot_after = res.next_state[0:2]
    ball_after = res.next_state[2:4]
    dist = np.linalg.norm(ball_after - robot_after)
    assert dist == pytest.approx(env.CONTACT_RADIUS, abs=1e-12)
    assert ball_after[1] == 0.5
    assert ball_after[0] > 0.48


def test_ballpush_no_contact_ball_stays():
    env = BallPush2D()
    set_ballpush_state(env, robot=(0.1, 0.1), ball=(0.8, 0.8), goal=(0.9, 0.9))
    res = env.step(np.array([1.0, 0.0]))
    assert np.array_equal(res.next_state[2:4], [0.8, 0.8])


def test_ballpush_positions_clipped_to_unit_square():
    env = BallPush2D()
    set_ballpush_state(env, robot=(0.99, 0.5), ball=(0.5, 0.5), goal=(0.9, 0.9))
    res = env.step(np.array([1.0, 0.0]))
    assert res.next_state[0] == 1.0


def test_ballpush_progress_and_reward_are_negative_distance():
    env = BallPush2D()
    set_ballpush_state(env, robot=(0.1, 0.1), ball=(0.5, 0.5), goal=(0.8, 0.9))
    res = env.step(np.zeros(2))
    expected = -float(np.linalg.norm(np.array([0.5, 0.5]) - np.array([0.8, 0.9])))
    assert res.gt_reward == pytest.approx(expected, abs=1e-15)
    assert res.progress == pytest.approx(expected, abs=1e-15)


def test_ballpush_success_inside_radius():
    env = BallPush2D()
    set_ballpush_state(env, robot=(0.1, 0.1), ball=(0.88, 0.88), goal=(0.9, 0.9))
    res = env.step(np.zeros(2))
    assert res.success


def test_ballpush_reset_separates_entities():
    env = BallPush2D()
    for seed in range(30):
        s = env.reset(np.random.default_rng(seed))
        r, b, g = s[0:2], s[2:4], s[4:6]
        assert np.linalg.norm(r - b) >= 2 * env.CONTACT_RADIUS
        assert np.linalg.norm(b - g) >= 2 * env.CONTACT_RADIUS


# ---------------------------------------------------------------------------
# scripted controllers
# ---------------------------------------------------------------------------


def test_cartpole_expert_balances_to_horizon():
    for seed in (0, 1, 2, 11):
        env = make_env("cartpole")
        _, _, total, succ = rollout(env, cartpole_expert_action, seed)
        assert total == 200.0
        assert succ


def test_ballpush_expert_progress_is_monotone():
    for seed in (1, 2, 3, 4, 5):
        env = make_env("ballpush2d")
        _, progress, _, succ = rollout(env, ballpush_expert_action, seed)
        assert np.all(np.diff(progress) >= -1e-9)
        assert succ


def test_expert_actions_respect_bounds():
    env = make_env("ballpush2d")
    rng = np.random.default_rng(9)
    s = env.reset(rng)
    for _ in range(60):
        a = ballpush_expert_action(s)
        assert np.all(np.abs(a) <= 1.0 + 1e-12)
        s = env.step(a).next_state


def test_scripted_policy_wraps_controller():
    policy = scripted_expert("cartpole")
    assert isinstance(policy, ScriptedPolicy)
    a = policy.select_action(np.zeros(4), deterministic=True)
    assert a.shape == (1,)


def test_registry_and_custom_registration():
    assert set(env_names()) >= {"cartpole", "ballpush2d"}
    register_env("cartpole-small", lambda **kw: CartPoleContinuous(**kw))
    env = make_env("cartpole-small", render_resolution=(32, 32))
    assert env.render_resolution == (32, 32)
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("nope")
