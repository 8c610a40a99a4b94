"""Desk-scale control environments with pure-numpy renderers.

Both tasks expose continuous actions in [-1, 1]^d, a ground-truth reward for
evaluation only, and a scalar progress measure used by synthetic labelers.
Rendering is a pure function of state so stored frames are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class StepResult:
    next_state: np.ndarray
    gt_reward: float
    done: bool
    success: bool
    progress: float


class Environment:
    """Minimal episodic control interface.

    Subclasses set state_dim, action_dim, horizon and goal_description and
    implement _reset, _step, progress and render_state.
    """

    state_dim: int
    action_dim: int
    horizon: int
    goal_description: str

    def __init__(self, render_resolution: tuple = (128, 128)):
        self.render_resolution = tuple(render_resolution)
        self._state: Optional[np.ndarray] = None
        self._steps = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = self._reset(rng)
        self._steps = 0
        self._done = False
        return self._state.copy()

    def step(self, action) -> StepResult:
        if self._done or self._state is None:
            raise ValueError("episode finished")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.action_dim,) or np.any(np.abs(action) > 1.0 + 1e-9):
            raise ValueError("action out of bounds")
        result = self._step(self._state, action)
        self._steps += 1
        if self._steps >= self.horizon:
            result.done = True
        self._state = result.next_state.copy()
        self._done = result.done
        return result

    def render(self, state=None) -> np.ndarray:
        if state is None:
            state = self._state
        if state is None:
            raise ValueError("episode finished")
        return self.render_state(np.asarray(state, dtype=np.float64), self.render_resolution)

    # hooks -----------------------------------------------------------------

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _step(self, state: np.ndarray, action: np.ndarray) -> StepResult:
        raise NotImplementedError

    def progress(self, state) -> float:
        raise NotImplementedError

    def render_state(self, state: np.ndarray, resolution: tuple) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# cart-pole with continuous force
# ---------------------------------------------------------------------------


class CartPoleContinuous(Environment):
    """Classic cart-pole, force scaled by a continuous action in [-1, 1].

    Dynamics integrate with semi-implicit Euler: velocities update first,
    positions advance with the new velocities.  The episode ends when the
    cart leaves +-x_max, the pole leaves +-theta_max, or the horizon hits.
    """

    state_dim = 4   # x, x_dot, theta, theta_dot
    action_dim = 1
    horizon = 200
    goal_description = "balance the brown pole on the black cart to be upright"

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE_MAG = 10.0
    TAU = 0.02
    X_MAX = 2.4
    THETA_MAX = 0.2095

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=4)

    def _step(self, state: np.ndarray, action: np.ndarray) -> StepResult:
        x, x_dot, theta, theta_dot = state
        force = float(action[0]) * self.FORCE_MAG
        total_mass = self.MASS_CART + self.MASS_POLE
        polemass_length = self.MASS_POLE * self.HALF_LENGTH

        cos_t = math.cos(theta)
        sin_t = math.sin(theta)
        temp = (force + polemass_length * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t ** 2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass

        x_dot = x_dot + self.TAU * x_acc
        x = x + self.TAU * x_dot
        theta_dot = theta_dot + self.TAU * theta_acc
        theta = theta + self.TAU * theta_dot

        next_state = np.array([x, x_dot, theta, theta_dot])
        failed = abs(x) > self.X_MAX or abs(theta) > self.THETA_MAX
        # success means balancing through the whole horizon, not merely
        # surviving this step
        at_horizon = self._steps + 1 >= self.horizon
        return StepResult(
            next_state=next_state,
            gt_reward=1.0,
            done=failed,
            success=at_horizon and not failed,
            progress=self.progress(next_state),
        )

    def progress(self, state) -> float:
        x, _, theta, _ = np.asarray(state, dtype=np.float64)
        p = 1.0 - 0.5 * (abs(theta) / self.THETA_MAX + abs(x) / self.X_MAX)
        return float(min(max(p, 0.0), 1.0))

    def render_state(self, state: np.ndarray, resolution: tuple) -> np.ndarray:
        return render_cartpole(state, resolution)


def render_cartpole(state: np.ndarray, resolution: tuple) -> np.ndarray:
    """Rasterize a black cart and brown pole on a white background.

    The pole is drawn as a constant-width column of samples along its axis,
    so at theta=0 it is exactly symmetric about the cart centerline.
    """
    w, h = resolution
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    x, _, theta, _ = state

    ground_y = int(round(h * 0.78))
    img[ground_y, :, :] = (90, 90, 90)

    # world x in [-2.6, 2.6] maps across the full width
    cx = int(round((x + 2.6) / 5.2 * (w - 1)))
    cart_hw = max(2, w // 16)          # half width
    cart_hh = max(1, h // 24)
    top = ground_y - 2 * cart_hh
    y0, y1 = max(0, top), min(h, ground_y)
    x0, x1 = max(0, cx - cart_hw), min(w, cx + cart_hw + 1)
    img[y0:y1, x0:x1, :] = (0, 0, 0)

    pole_len = h // 3
    pole_hw = max(1, w // 64)
    n = pole_len * 4
    for k in range(n + 1):
        t = k / n * pole_len
        px = int(round(cx + math.sin(theta) * t))
        py = int(round(top - math.cos(theta) * t))
        if 0 <= py < h:
            a0, a1 = max(0, px - pole_hw), min(w, px + pole_hw + 1)
            img[py, a0:a1, :] = (139, 69, 19)
    return img


# ---------------------------------------------------------------------------
# planar ball-pushing
# ---------------------------------------------------------------------------


class BallPush2D(Environment):
    """Push a ball to a goal marker on the unit square.

    State is (robot_xy, ball_xy, goal_xy).  The robot moves up to ``SPEED``
    per step; when it overlaps the ball's contact disc the ball is pushed
    outward along the robot-to-ball line by the overlap amount.  Reward is
    the negative ball-goal distance; success fires inside ``SUCCESS_RADIUS``.
    """

    state_dim = 6
    action_dim = 2
    horizon = 100
    goal_description = "move the ball to the goal marker"

    SPEED = 0.05
    CONTACT_RADIUS = 0.06
    SUCCESS_RADIUS = 0.05

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        # rejection sample until robot, ball and goal are pairwise separated
        while True:
            pts = rng.uniform(0.0, 1.0, size=(3, 2))
            d01 = np.linalg.norm(pts[0] - pts[1])
            d02 = np.linalg.norm(pts[0] - pts[2])
            d12 = np.linalg.norm(pts[1] - pts[2])
            if min(d01, d02, d12) >= 2 * self.CONTACT_RADIUS:
                return pts.reshape(6)

    def _step(self, state: np.ndarray, action: np.ndarray) -> StepResult:
        robot = state[0:2].copy()
        ball = state[2:4].copy()
        goal = state[4:6].copy()

        robot = np.clip(robot + self.SPEED * action, 0.0, 1.0)
        delta = ball - robot
        dist = float(np.linalg.norm(delta))
        if dist < self.CONTACT_RADIUS:
            overlap = self.CONTACT_RADIUS - dist
            direction = delta / max(dist, 1e-9)
            ball = np.clip(ball + overlap * direction, 0.0, 1.0)

        next_state = np.concatenate([robot, ball, goal])
        goal_dist = float(np.linalg.norm(ball - goal))
        return StepResult(
            next_state=next_state,
            gt_reward=-goal_dist,
            done=False,
            success=goal_dist < self.SUCCESS_RADIUS,
            progress=self.progress(next_state),
        )

    def progress(self, state) -> float:
        s = np.asarray(state, dtype=np.float64)
        return float(-np.linalg.norm(s[2:4] - s[4:6]))

    def render_state(self, state: np.ndarray, resolution: tuple) -> np.ndarray:
        return render_ballpush(state, resolution)


def _fill_disc(img: np.ndarray, center_px: tuple, radius: int, color: tuple) -> None:
    h, w = img.shape[:2]
    cx, cy = center_px
    yy, xx = np.ogrid[:h, :w]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    img[mask] = color


def unit_to_pixel(pos, resolution: tuple) -> tuple:
    """Map a point in the unit square to integer pixel coordinates."""
    w, h = resolution
    margin = 2
    px = int(round(margin + pos[0] * (w - 1 - 2 * margin)))
    py = int(round(margin + pos[1] * (h - 1 - 2 * margin)))
    return px, py


def render_ballpush(state: np.ndarray, resolution: tuple) -> np.ndarray:
    """Green goal pad, dark ball, blue robot on a white field."""
    w, h = resolution
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    robot, ball, goal = state[0:2], state[2:4], state[4:6]
    scale = min(w, h)

    _fill_disc(img, unit_to_pixel(goal, resolution), max(3, round(0.05 * scale)), (120, 200, 120))
    _fill_disc(img, unit_to_pixel(ball, resolution), max(2, round(0.03 * scale)), (40, 40, 40))
    _fill_disc(img, unit_to_pixel(robot, resolution), max(2, round(0.04 * scale)), (50, 90, 200))
    return img


# ---------------------------------------------------------------------------
# scripted expert controllers (for alignment rollouts and tests)
# ---------------------------------------------------------------------------


def cartpole_expert_action(state) -> np.ndarray:
    """Linear stabilizing feedback; keeps the pole up from small deviations."""
    x, x_dot, theta, theta_dot = np.asarray(state, dtype=np.float64)
    u = 1.0 * x + 1.8 * x_dot + 14.0 * theta + 2.6 * theta_dot
    return np.clip(np.array([u]), -1.0, 1.0)


def ballpush_expert_action(state) -> np.ndarray:
    """Walk behind the ball, then push it straight at the goal.

    The ball only moves on contact, so the controller stages itself on the
    goal-opposite side first, detouring around the contact disc rather than
    through it, and while pushing it steps exactly along the robot-ball line
    so the contact geometry stays collinear.  Progress along the rollout is
    monotone non-decreasing and the robot parks once the ball sits on the
    goal, instead of nudging it past.
    """
    s = np.asarray(state, dtype=np.float64)
    robot, ball, goal = s[0:2], s[2:4], s[4:6]
    speed = BallPush2D.SPEED
    contact = BallPush2D.CONTACT_RADIUS

    to_goal = goal - ball
    goal_dist = float(np.linalg.norm(to_goal))
    to_ball = ball - robot
    gap = float(np.linalg.norm(to_ball))
    u = to_ball / max(gap, 1e-9)

    def landed_dist(step: np.ndarray) -> float:
        # distance to the ball from where the arena actually lets us land
        return float(np.linalg.norm(np.clip(robot + step, 0.0, 1.0) - ball))

    if goal_dist < 0.032:
        if gap >= contact:
            return np.zeros(2)
        # parked but still overlapping (ball pinned on a wall); back out so
        # the contact resolution stops nudging the ball around
        best, best_dist = np.zeros(2), gap
        tangent = np.array([-u[1], u[0]])
        for direction in (-u, -u + tangent, -u - tangent):
            cand = direction * (speed / float(np.linalg.norm(direction)))
            cand_dist = landed_dist(cand)
            if cand_dist > best_dist:
                best, best_dist = cand, cand_dist
        return np.clip(best / speed, -1.0, 1.0)

    d = to_goal / goal_dist
    staging_raw = ball - d * (contact + 0.02)
    staging = np.clip(staging_raw, 0.0, 1.0)
    wall_pinned = bool(np.any(staging != staging_raw))

    def push_ok_from(pos: np.ndarray) -> bool:
        # A perfectly lined-up push is always safe.  When the ball hugs a
        # wall the lined-up spot may sit outside the arena, so settle for
        # any push whose goal component outweighs the largest single-step
        # ball displacement (0.056); wall clipping only removes into-wall
        # motion, which never points at the goal, so the bound still holds.
        tb = ball - pos
        g = float(np.linalg.norm(tb))
        if g < 1e-9:
            return False
        c = float(np.dot(tb / g, d))
        if c > 0.98:
            return True
        return wall_pinned and c > 0.2 and 2.0 * goal_dist * c > 0.07

    if gap < contact + 0.03 and push_ok_from(robot):
        # aim at the ball center but never step past it
        step_len = min(speed, max(gap - 0.004, 0.0))
        return u * (step_len / speed)

    to_staging = staging - robot
    staging_dist = float(np.linalg.norm(to_staging))
    if staging_dist < 1e-9:
        return np.zeros(2)

    def step_acceptable(step: np.ndarray) -> bool:
        # fine to graze the ball only if the landing spot can push from it
        landed = np.clip(robot + step, 0.0, 1.0)
        if float(np.linalg.norm(landed - ball)) >= contact + 0.005:
            return True
        return push_ok_from(landed)

    v = to_staging if staging_dist <= speed else to_staging * (speed / staging_dist)
    if not step_acceptable(v):
        # the straight approach would graze the ball; slide around it,
        # trying both orbit directions before giving up for this step
        outward = -u
        tangent = np.array([-outward[1], outward[0]])
        if float(np.dot(tangent, to_staging)) < 0:
            tangent = -tangent
        for direction in (tangent + 0.4 * outward, -tangent + 0.4 * outward, outward):
            cand = direction * (speed / float(np.linalg.norm(direction)))
            if step_acceptable(cand):
                v = cand
                break
        else:
            return np.zeros(2)
    return np.clip(v / speed, -1.0, 1.0)


class ScriptedPolicy:
    """Wraps an expert controller in the agent acting interface."""

    def __init__(self, action_fn):
        self.action_fn = action_fn

    def select_action(self, state, deterministic: bool = True) -> np.ndarray:
        return np.asarray(self.action_fn(state), dtype=np.float64)


_EXPERTS = {
    "cartpole": cartpole_expert_action,
    "ballpush2d": ballpush_expert_action,
}


def scripted_expert(env_name: str) -> ScriptedPolicy:
    if env_name not in _EXPERTS:
        raise ValueError(f"no scripted expert for environment: {env_name}")
    return ScriptedPolicy(_EXPERTS[env_name])


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


_REGISTRY: dict[str, Callable[..., Environment]] = {
    "cartpole": CartPoleContinuous,
    "ballpush2d": BallPush2D,
}


def register_env(name: str, factory: Callable[..., Environment]) -> None:
    """Plug in an additional environment under ``name``."""
    _REGISTRY[name] = factory


def make_env(name: str, render_resolution: tuple = (128, 128)) -> Environment:
    if name not in _REGISTRY:
        raise ValueError(f"unknown environment: {name}")
    return _REGISTRY[name](render_resolution=render_resolution)


def env_names() -> list[str]:
    return sorted(_REGISTRY)
