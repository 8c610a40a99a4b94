"""Soft actor-critic on the learned reward.

Twin Q networks with Polyak-averaged targets, a squashed-Gaussian actor and
an automatically tuned entropy temperature.  All sampling noise flows through
one torch.Generator, so a seeded agent replays its exact update sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class QNetwork(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: int = 256,
                 dtype=torch.float32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(state_dim + action_dim, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, 1, dtype=dtype),
        )

    def forward(self, state: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([state, action], dim=-1)).squeeze(-1)


class GaussianActor(nn.Module):
    """Outputs a tanh-squashed Gaussian policy."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 256,
                 dtype=torch.float32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(state_dim, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(hidden, 2 * action_dim, dtype=dtype),
        )
        self.action_dim = action_dim

    def forward(self, state: torch.Tensor):
        mu, log_std = self.trunk(state).chunk(2, dim=-1)
        log_std = torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def sample(self, state: torch.Tensor, noise: torch.Tensor):
        """Reparameterized action and its log-probability.

        ``noise`` is standard normal of action shape; passing it explicitly
        keeps the loss a deterministic function of the parameters, which the
        finite-difference tests rely on.
        """
        mu, log_std = self(state)
        std = log_std.exp()
        pre_tanh = mu + std * noise
        action = torch.tanh(pre_tanh)
        log_prob = (-0.5 * noise.pow(2) - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        # tanh change of variables, in the softplus form that never overflows
        log_prob = log_prob - (2.0 * (math.log(2.0) - pre_tanh
                                      - F.softplus(-2.0 * pre_tanh))).sum(-1)
        return action, log_prob


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    returns: list
    successes: list


class SacAgent:
    def __init__(self, state_dim: int, action_dim: int, discount: float = 0.99,
                 tau: float = 0.005, lr: float = 3e-4, batch_size: int = 256,
                 hidden: int = 256, target_entropy: Optional[float] = None,
                 init_alpha: float = 0.1, learn_alpha: bool = True, seed: int = 0,
                 dtype=torch.float32, device: str = "cpu"):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.discount = discount
        self.tau = tau
        self.batch_size = batch_size
        self.learn_alpha = learn_alpha
        self.target_entropy = float(-action_dim if target_entropy is None
                                    else target_entropy)
        self.dtype = dtype
        self.device = device
        self.seed = seed

        torch.manual_seed(seed)
        self.actor = GaussianActor(state_dim, action_dim, hidden, dtype).to(device)
        self.q1 = QNetwork(state_dim, action_dim, hidden, dtype).to(device)
        self.q2 = QNetwork(state_dim, action_dim, hidden, dtype).to(device)
        self.q1_target = QNetwork(state_dim, action_dim, hidden, dtype).to(device)
        self.q2_target = QNetwork(state_dim, action_dim, hidden, dtype).to(device)
        self.q1_target.load_state_dict(self.q1.state_dict())
        self.q2_target.load_state_dict(self.q2.state_dict())
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)

        self.log_alpha = torch.tensor(math.log(init_alpha), dtype=dtype,
                                      device=device, requires_grad=learn_alpha)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=lr)
        self.critic_opt = torch.optim.Adam(
            list(self.q1.parameters()) + list(self.q2.parameters()), lr=lr)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=lr) if learn_alpha else None

        self._gen = torch.Generator(device=device)
        self._gen.manual_seed(seed)
        self.updates_done = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp().detach())

    # acting ------------------------------------------------------------------

    def _tensor(self, arr) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr, dtype=np.float64), dtype=self.dtype,
                               device=self.device)

    def select_action(self, state, deterministic: bool = False) -> np.ndarray:
        s = self._tensor(state).reshape(1, -1)
        with torch.no_grad():
            if deterministic:
                mu, _ = self.actor(s)
                a = torch.tanh(mu)
            else:
                noise = torch.randn(1, self.action_dim, generator=self._gen,
                                    dtype=self.dtype, device=self.device)
                a, _ = self.actor.sample(s, noise)
        return a[0].double().cpu().numpy()

    # losses --------------------------------------------------------------------

    def critic_target(self, batch: dict, next_noise: Optional[torch.Tensor] = None
                      ) -> np.ndarray:
        """Bootstrap targets r + gamma * (1 - done) * (min Q' - alpha log pi)."""
        with torch.no_grad():
            ns = self._tensor(batch["next_states"])
            if next_noise is None:
                next_noise = torch.randn(ns.shape[0], self.action_dim,
                                         generator=self._gen, dtype=self.dtype,
                                         device=self.device)
            na, logp = self.actor.sample(ns, next_noise)
            qmin = torch.min(self.q1_target(ns, na), self.q2_target(ns, na))
            soft_v = qmin - self.log_alpha.exp() * logp
            r = self._tensor(batch["rewards"])
            not_done = 1.0 - self._tensor(batch["dones"])
            y = r + self.discount * not_done * soft_v
        return y.double().cpu().numpy()

    def critic_loss(self, batch: dict, targets: np.ndarray) -> torch.Tensor:
        s = self._tensor(batch["states"])
        a = self._tensor(batch["actions"])
        y = self._tensor(targets)
        return F.mse_loss(self.q1(s, a), y) + F.mse_loss(self.q2(s, a), y)

    def _actor_terms(self, states, noise: torch.Tensor):
        s = self._tensor(states)
        a, logp = self.actor.sample(s, noise)
        qmin = torch.min(self.q1(s, a), self.q2(s, a))
        loss = (self.log_alpha.exp().detach() * logp - qmin).mean()
        return loss, logp

    def actor_loss(self, states: np.ndarray, noise: torch.Tensor) -> torch.Tensor:
        return self._actor_terms(states, noise)[0]

    # updates ---------------------------------------------------------------

    def soft_update(self) -> None:
        with torch.no_grad():
            for net, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
                for p, pt in zip(net.parameters(), target.parameters()):
                    pt.mul_(1.0 - self.tau)
                    pt.add_(p, alpha=self.tau)

    def update(self, replay, rng: np.random.Generator) -> dict:
        """One gradient step on critics, actor and temperature from a sampled batch."""
        if len(replay) < self.batch_size:
            raise ValueError("warmup incomplete")
        batch = replay.sample(self.batch_size, rng)

        targets = self.critic_target(batch)
        c_loss = self.critic_loss(batch, targets)
        self.critic_opt.zero_grad()
        c_loss.backward()
        self.critic_opt.step()

        noise = torch.randn(batch["states"].shape[0], self.action_dim,
                            generator=self._gen, dtype=self.dtype, device=self.device)
        a_loss, logp = self._actor_terms(batch["states"], noise)
        self.actor_opt.zero_grad()
        a_loss.backward()
        self.actor_opt.step()

        # temperature step reuses the actor forward's log-probs
        logp = logp.detach()
        alpha_loss = torch.tensor(0.0)
        if self.learn_alpha:
            alpha_loss = -(self.log_alpha * (logp + self.target_entropy).detach()).mean()
            self.alpha_opt.zero_grad()
            alpha_loss.backward()
            self.alpha_opt.step()

        self.soft_update()
        self.updates_done += 1
        return {
            "critic_loss": float(c_loss.detach()),
            "actor_loss": float(a_loss.detach()),
            "alpha_loss": float(alpha_loss.detach()),
            "alpha": self.alpha,
            "entropy": float(-logp.mean()),
        }

    # persistence -------------------------------------------------------------

    def save(self, path) -> None:
        torch.save({
            "meta": {
                "state_dim": self.state_dim, "action_dim": self.action_dim,
                "discount": self.discount, "tau": self.tau,
                "batch_size": self.batch_size, "seed": self.seed,
                "target_entropy": self.target_entropy,
                "learn_alpha": self.learn_alpha,
            },
            "actor": self.actor.state_dict(),
            "q1": self.q1.state_dict(),
            "q2": self.q2.state_dict(),
            "q1_target": self.q1_target.state_dict(),
            "q2_target": self.q2_target.state_dict(),
            "log_alpha": self.log_alpha.detach().cpu(),
            "updates_done": self.updates_done,
        }, path)

    @classmethod
    def load(cls, path, device: str = "cpu", dtype=torch.float32) -> "SacAgent":
        blob = torch.load(path, map_location=device, weights_only=False)
        meta = blob["meta"]
        agent = cls(state_dim=meta["state_dim"], action_dim=meta["action_dim"],
                    discount=meta["discount"], tau=meta["tau"],
                    batch_size=meta["batch_size"], seed=meta["seed"],
                    target_entropy=meta["target_entropy"],
                    learn_alpha=meta["learn_alpha"], dtype=dtype, device=device)
        agent.actor.load_state_dict(blob["actor"])
        agent.q1.load_state_dict(blob["q1"])
        agent.q2.load_state_dict(blob["q2"])
        agent.q1_target.load_state_dict(blob["q1_target"])
        agent.q2_target.load_state_dict(blob["q2_target"])
        with torch.no_grad():
            agent.log_alpha.copy_(blob["log_alpha"])
        agent.updates_done = blob.get("updates_done", 0)
        return agent


def evaluate(agent, env, episodes: int = 10, seed: int = 0) -> EvalResult:
    """Deterministic-policy rollouts scored by the ground-truth reward.

    ``agent`` only needs select_action(state, deterministic=True); an episode
    counts as a success if any step raises the environment's success flag.
    """
    rng = np.random.default_rng(seed)
    returns, successes = [], []
    for _ in range(episodes):
        state = env.reset(rng)
        total = 0.0
        succeeded = False
        done = False
        while not done:
            action = agent.select_action(state, deterministic=True)
            result = env.step(action)
            total += result.gt_reward
            succeeded = succeeded or result.success
            state = result.next_state
            done = result.done
        returns.append(total)
        successes.append(succeeded)
    return EvalResult(
        mean_return=float(np.mean(returns)),
        success_rate=float(np.mean(successes)),
        returns=returns,
        successes=successes,
    )
