"""End-to-end training loop: collect, query for labels, fit reward, relabel.

The loop interleaves SAC updates with scheduled feedback sessions.  Every K
environment steps it samples M comparison queries from the recent-observation
buffer, asks the label provider, retrains the reward ensemble on all decided
labels gathered so far, and rewrites every replay reward with the fresh
ensemble mean.  Providers that emit scalar scores regress instead of ranking;
ground-truth reward sources skip reward learning entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import feedback as fb
from .core import (FeedbackSchedule, ImageBuffer, PreferenceBuffer, PreferenceLog,
                   PreferenceRecord, ReplayBuffer, RunConfig, Segment, Transition,
                   sample_pair)
from .envs import make_env
from .rewards import RewardEnsemble, train_on_preferences, train_on_scores
from .sac import SacAgent, evaluate
from .vlm import CredentialRejected, ProviderUnavailable


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class SessionReport:
    step: int
    queries: int
    label_counts: dict
    trained: bool = False
    train_epochs: int = 0
    train_loss: float = float("nan")
    train_accuracy: float = float("nan")
    relabeled: int = 0
    audit_ok: Optional[bool] = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["label_counts"] = {str(k): v for k, v in self.label_counts.items()}
        return d


METRICS_HEADER = ("step,episodes,mean_eval_return,success_rate,critic_loss,"
                  "actor_loss,alpha,queries_issued,trainable_records,relabeled\n")


class TrainingRun:
    """Owns every moving part of one seeded run and its artifact directory."""

    def __init__(self, config: RunConfig, provider=None, backend=None,
                 embedder=None, force: bool = False, audit_relabel: bool = False,
                 max_attempts: int = 5, base_delay: float = 1.0):
        self.config = config
        self.audit_relabel = audit_relabel

        self.run_dir = Path(config.run_dir)
        if self.run_dir.exists() and any(self.run_dir.iterdir()) and not force:
            raise FileExistsError(f"run directory not empty: {self.run_dir} (use force)")
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.env = make_env(config.env_name, config.render_resolution)
        self.eval_env = make_env(config.env_name, config.render_resolution)
        self.goal = config.goal_description or self.env.goal_description

        # independent random streams, all derived from the one run seed
        ss = np.random.SeedSequence(config.seed)
        (self._rng_env, self._rng_warmup, self._rng_batches,
         self._rng_pairs, self._rng_shuffle, self._rng_provider) = (
            np.random.default_rng(child) for child in ss.spawn(6))

        self.client = None
        if provider is not None:
            self.provider = provider
        else:
            if backend is not None:
                from .vlm import VlmChatClient

                self.client = VlmChatClient(backend, run_dir=self.run_dir,
                                            max_attempts=max_attempts,
                                            base_delay=base_delay)
            self.provider = fb.build_provider(
                config.provider_name, goal_description=self.goal,
                seed=int(self._rng_provider.integers(2 ** 31)),
                client=self.client, run_dir=self.run_dir,
                tie_epsilon=config.tie_epsilon, embedder=embedder)

        self.mode = self._provider_mode(self.provider)
        self.store_images = config.store_images or getattr(self.provider,
                                                           "needs_images", False)
        if config.reward_input_mode == "image":
            self.store_images = True

        self.agent = SacAgent(
            state_dim=self.env.state_dim, action_dim=self.env.action_dim,
            discount=config.discount, tau=config.tau, lr=config.sac_lr,
            batch_size=config.sac_batch_size, seed=config.seed)
        self.replay = ReplayBuffer(config.replay_capacity, self.env.state_dim,
                                   self.env.action_dim)
        self.image_buffer = ImageBuffer(
            capacity=config.image_buffer_capacity,
            require_images=self.store_images,
            resolution=config.render_resolution)
        self.preferences = PreferenceBuffer()
        self.pref_log = PreferenceLog(self.run_dir)

        self.ensemble: Optional[RewardEnsemble] = None
        if self.mode in ("preference", "score"):
            w, h = config.render_resolution
            self.ensemble = RewardEnsemble(
                input_mode=config.reward_input_mode,
                state_dim=self.env.state_dim,
                image_shape=(h, w) if config.reward_input_mode == "image" else None,
                n_members=config.reward_members, lr=config.reward_lr,
                seed=config.seed)

        self.env_steps = 0
        self.queries_issued = 0
        self.episode_index = -1
        self._episode_steps = 0
        self._state: Optional[np.ndarray] = None
        self._state_image: Optional[np.ndarray] = None
        self._needs_reset = True
        self._score_data: list = []        # (Segment, float) pairs for score mode
        self.session_reports: list[SessionReport] = []
        self.eval_rows: list[dict] = []
        self._last_losses = {"critic_loss": float("nan"), "actor_loss": float("nan"),
                             "alpha": self.agent.alpha}
        self._last_relabeled = 0

    @staticmethod
    def _provider_mode(provider) -> str:
        if isinstance(provider, fb.DirectRewardSource):
            return "direct"
        if isinstance(provider, fb.ScoreProvider):
            return "score"
        return "preference"

    # ------------------------------------------------------------------
    # reward plumbing
    # ------------------------------------------------------------------

    def _predict_states(self, states: np.ndarray) -> np.ndarray:
        """Ensemble-mean rewards for raw states, rendering first in image mode."""
        if self.config.reward_input_mode == "state":
            return self.ensemble.predict(states)
        frames = np.stack([self.eval_env.render_state(s, self.config.render_resolution)
                           for s in states])
        return self.ensemble.predict(frames)

    def _current_reward(self, result) -> float:
        if self.mode == "direct":
            image = None
            if getattr(self.provider, "needs_images", False):
                image = self.env.render(result.next_state)
            return self.provider.reward(result, image=image)
        if self.config.reward_input_mode == "state":
            return float(self._predict_states(self._state[None])[0])
        return float(self.ensemble.predict(self._state_image[None])[0])

    # ------------------------------------------------------------------
    # collection
    # ------------------------------------------------------------------

    def collect_step(self) -> Transition:
        """One Algorithm-1 inner step: act, store, learn."""
        cfg = self.config
        if self._needs_reset:
            self._state = self.env.reset(self._rng_env)
            self.episode_index += 1
            self._episode_steps = 0
            self._state_image = (self.env.render(self._state)
                                 if self.store_images else None)
            self._needs_reset = False

        if self.env_steps < cfg.warmup_steps:
            action = self._rng_warmup.uniform(-1.0, 1.0, size=self.env.action_dim)
        else:
            action = self.agent.select_action(self._state)

        result = self.env.step(action)
        reward = self._current_reward(result)

        # horizon cutoffs are truncations: the value function still bootstraps
        truncated = result.done and (self._episode_steps + 1 >= self.env.horizon)
        transition = Transition(
            state=self._state, action=action, next_state=result.next_state,
            reward=reward, done=result.done and not truncated,
            step_index=self.env_steps)
        self.replay.add(transition)

        next_image = self.env.render(result.next_state) if self.store_images else None
        self.image_buffer.append(Segment(
            states=[result.next_state], image=next_image, progress=result.progress,
            source_episode=self.episode_index, source_step=self._episode_steps + 1))

        self._state = result.next_state
        self._state_image = next_image
        self._episode_steps += 1
        self.env_steps += 1
        self._needs_reset = result.done

        if self.env_steps > cfg.warmup_steps and len(self.replay) >= cfg.sac_batch_size:
            for _ in range(cfg.schedule.policy_updates_per_step):
                losses = self.agent.update(self.replay, self._rng_batches)
            self._last_losses = losses
        return transition

    # ------------------------------------------------------------------
    # feedback sessions
    # ------------------------------------------------------------------

    def _session_size(self) -> int:
        remaining = self.config.schedule.total_query_budget - self.queries_issued
        return min(self.config.schedule.queries_per_session, max(remaining, 0))

    def feedback_session(self) -> Optional[SessionReport]:
        """Query, retrain the reward, relabel the replay buffer."""
        if self.mode == "direct":
            return None
        n = self._session_size()
        if n <= 0 or len(self.image_buffer) < 2:
            return None
        if self.mode == "score":
            return self._score_session(n)
        return self._preference_session(n)

    def _assert_trainable(self, labels: np.ndarray) -> None:
        # audit hook: -1 must never reach a gradient step
        if np.any(labels == -1):
            raise AssertionError("label -1 reached reward training")

    def _retrain_and_relabel(self, report: SessionReport, train_fn) -> None:
        result = train_fn()
        if result is None:
            return
        report.trained = True
        report.train_epochs = result.epochs
        report.train_loss = result.final_loss
        report.train_accuracy = result.final_accuracy
        report.relabeled = self.replay.relabel_all(self._predict_states)
        self._last_relabeled = report.relabeled
        if self.audit_relabel:
            fresh = self.replay.predicted_rewards(self._predict_states)
            report.audit_ok = bool(np.array_equal(self.replay.rewards_in_order(), fresh))
        self.ensemble.save(self.run_dir)
        self._write_reward_report()

    def _preference_session(self, n: int) -> SessionReport:
        counts = {-1: 0, 0: 0, 1: 0}
        for _ in range(n):
            first, second = sample_pair(self.image_buffer, self._rng_pairs)
            label, raw = self.provider.label(first, second)
            record = PreferenceRecord(first=first, second=second, label=label,
                                      provider_name=self.provider.name,
                                      raw_response=raw, query_timestamp=_utc_now())
            self.preferences.append(record)
            self.pref_log.append(record)
            counts[label] += 1
            self.queries_issued += 1
        report = SessionReport(step=self.env_steps, queries=n, label_counts=counts)

        def train_fn():
            records = self.preferences.trainable_view()
            if not records:
                return None
            return train_on_preferences(
                self.ensemble, records,
                epochs=self.config.schedule.reward_update_epochs,
                batch_size=self.config.reward_batch_size,
                rng=self._rng_shuffle, batch_hook=self._assert_trainable)

        self._retrain_and_relabel(report, train_fn)
        self.session_reports.append(report)
        return report

    def _score_session(self, n: int) -> SessionReport:
        counts = {-1: 0, 0: 0, 1: 0}
        scored = 0
        scores_path = self.run_dir / "scores.jsonl"
        with open(scores_path, "a") as f:
            for _ in range(n):
                idx = int(self._rng_pairs.integers(len(self.image_buffer)))
                seg = self.image_buffer[idx]
                value, raw = self.provider.score(seg)
                f.write(json.dumps({"step": self.env_steps, "score": value,
                                    "progress": seg.progress, "raw": raw}) + "\n")
                self.queries_issued += 1
                if value is None:
                    counts[-1] += 1
                else:
                    scored += 1
                    self._score_data.append((seg, float(value)))
        report = SessionReport(step=self.env_steps, queries=n,
                               label_counts={**counts, "scored": scored})

        def train_fn():
            if not self._score_data:
                return None
            segments = [s for s, _ in self._score_data]
            values = [v for _, v in self._score_data]
            return train_on_scores(
                self.ensemble, segments, values,
                epochs=self.config.schedule.reward_update_epochs,
                batch_size=self.config.reward_batch_size, rng=self._rng_shuffle)

        self._retrain_and_relabel(report, train_fn)
        self.session_reports.append(report)
        return report

    def _write_reward_report(self) -> None:
        path = self.run_dir / "reward_report.json"
        path.write_text(json.dumps([r.to_dict() for r in self.session_reports],
                                   indent=2))

    # ------------------------------------------------------------------
    # evaluation and metrics
    # ------------------------------------------------------------------

    def _eval_seed(self) -> int:
        return (self.config.seed * 1_000_003 + self.env_steps) % (2 ** 31)

    def _evaluate_now(self, metrics_file) -> dict:
        result = evaluate(self.agent, self.eval_env, episodes=self.config.eval_episodes,
                          seed=self._eval_seed())
        row = {
            "step": self.env_steps,
            "episodes": self.episode_index + 1,
            "mean_eval_return": result.mean_return,
            "success_rate": result.success_rate,
            "critic_loss": self._last_losses.get("critic_loss", float("nan")),
            "actor_loss": self._last_losses.get("actor_loss", float("nan")),
            "alpha": self._last_losses.get("alpha", self.agent.alpha),
            "queries_issued": self.queries_issued,
            "trainable_records": len(self.preferences.trainable_view()),
            "relabeled": self._last_relabeled,
        }
        self.eval_rows.append(row)
        metrics_file.write(
            f"{row['step']},{row['episodes']},{row['mean_eval_return']!r},"
            f"{row['success_rate']!r},{row['critic_loss']!r},{row['actor_loss']!r},"
            f"{row['alpha']!r},{row['queries_issued']},{row['trainable_records']},"
            f"{row['relabeled']}\n")
        metrics_file.flush()
        self.agent.save(self.run_dir / f"sac_{self.env_steps}.ckpt")
        return row

    def _save_halt_state(self) -> None:
        self.agent.save(self.run_dir / f"sac_{self.env_steps}.ckpt")
        if self.ensemble is not None:
            self.ensemble.save(self.run_dir)
        (self.run_dir / "resume_state.json").write_text(json.dumps({
            "env_steps": self.env_steps,
            "queries_issued": self.queries_issued,
            "episode_index": self.episode_index,
            "halted_at": _utc_now(),
        }, indent=2))

    # ------------------------------------------------------------------
    # main loop
    # ------------------------------------------------------------------

    def train(self) -> dict:
        cfg = self.config
        self.config.save(self.run_dir / "config.json")
        (self.run_dir / "plots").mkdir(exist_ok=True)
        self.pref_log.path.touch()

        metrics_path = self.run_dir / "metrics.csv"
        with open(metrics_path, "w") as metrics_file:
            metrics_file.write(METRICS_HEADER)
            metrics_file.flush()
            try:
                while self.env_steps < cfg.total_steps:
                    self.collect_step()
                    if self.env_steps % cfg.schedule.session_interval_steps == 0:
                        self.feedback_session()
                    if self.env_steps % cfg.eval_interval == 0:
                        self._evaluate_now(metrics_file)
                if cfg.total_steps % cfg.eval_interval != 0 or cfg.total_steps == 0:
                    if cfg.total_steps > 0:
                        self._evaluate_now(metrics_file)
            except (ProviderUnavailable, CredentialRejected):
                self._save_halt_state()
                raise

        self._plot_learning_curve()
        return {
            "run_dir": str(self.run_dir),
            "env_steps": self.env_steps,
            "queries_issued": self.queries_issued,
            "eval_steps": [r["step"] for r in self.eval_rows],
            "eval_returns": [r["mean_eval_return"] for r in self.eval_rows],
            "final_return": self.eval_rows[-1]["mean_eval_return"] if self.eval_rows
                            else float("nan"),
            "sessions": len(self.session_reports),
        }

    def _plot_learning_curve(self) -> None:
        if not self.eval_rows:
            return
        from .analysis import plot_run_curve

        plot_run_curve(self.eval_rows, self.run_dir / "plots" / "learning_curve.png")


def restore_agent(run_dir) -> SacAgent:
    """Load the newest policy checkpoint from a (possibly halted) run."""
    run_dir = Path(run_dir)
    ckpts = sorted(run_dir.glob("sac_*.ckpt"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no policy checkpoints in {run_dir}")
    return SacAgent.load(ckpts[-1])
