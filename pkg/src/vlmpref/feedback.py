"""Labelers that answer comparison queries, plus score and direct-reward sources.

A preference provider maps a pair of segments to a label in {-1, 0, 1}
(1 = second wins, 0 = first wins, -1 = no preference).  Score providers map a
single segment to a value in [0, 1] or None when unsure.  Direct sources skip
reward learning entirely and emit a scalar per environment step.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import vlm
from .core import Segment
from .envs import StepResult


def oracle_label(p0: float, p1: float, tie_epsilon: float = 1e-6) -> int:
    """Compare ground-truth progress values; near-ties yield no preference."""
    if not (np.isfinite(p0) and np.isfinite(p1)):
        raise ValueError("non-finite progress")
    if p1 - p0 > tie_epsilon:
        return 1
    if p0 - p1 > tie_epsilon:
        return 0
    return -1


def noisy_oracle_label(p0: float, p1: float, flip_probability: float,
                       rng: np.random.Generator, tie_epsilon: float = 1e-6) -> int:
    """Oracle label with each decided comparison flipped with probability q."""
    if not (0.0 <= flip_probability <= 0.5):
        raise ValueError("flip probability out of range")
    label = oracle_label(p0, p1, tie_epsilon)
    if label == -1:
        return label
    if rng.random() < flip_probability:
        return 1 - label
    return label


def sparse_reward(step: StepResult) -> float:
    """Binary task-completion reward."""
    return 1.0 if step.success else 0.0


def embedding_similarity_score(embedder, image: np.ndarray, goal_text: str) -> float:
    """Cosine similarity between image and goal-text embeddings."""
    v_img = np.asarray(embedder.embed_image(image), dtype=np.float64)
    v_txt = np.asarray(embedder.embed_text(goal_text), dtype=np.float64)
    n_img = np.linalg.norm(v_img)
    n_txt = np.linalg.norm(v_txt)
    if n_img < 1e-12 or n_txt < 1e-12:
        raise ValueError("degenerate embedding")
    return float(np.dot(v_img, v_txt) / (n_img * n_txt))


def _require_progress(seg: Segment) -> float:
    if seg.progress is None:
        raise ValueError("segment missing progress")
    return float(seg.progress)


def _require_image(seg: Segment) -> np.ndarray:
    if seg.image is None:
        raise ValueError("segment missing image")
    return seg.image


# ---------------------------------------------------------------------------
# preference providers
# ---------------------------------------------------------------------------


class PreferenceProvider:
    """Interface: label(first, second) -> (label, raw transcript or None)."""

    name = "provider"
    needs_images = False

    def label(self, first: Segment, second: Segment):
        raise NotImplementedError


class OracleProvider(PreferenceProvider):
    """Labels from ground-truth progress; the synthetic stand-in for a human."""

    name = "oracle"

    def __init__(self, tie_epsilon: float = 1e-6):
        self.tie_epsilon = tie_epsilon

    def label(self, first: Segment, second: Segment):
        lab = oracle_label(_require_progress(first), _require_progress(second),
                           self.tie_epsilon)
        return lab, None


class NoisyOracleProvider(PreferenceProvider):
    """Oracle with decided labels flipped at a fixed rate."""

    def __init__(self, flip_probability: float, seed: int = 0,
                 tie_epsilon: float = 1e-6):
        if not (0.0 <= flip_probability <= 0.5):
            raise ValueError("flip probability out of range")
        self.flip_probability = flip_probability
        self.tie_epsilon = tie_epsilon
        self.rng = np.random.default_rng(seed)
        self.name = f"noisy-oracle:{flip_probability:g}"

    def label(self, first: Segment, second: Segment):
        lab = noisy_oracle_label(_require_progress(first), _require_progress(second),
                                 self.flip_probability, self.rng, self.tie_epsilon)
        return lab, None


class ScriptedPreferenceProvider(PreferenceProvider):
    """Replays a fixed label sequence, cycling when exhausted.  Test harness."""

    name = "scripted"

    def __init__(self, labels: Sequence[int]):
        labels = [int(l) for l in labels]
        if not labels or any(l not in (-1, 0, 1) for l in labels):
            raise ValueError("invalid scripted labels")
        self.labels = labels
        self._i = 0

    def label(self, first: Segment, second: Segment):
        lab = self.labels[self._i % len(self.labels)]
        self._i += 1
        return lab, None


class VlmPreferenceProvider(PreferenceProvider):
    """Asks a vision-language backend to compare the two segment images.

    Two-stage mode first requests a free-form analysis of both images, then a
    second request distills it to a label.  Single-stage mode asks for the
    label directly.  Raw transcripts are kept for the preference log.
    """

    needs_images = True

    def __init__(self, client: vlm.VlmChatClient, goal_description: str,
                 two_stage: bool = True, model_name: str = "vlm-default"):
        self.client = client
        self.goal = goal_description
        self.two_stage = two_stage
        self.model_name = model_name
        self.name = "vlm2stage" if two_stage else "vlm1stage"

    def label(self, first: Segment, second: Segment):
        img0 = _require_image(first)
        img1 = _require_image(second)
        if self.two_stage:
            analysis_req = vlm.render_two_stage_analysis(
                self.goal, img0, img1, model_name=self.model_name)
            analysis = self.client.query(analysis_req)
            label_req = vlm.render_two_stage_labeling(
                self.goal, analysis.text, model_name=self.model_name)
            decision = self.client.query(label_req)
            raw = json.dumps({"analysis": analysis.text, "label": decision.text})
        else:
            req = vlm.render_single_stage(self.goal, img0, img1,
                                          model_name=self.model_name)
            decision = self.client.query(req)
            raw = json.dumps({"label": decision.text})
        return vlm.parse_preference(decision.text), raw


class HumanTerminalProvider(PreferenceProvider):
    """Prompts a person at the terminal with the two frames saved to disk."""

    name = "human"
    needs_images = True

    def __init__(self, images_dir, input_fn=input, print_fn=print):
        self.images_dir = Path(images_dir)
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self._input = input_fn
        self._print = print_fn
        self._n = 0

    def _save(self, seg: Segment, tag: str) -> Path:
        from PIL import Image

        path = self.images_dir / f"query_{self._n:05d}_{tag}.png"
        Image.fromarray(_require_image(seg)).save(path)
        return path

    def label(self, first: Segment, second: Segment):
        p0 = self._save(first, "first")
        p1 = self._save(second, "second")
        self._n += 1
        self._print(f"Image 1: {p0}")
        self._print(f"Image 2: {p1}")
        while True:
            raw = self._input("Prefer 0 (first), 1 (second), or -1 (no preference): ")
            token = raw.strip()
            if token in ("-1", "0", "1"):
                return int(token), None
            self._print("Please answer 0, 1 or -1.")


# ---------------------------------------------------------------------------
# score providers
# ---------------------------------------------------------------------------


class ScoreProvider:
    """Interface: score(segment) -> (value, raw transcript).

    value is a float in [0, 1], or None when the labeler is unsure; unsure
    samples never enter the regression set.
    """

    name = "score-provider"
    needs_images = False

    def score(self, segment: Segment):
        raise NotImplementedError


class VlmScoreProvider(ScoreProvider):
    """Two-stage scalar scoring of a single frame against the goal text."""

    name = "vlm-score"
    needs_images = True

    def __init__(self, client: vlm.VlmChatClient, goal_description: str,
                 model_name: str = "vlm-default"):
        self.client = client
        self.goal = goal_description
        self.model_name = model_name

    def score(self, segment: Segment):
        img = _require_image(segment)
        analysis_req = vlm.render_score_analysis(self.goal, img,
                                                 model_name=self.model_name)
        analysis = self.client.query(analysis_req)
        label_req = vlm.render_score_labeling(self.goal, analysis.text,
                                              model_name=self.model_name)
        decision = self.client.query(label_req)
        return vlm.parse_score(decision.text), json.dumps(
            {"analysis": analysis.text, "score": decision.text})


# ---------------------------------------------------------------------------
# direct reward sources (no reward learning)
# ---------------------------------------------------------------------------


class DirectRewardSource:
    """Interface: reward(step, image) -> float used directly by the policy."""

    name = "direct"
    needs_images = False

    def reward(self, step: StepResult, image: Optional[np.ndarray] = None) -> float:
        raise NotImplementedError


class DenseGtReward(DirectRewardSource):
    name = "gt-dense"

    def reward(self, step: StepResult, image=None) -> float:
        return float(step.gt_reward)


class SparseGtReward(DirectRewardSource):
    name = "gt-sparse"

    def reward(self, step: StepResult, image=None) -> float:
        return sparse_reward(step)


class EmbeddingScoreReward(DirectRewardSource):
    """Image-goal cosine similarity as a per-step reward."""

    name = "embed-score"
    needs_images = True

    def __init__(self, embedder, goal_text: str):
        self.embedder = embedder
        self.goal_text = goal_text

    def reward(self, step: StepResult, image=None) -> float:
        if image is None:
            raise ValueError("segment missing image")
        return embedding_similarity_score(self.embedder, image, self.goal_text)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def build_provider(name: str, goal_description: str = "", seed: int = 0,
                   client: Optional[vlm.VlmChatClient] = None, run_dir=None,
                   tie_epsilon: float = 1e-6, embedder=None,
                   model_name: str = "vlm-default"):
    """Construct a labeler or reward source from its registry name.

    Names: oracle, noisy-oracle:<q>, scripted:<path>, human, vlm2stage,
    vlm1stage, vlm-score, embed-score, gt-dense, gt-sparse.
    """
    if name == "oracle":
        return OracleProvider(tie_epsilon=tie_epsilon)
    if name.startswith("noisy-oracle:"):
        q = float(name.split(":", 1)[1])
        return NoisyOracleProvider(q, seed=seed, tie_epsilon=tie_epsilon)
    if name.startswith("scripted:"):
        path = name.split(":", 1)[1]
        return ScriptedPreferenceProvider(json.loads(Path(path).read_text()))
    if name == "human":
        if run_dir is None:
            raise ValueError("human provider needs a run directory")
        return HumanTerminalProvider(Path(run_dir) / "human_queries")
    if name in ("vlm2stage", "vlm1stage"):
        if client is None:
            raise ValueError("vlm provider needs a chat client")
        return VlmPreferenceProvider(client, goal_description,
                                     two_stage=(name == "vlm2stage"),
                                     model_name=model_name)
    if name == "vlm-score":
        if client is None:
            raise ValueError("vlm provider needs a chat client")
        return VlmScoreProvider(client, goal_description, model_name=model_name)
    if name == "embed-score":
        if embedder is None:
            raise ValueError("embed-score needs an embedder")
        return EmbeddingScoreReward(embedder, goal_description)
    if name == "gt-dense":
        return DenseGtReward()
    if name == "gt-sparse":
        return SparseGtReward()
    raise ValueError(f"unknown provider: {name}")
