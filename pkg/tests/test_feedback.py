"""Label providers, score providers and direct reward sources."""

import json

import numpy as np
import pytest

from vlmpref.core import Segment
from vlmpref.envs import StepResult
from vlmpref.feedback import (
    DenseGtReward,
    EmbeddingScoreReward,
    NoisyOracleProvider,
    OracleProvider,
    ScriptedPreferenceProvider,
    SparseGtReward,
    VlmPreferenceProvider,
    VlmScoreProvider,
    build_provider,
    noisy_oracle_label,
    oracle_label,
)
from vlmpref.vlm import SequenceBackend, VlmChatClient


def seg(progress, image=None):
    return Segment(states=[np.array([progress])], image=image, progress=progress)


def img(fill):
    return np.full((8, 8, 3), fill, dtype=np.uint8)


# ---------------------------------------------------------------------------
# synthetic labels
# ---------------------------------------------------------------------------


def test_oracle_prefers_higher_progress():
    assert oracle_label(0.2, 0.8) == 1
    assert oracle_label(0.8, 0.2) == 0


def test_oracle_ties_map_to_no_difference():
    # the labeling instruction reserves -1 for "unsure or no difference",
    # so indistinguishable progress yields the discard label
    assert oracle_label(0.5, 0.5) == -1
    assert oracle_label(0.5, 0.5 + 1e-9, tie_epsilon=1e-6) == -1
    assert oracle_label(0.5, 0.5 + 1e-3, tie_epsilon=1e-6) == 1


def test_noisy_oracle_flip_rate_is_calibrated():
    rng = np.random.default_rng(0)
    n = 4000
    flips = 0
    for _ in range(n):
        clean = oracle_label(0.1, 0.9)
        noisy = noisy_oracle_label(0.1, 0.9, flip_probability=0.25, rng=rng)
        flips += int(noisy != clean)
    assert abs(flips / n - 0.25) < 0.02


def test_noisy_oracle_zero_q_is_clean():
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert noisy_oracle_label(0.1, 0.9, flip_probability=0.0, rng=rng) == 1


def test_oracle_provider_uses_segment_progress():
    provider = OracleProvider()
    label, raw = provider.label(seg(0.1), seg(0.9))
    assert label == 1
    assert provider.name == "oracle"
    assert not provider.needs_images
    assert raw is None  # synthetic labelers have no transcript


def test_noisy_oracle_never_flips_ties():
    rng = np.random.default_rng(4)
    for _ in range(50):
        assert noisy_oracle_label(0.5, 0.5, flip_probability=0.5, rng=rng) == -1


def test_noisy_oracle_rejects_degenerate_rates():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        noisy_oracle_label(0.1, 0.9, flip_probability=0.9, rng=rng)


def test_noisy_provider_name_carries_rate():
    provider = NoisyOracleProvider(0.2, seed=0)
    assert provider.name == "noisy-oracle:0.2"


def test_noisy_provider_is_seed_deterministic():
    a = NoisyOracleProvider(0.3, seed=5)
    b = NoisyOracleProvider(0.3, seed=5)
    pairs = [(seg(x), seg(y))
             for x, y in np.random.default_rng(2).uniform(size=(100, 2))]
    assert [a.label(p, q)[0] for p, q in pairs] == [b.label(p, q)[0] for p, q in pairs]


def test_scripted_provider_cycles_labels():
    provider = ScriptedPreferenceProvider([1, 0, -1])
    out = [provider.label(seg(0.0), seg(1.0))[0] for _ in range(7)]
    assert out == [1, 0, -1, 1, 0, -1, 1]


# ---------------------------------------------------------------------------
# VLM-backed providers
# ---------------------------------------------------------------------------


def test_two_stage_provider_issues_two_requests_per_pair():
    backend = SequenceBackend(["image two looks closer to the goal", "1"])
    client = VlmChatClient(backend)
    provider = VlmPreferenceProvider(client, "reach the goal", two_stage=True)
    label, raw = provider.label(seg(0.1, img(0)), seg(0.9, img(60)))
    assert label == 1
    assert backend.calls == 2
    transcript = json.loads(raw)
    assert transcript["analysis"].startswith("image two")
    assert transcript["label"] == "1"
    assert provider.name == "vlm2stage"


def test_single_stage_provider_issues_one_request():
    backend = SequenceBackend(["0"])
    client = VlmChatClient(backend)
    provider = VlmPreferenceProvider(client, "reach the goal", two_stage=False)
    label, raw = provider.label(seg(0.1, img(0)), seg(0.9, img(60)))
    assert label == 0
    assert backend.calls == 1
    assert provider.name == "vlm1stage"


def test_vlm_provider_maps_junk_to_unsure():
    backend = SequenceBackend(["cannot decide", "no idea, sorry"])
    client = VlmChatClient(backend)
    provider = VlmPreferenceProvider(client, "reach the goal", two_stage=True)
    label, _ = provider.label(seg(0.1, img(0)), seg(0.9, img(60)))
    assert label == -1


def test_vlm_provider_requires_images():
    backend = SequenceBackend(["1"])
    provider = VlmPreferenceProvider(VlmChatClient(backend), "goal")
    with pytest.raises(ValueError, match="segment missing image"):
        provider.label(seg(0.1), seg(0.9))


def test_score_provider_parses_or_abstains():
    backend = SequenceBackend(["looks halfway there", "0.5",
                               "hard to say", "-1"])
    client = VlmChatClient(backend)
    provider = VlmScoreProvider(client, "reach the goal")
    value, raw = provider.score(seg(0.4, img(10)))
    assert value == 0.5
    value2, _ = provider.score(seg(0.4, img(20)))
    assert value2 is None
    assert backend.calls == 4


# ---------------------------------------------------------------------------
# direct reward sources
# ---------------------------------------------------------------------------


def fake_step(reward, success):
    return StepResult(next_state=np.zeros(2), gt_reward=reward, done=False,
                      success=success, progress=reward)


def test_dense_gt_reward_passthrough():
    src = DenseGtReward()
    assert src.reward(fake_step(-0.37, False)) == -0.37
    assert not src.needs_images


def test_sparse_gt_reward_is_binary():
    src = SparseGtReward()
    assert src.reward(fake_step(-0.4, False)) == 0.0
    assert src.reward(fake_step(-0.01, True)) == 1.0


class ToyEmbedder:
    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return np.array([1.0, 1.0])


def test_embedding_score_reward_is_cosine():
    src = EmbeddingScoreReward(ToyEmbedder(), "goal text")
    step = StepResult(next_state=np.zeros(2), gt_reward=0.0, done=False,
                      success=False, progress=0.0)
    value = src.reward(step, image=img(5))
    assert value == pytest.approx(np.sqrt(2.0) / 2.0, abs=1e-12)
    assert src.needs_images


# ---------------------------------------------------------------------------
# provider registry
# ---------------------------------------------------------------------------


def test_build_provider_oracle_variants(tmp_path):
    assert isinstance(build_provider("oracle"), OracleProvider)
    noisy = build_provider("noisy-oracle:0.15", seed=3)
    assert isinstance(noisy, NoisyOracleProvider)
    assert noisy.name == "noisy-oracle:0.15"

    labels_file = tmp_path / "labels.json"
    labels_file.write_text(json.dumps([1, 0, -1, 1]))
    scripted = build_provider(f"scripted:{labels_file}")
    assert isinstance(scripted, ScriptedPreferenceProvider)
    assert scripted.label(seg(0.0), seg(1.0))[0] == 1


def test_build_provider_vlm_requires_client():
    with pytest.raises(ValueError):
        build_provider("vlm2stage", goal_description="goal")
    backend = SequenceBackend(["1"])
    provider = build_provider("vlm1stage", goal_description="goal",
                              client=VlmChatClient(backend))
    assert isinstance(provider, VlmPreferenceProvider)
    assert not provider.two_stage


def test_build_provider_direct_sources():
    assert isinstance(build_provider("gt-dense"), DenseGtReward)
    assert isinstance(build_provider("gt-sparse"), SparseGtReward)
    with pytest.raises(ValueError):
        build_provider("embed-score", goal_description="goal")
    src = build_provider("embed-score", goal_description="goal",
                         embedder=ToyEmbedder())
    assert isinstance(src, EmbeddingScoreReward)


def test_build_provider_unknown_name():
    with pytest.raises(ValueError):
        build_provider("telepathy")
