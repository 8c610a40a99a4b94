"""Preference-based RL: learn rewards from pairwise labels, train SAC on them."""

from .core import (FeedbackSchedule, ImageBuffer, PreferenceBuffer, PreferenceLog,
                   PreferenceRecord, ReplayBuffer, RunConfig, Segment, Transition,
                   sample_pair)
from .envs import (BallPush2D, CartPoleContinuous, Environment, StepResult,
                   make_env, register_env, scripted_expert)
from .feedback import (DenseGtReward, EmbeddingScoreReward, NoisyOracleProvider,
                       OracleProvider, ScriptedPreferenceProvider, SparseGtReward,
                       VlmPreferenceProvider, VlmScoreProvider, build_provider,
                       embedding_similarity_score, noisy_oracle_label, oracle_label,
                       sparse_reward)
from .orchestrator import SessionReport, TrainingRun, restore_agent
from .rewards import (RewardEnsemble, TrainReport, bt_probability, gradient_check,
                      member_views, preference_loss, score_loss, train_on_preferences,
                      train_on_scores, train_reward)
from .sac import EvalResult, SacAgent, evaluate
from .vlm import (AuditLog, ChatRequest, ChatResponse, CredentialRejected,
                  HttpBackend, ProviderUnavailable, RateLimiter, ResponseCache,
                  ScriptedBackend, SequenceBackend, TransientBackendError,
                  VlmChatClient, parse_preference, parse_score, render_score_analysis,
                  render_score_labeling, render_single_stage,
                  render_two_stage_analysis, render_two_stage_labeling, request_key,
                  request_text, send)

__version__ = "0.1.0"
