"""Core types and buffers shared by the collection / feedback / training loop.

Everything here is deliberately framework-free: plain dataclasses plus numpy
ring buffers, so the pieces can be unit tested without touching torch.
"""

from __future__ import annotations

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

# Chunk size used when re-predicting rewards over a whole replay buffer.
# Fixed so that a later audit pass sees bitwise-identical batching.
RELABEL_CHUNK = 4096


# ---------------------------------------------------------------------------
# transitions and segments
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    """One environment step as stored in the replay buffer.

    ``reward`` holds the *learned* reward at collection time; it gets
    overwritten in place whenever the reward model is retrained.
    """

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    done: bool
    step_index: int

    def __post_init__(self) -> None:
        self.state = np.asarray(self.state, dtype=np.float64)
        self.action = np.asarray(self.action, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        if self.action.size == 0 or np.any(np.abs(self.action) > 1.0 + 1e-12):
            raise ValueError("action out of bounds")
        if not np.isfinite(self.reward):
            raise ValueError("non-finite reward")
        if self.step_index < 0:
            raise ValueError("negative step index")


@dataclass
class Segment:
    """A length-H window of observations offered for comparison.

    With segment_length=1 this is a single snapshot.  ``image`` is optional:
    progress-based labelers never look at pixels, so rendering can be skipped
    for them.  ``progress`` is the ground-truth task progress of the *last*
    state in the window, used by oracle labelers and accuracy audits.
    """

    states: list = field(default_factory=list)  # list of np.ndarray, len H >= 1
    image: Optional[np.ndarray] = None          # uint8 (H, W, 3) or None
    progress: Optional[float] = None
    source_episode: int = 0
    source_step: int = 0

    def __post_init__(self) -> None:
        if len(self.states) < 1:
            raise ValueError("empty segment")
        self.states = [np.asarray(s, dtype=np.float64) for s in self.states]
        if self.image is not None:
            self.image = np.asarray(self.image)
            if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
                raise ValueError("segment image must be uint8 (H, W, 3)")


@dataclass
class PreferenceRecord:
    """One answered comparison query.

    label: 1 means ``second`` preferred, 0 means ``first`` preferred,
    -1 means the labeler saw no difference or was unsure.  -1 records are
    kept for auditing but never enter reward training.
    """

    first: Segment
    second: Segment
    label: int
    provider_name: str
    raw_response: Optional[str] = None
    query_timestamp: str = ""

    def __post_init__(self) -> None:
        if self.label not in (-1, 0, 1):
            raise ValueError("invalid preference label")


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity FIFO transition store backed by preallocated arrays.

    Insertion order is preserved for iteration (oldest first).  Rewards are
    mutable in place via :meth:`relabel_all`.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=np.float64)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float64)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=bool)
        self.step_indices = np.zeros(capacity, dtype=np.int64)
        self._cursor = 0   # next slot to write
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        i = self._cursor
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.next_states[i] = tr.next_state
        self.rewards[i] = tr.reward
        self.dones[i] = tr.done
        self.step_indices[i] = tr.step_index
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Indices of live slots, oldest first."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._cursor) % self.capacity

    def __iter__(self) -> Iterator[Transition]:
        for i in self._order():
            yield Transition(
                state=self.states[i].copy(),
                action=self.actions[i].copy(),
                next_state=self.next_states[i].copy(),
                reward=float(self.rewards[i]),
                done=bool(self.dones[i]),
                step_index=int(self.step_indices[i]),
            )

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self._size < 1:
            raise ValueError("empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        if self._size == self.capacity:
            idx = (idx + self._cursor) % self.capacity
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "next_states": self.next_states[idx],
            "rewards": self.rewards[idx],
            "dones": self.dones[idx],
        }

    def relabel_all(self, predict: Callable[[np.ndarray], np.ndarray]) -> int:
        """Overwrite every stored reward with ``predict`` applied to the state.

        ``predict`` maps an (n, state_dim) array to an (n,) array.  Prediction
        runs in fixed-size chunks over live slots so a later audit pass that
        uses the same chunking reproduces the values exactly.  Returns the
        number of rewritten entries.
        """
        order = self._order()
        for lo in range(0, len(order), RELABEL_CHUNK):
            chunk = order[lo : lo + RELABEL_CHUNK]
            out = np.asarray(predict(self.states[chunk]), dtype=np.float64)
            if out.shape != (len(chunk),):
                raise ValueError("relabel prediction shape mismatch")
            self.rewards[chunk] = out
        return int(self._size)

    def predicted_rewards(self, predict: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Re-predict rewards without mutating, chunked like relabel_all."""
        order = self._order()
        out = np.empty(len(order), dtype=np.float64)
        for lo in range(0, len(order), RELABEL_CHUNK):
            chunk = order[lo : lo + RELABEL_CHUNK]
            out[lo : lo + len(chunk)] = np.asarray(predict(self.states[chunk]), dtype=np.float64)
        return out

    def rewards_in_order(self) -> np.ndarray:
        return self.rewards[self._order()].copy()


# ---------------------------------------------------------------------------
# image / observation buffer
# ---------------------------------------------------------------------------


class ImageBuffer:
    """FIFO store of candidate segments for preference queries.

    capacity=0 means unbounded.  When ``require_images`` is set, appended
    segments must carry an image matching ``resolution`` (width, height);
    progress-only labeling pipelines disable it and skip rendering entirely.
    """

    def __init__(self, capacity: int = 0, require_images: bool = True,
                 resolution: Optional[tuple] = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.require_images = require_images
        self.resolution = tuple(resolution) if resolution is not None else None
        self._segments: list[Segment] = []

    def __len__(self) -> int:
        return len(self._segments)

    def append(self, segment: Segment) -> None:
        if self.require_images:
            if segment.image is None:
                raise ValueError("segment missing image")
            if self.resolution is not None:
                w, h = self.resolution
                if segment.image.shape[:2] != (h, w):
                    raise ValueError("segment image resolution mismatch")
        self._segments.append(segment)
        if self.capacity and len(self._segments) > self.capacity:
            del self._segments[0 : len(self._segments) - self.capacity]

    def __getitem__(self, i: int) -> Segment:
        return self._segments[i]


def sample_pair(buffer: ImageBuffer, rng: np.random.Generator) -> tuple[Segment, Segment]:
    """Draw two distinct segments uniformly at random for a comparison query."""
    n = len(buffer)
    if n < 2:
        raise ValueError("insufficient observations")
    i, j = rng.choice(n, size=2, replace=False)
    return buffer[int(i)], buffer[int(j)]


# ---------------------------------------------------------------------------
# preference store
# ---------------------------------------------------------------------------


class PreferenceBuffer:
    """Append-only store of labeled comparisons with per-label counts.

    Appends are lock-protected: the human labeler path answers queries from a
    terminal thread while collection continues.
    """

    def __init__(self):
        self._records: list[PreferenceRecord] = []
        self._counts = {-1: 0, 0: 0, 1: 0}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def append(self, record: PreferenceRecord) -> None:
        if record.label not in (-1, 0, 1):
            raise ValueError("invalid preference label")
        with self._lock:
            self._records.append(record)
            self._counts[record.label] += 1

    def counts(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def trainable_view(self) -> list[PreferenceRecord]:
        """Records that carry an actual preference (label 0 or 1)."""
        with self._lock:
            return [r for r in self._records if r.label != -1]

    def all_records(self) -> list[PreferenceRecord]:
        with self._lock:
            return list(self._records)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class FeedbackSchedule:
    """Query cadence: M queries every K environment steps, N total."""

    queries_per_session: int      # M
    session_interval_steps: int   # K
    total_query_budget: int       # N
    reward_update_epochs: int = 200   # max epochs per reward training round
    policy_updates_per_step: int = 1

    def __post_init__(self) -> None:
        if self.queries_per_session < 1:
            raise ValueError("queries_per_session must be positive")
        if self.session_interval_steps < 1:
            raise ValueError("session_interval_steps must be positive")
        if self.total_query_budget < self.queries_per_session:
            raise ValueError("total budget smaller than one session")
        if self.reward_update_epochs < 1 or self.policy_updates_per_step < 1:
            raise ValueError("update counts must be positive")


@dataclass
class RunConfig:
    """Everything needed to reproduce a training run."""

    env_name: str
    goal_description: str
    provider_name: str
    schedule: FeedbackSchedule
    seed: int
    run_dir: str
    discount: float = 0.99
    segment_length: int = 1
    reward_input_mode: str = "state"      # "state" or "image"
    render_resolution: tuple = (128, 128)  # (width, height)
    total_steps: int = 150_000
    warmup_steps: int = 1_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    replay_capacity: int = 200_000
    image_buffer_capacity: int = 0        # 0 = unbounded
    store_images: bool = True
    reward_batch_size: int = 128
    reward_lr: float = 3e-4
    reward_members: int = 3
    sac_batch_size: int = 256
    sac_lr: float = 3e-4
    tau: float = 0.005
    tie_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.reward_input_mode not in ("state", "image"):
            raise ValueError("reward_input_mode must be 'state' or 'image'")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount out of range")
        if self.segment_length < 1:
            raise ValueError("segment_length must be positive")
        self.render_resolution = tuple(self.render_resolution)
        if len(self.render_resolution) != 2 or min(self.render_resolution) < 8:
            raise ValueError("bad render resolution")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["render_resolution"] = list(self.render_resolution)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        d["schedule"] = FeedbackSchedule(**d["schedule"])
        d["render_resolution"] = tuple(d["render_resolution"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# preference log serialization
# ---------------------------------------------------------------------------


def _segment_to_json(seg: Segment, image_path: Optional[str]) -> dict:
    return {
        "states": [s.tolist() for s in seg.states],
        "image_path": image_path,
        "progress": seg.progress,
        "source_episode": seg.source_episode,
        "source_step": seg.source_step,
    }


def _segment_from_json(d: dict, root: Optional[Path]) -> Segment:
    image = None
    if d.get("image_path") and root is not None:
        p = root / d["image_path"]
        if p.exists():
            from PIL import Image

            image = np.asarray(Image.open(p).convert("RGB"))
    return Segment(
        states=[np.asarray(s, dtype=np.float64) for s in d["states"]],
        image=image,
        progress=d.get("progress"),
        source_episode=d.get("source_episode", 0),
        source_step=d.get("source_step", 0),
    )


class PreferenceLog:
    """JSONL preference log under a run directory.

    One record per line; segment images go to ``pref_images/`` as PNG and the
    log stores paths relative to the run directory, so the file stays small
    and diffs cleanly.
    """

    FILENAME = "preferences.jsonl"
    IMAGE_DIR = "pref_images"

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / self.FILENAME
        self._n_images = 0
        self._lock = threading.Lock()

    def _save_image(self, seg: Segment) -> Optional[str]:
        if seg.image is None:
            return None
        from PIL import Image

        rel = f"{self.IMAGE_DIR}/{self._n_images:06d}.png"
        self._n_images += 1
        out = self.run_dir / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(seg.image).save(out)
        return rel

    def append(self, record: PreferenceRecord) -> None:
        with self._lock:
            row = {
                "first": _segment_to_json(record.first, self._save_image(record.first)),
                "second": _segment_to_json(record.second, self._save_image(record.second)),
                "label": record.label,
                "provider_name": record.provider_name,
                "raw_response": record.raw_response,
                "query_timestamp": record.query_timestamp,
            }
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")

    @staticmethod
    def read(run_dir, load_images: bool = False) -> list[PreferenceRecord]:
        run_dir = Path(run_dir)
        path = run_dir / PreferenceLog.FILENAME
        if not path.exists():
            raise FileNotFoundError(str(path))
        root = run_dir if load_images else None
        out = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                PreferenceRecord(
                    first=_segment_from_json(d["first"], root),
                    second=_segment_from_json(d["second"], root),
                    label=int(d["label"]),
                    provider_name=d["provider_name"],
                    raw_response=d.get("raw_response"),
                    query_timestamp=d.get("query_timestamp", ""),
                )
            )
        return out
