"""Learned reward model: ensemble nets, preference and score losses, training.

The reward is an ensemble of small tanh-headed networks trained with a
Bradley-Terry cross entropy over pairwise comparisons (or plain MSE when the
labeler emits scalar scores).  Predictions used by the policy are the
ensemble mean, so member count and ordering are part of the reward function.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PreferenceRecord, Segment


def bt_probability(sum_r0: float, sum_r1: float) -> float:
    """Probability that the second segment wins under the Bradley-Terry model.

    Computed as sigmoid(sum_r1 - sum_r0) in a numerically safe form, which is
    identical to exp(sum_r1) / (exp(sum_r0) + exp(sum_r1)) but immune to
    overflow of the individual exponentials.
    """
    if not (math.isfinite(sum_r0) and math.isfinite(sum_r1)):
        raise ValueError("invalid reward sum")
    d = sum_r1 - sum_r0
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class StateRewardNet(nn.Module):
    """3x256 MLP with a tanh head, so outputs live in (-1, 1)."""

    def __init__(self, state_dim: int, hidden: int = 256, dtype=torch.float32):
        super().__init__()
        dims = [state_dim, hidden, hidden, hidden]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b, dtype=dtype), nn.LeakyReLU()]
        layers += [nn.Linear(hidden, 1, dtype=dtype), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


class ImageRewardNet(nn.Module):
    """Four stride-2 conv stages (16/32/64/64 channels) into a tanh head."""

    def __init__(self, image_shape: tuple, dtype=torch.float32):
        super().__init__()
        h, w = image_shape
        chans = [3, 16, 32, 64, 64]
        convs = []
        for a, b in zip(chans[:-1], chans[1:]):
            convs += [nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1, dtype=dtype),
                      nn.LeakyReLU()]
        self.convs = nn.Sequential(*convs)
        for _ in range(4):
            h = (h + 1) // 2
            w = (w + 1) // 2
        self.head = nn.Linear(64 * h * w, 1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, 3, H, W), already scaled to [0, 1]
        z = self.convs(x)
        return torch.tanh(self.head(z.flatten(1))).squeeze(-1)


# ---------------------------------------------------------------------------
# input conversion
# ---------------------------------------------------------------------------


def _to_input_tensor(arr: np.ndarray, input_mode: str, dtype, device) -> torch.Tensor:
    """Convert a batch of raw observations to the network input layout."""
    if input_mode == "state":
        t = torch.as_tensor(np.asarray(arr, dtype=np.float64), dtype=dtype, device=device)
        if t.ndim != 2:
            raise ValueError("input mode mismatch")
        return t
    if input_mode == "image":
        a = np.asarray(arr)
        if a.ndim != 4 or a.shape[-1] != 3 or a.dtype != np.uint8:
            raise ValueError("input mode mismatch")
        t = torch.as_tensor(a, dtype=dtype, device=device).permute(0, 3, 1, 2) / 255.0
        return t
    raise ValueError("input mode mismatch")


def segment_input(seg: Segment, input_mode: str) -> np.ndarray:
    """Stack a segment's observations into an (H, ...) array for the net."""
    if input_mode == "state":
        return np.stack(seg.states)
    if seg.image is None:
        raise ValueError("segment missing image")
    return seg.image[None]


def records_to_arrays(records: Sequence[PreferenceRecord], input_mode: str):
    """Pack trainable records into (first, second, labels) arrays.

    Raises on an empty batch or on any record whose label is -1; those are
    audit-only and must be filtered out before training.
    """
    if len(records) == 0:
        raise ValueError("empty batch")
    labels = np.array([r.label for r in records], dtype=np.int64)
    if np.any(labels == -1):
        raise ValueError("untrainable label")
    first = np.stack([segment_input(r.first, input_mode) for r in records])
    second = np.stack([segment_input(r.second, input_mode) for r in records])
    return first, second, labels


def _batch_tensor(arr: np.ndarray, input_mode: str, dtype, device) -> torch.Tensor:
    """Convert a (B, H, ...) observation batch, keeping the segment axis."""
    b, h = arr.shape[0], arr.shape[1]
    flat = _to_input_tensor(arr.reshape(-1, *arr.shape[2:]), input_mode, dtype, device)
    return flat.reshape(b, h, *flat.shape[1:])


def _segment_sums(member: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Per-segment reward sums for a (B, H, ...) input batch."""
    b, h = x.shape[0], x.shape[1]
    flat = member(x.reshape(b * h, *x.shape[2:]))
    return flat.reshape(b, h).sum(dim=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def preference_loss(member: nn.Module, first: torch.Tensor, second: torch.Tensor,
                    labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the Bradley-Terry win probability against the labels.

    first/second: (B, H, ...) observation tensors, labels: (B,) of {0, 1}
    where 1 means the second segment won.  Equal reward sums give log(2).
    """
    if first.shape[0] == 0:
        raise ValueError("empty batch")
    if bool(((labels != 0) & (labels != 1)).any()):
        raise ValueError("untrainable label")
    s0 = _segment_sums(member, first)
    s1 = _segment_sums(member, second)
    winner_margin = torch.where(labels == 1, s1 - s0, s0 - s1)
    return -F.logsigmoid(winner_margin).mean()


def score_loss(member: nn.Module, inputs: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """MSE between the net's output mapped to [0, 1] and target scores."""
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if bool((~torch.isfinite(scores)).any()) or bool((scores < 0).any()) or bool((scores > 1).any()):
        raise ValueError("invalid score")
    pred = (member(inputs) + 1.0) / 2.0
    return F.mse_loss(pred, scores)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------


class RewardEnsemble:
    """Mean of ``n_members`` independently initialized reward nets.

    Members share architecture but differ in initialization and in minibatch
    order during training, which is what makes the ensemble mean smoother
    than any single head.
    """

    def __init__(self, input_mode: str, state_dim: Optional[int] = None,
                 image_shape: Optional[tuple] = None, n_members: int = 3,
                 lr: float = 3e-4, seed: int = 0, dtype=torch.float32,
                 device: str = "cpu"):
        if input_mode not in ("state", "image"):
            raise ValueError("input mode mismatch")
        if input_mode == "state" and not state_dim:
            raise ValueError("state_dim required for state mode")
        if input_mode == "image" and not image_shape:
            raise ValueError("image_shape required for image mode")
        self.input_mode = input_mode
        self.state_dim = state_dim
        self.image_shape = tuple(image_shape) if image_shape else None
        self.n_members = n_members
        self.lr = lr
        self.seed = seed
        self.dtype = dtype
        self.device = device

        self.members: list[nn.Module] = []
        for i in range(n_members):
            torch.manual_seed(seed * 9973 + i)
            if input_mode == "state":
                net = StateRewardNet(state_dim, dtype=dtype)
            else:
                net = ImageRewardNet(self.image_shape, dtype=dtype)
            self.members.append(net.to(device))
        self.optimizers = [torch.optim.Adam(m.parameters(), lr=lr) for m in self.members]

    # prediction ------------------------------------------------------------

    def _check_inputs(self, arr: np.ndarray) -> None:
        a = np.asarray(arr)
        if self.input_mode == "state":
            if a.ndim != 2 or a.shape[1] != self.state_dim:
                raise ValueError("input mode mismatch")
        else:
            if a.ndim != 4 or a.dtype != np.uint8 or a.shape[1:3] != self.image_shape \
                    or a.shape[3] != 3:
                raise ValueError("input mode mismatch")

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Ensemble-mean reward for a batch of raw observations."""
        self._check_inputs(inputs)
        x = _to_input_tensor(inputs, self.input_mode, self.dtype, self.device)
        outs = []
        with torch.no_grad():
            for m in self.members:
                m.eval()
                outs.append(m(x).double().cpu().numpy())
        return np.mean(np.stack(outs), axis=0)

    def predict_single(self, obs: np.ndarray) -> float:
        return float(self.predict(np.asarray(obs)[None])[0])

    def segment_sum(self, seg: Segment) -> float:
        """Ensemble-mean reward summed over a segment's observations."""
        return float(self.predict(segment_input(seg, self.input_mode)).sum())

    # persistence -----------------------------------------------------------

    def _meta(self) -> dict:
        return {
            "input_mode": self.input_mode,
            "state_dim": self.state_dim,
            "image_shape": list(self.image_shape) if self.image_shape else None,
            "n_members": self.n_members,
            "lr": self.lr,
            "seed": self.seed,
        }

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (m, opt) in enumerate(zip(self.members, self.optimizers)):
            p = directory / f"reward_member_{i}.ckpt"
            torch.save({"meta": self._meta(), "state_dict": m.state_dict(),
                        "optimizer": opt.state_dict()}, p)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory, device: str = "cpu", dtype=torch.float32) -> "RewardEnsemble":
        directory = Path(directory)
        first = directory / "reward_member_0.ckpt"
        if not first.exists():
            raise FileNotFoundError(str(first))
        meta = torch.load(first, map_location="cpu", weights_only=False)["meta"]
        ens = cls(
            input_mode=meta["input_mode"],
            state_dim=meta["state_dim"],
            image_shape=tuple(meta["image_shape"]) if meta["image_shape"] else None,
            n_members=meta["n_members"],
            lr=meta["lr"],
            seed=meta["seed"],
            dtype=dtype,
            device=device,
        )
        for i, (m, opt) in enumerate(zip(ens.members, ens.optimizers)):
            blob = torch.load(directory / f"reward_member_{i}.ckpt",
                              map_location=device, weights_only=False)
            m.load_state_dict(blob["state_dict"])
            if "optimizer" in blob:
                opt.load_state_dict(blob["optimizer"])
        return ens


class MemberView:
    """One ensemble member exposed through the segment-sum interface."""

    def __init__(self, ensemble: RewardEnsemble, index: int):
        self.ensemble = ensemble
        self.index = index

    def segment_sum(self, seg: Segment) -> float:
        arr = segment_input(seg, self.ensemble.input_mode)
        x = _to_input_tensor(arr, self.ensemble.input_mode, self.ensemble.dtype,
                             self.ensemble.device)
        m = self.ensemble.members[self.index]
        with torch.no_grad():
            m.eval()
            return float(m(x).double().sum())


def member_views(ensemble: RewardEnsemble) -> list:
    return [MemberView(ensemble, i) for i in range(ensemble.n_members)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: int
    final_loss: float
    final_accuracy: float
    n_records: int

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "final_loss": self.final_loss,
                "final_accuracy": self.final_accuracy, "n_records": self.n_records}


def _ensemble_accuracy(ensemble: RewardEnsemble, first: torch.Tensor,
                       second: torch.Tensor, labels: torch.Tensor) -> float:
    accs = []
    with torch.no_grad():
        for m in ensemble.members:
            m.eval()
            pred = (_segment_sums(m, second) > _segment_sums(m, first)).long()
            accs.append((pred == labels).double().mean().item())
    return float(np.mean(accs))


def train_on_preferences(ensemble: RewardEnsemble, records: Sequence[PreferenceRecord],
                         epochs: int = 200, batch_size: int = 128,
                         target_accuracy: float = 0.97, patience: int = 25,
                         rng: Optional[np.random.Generator] = None,
                         batch_hook: Optional[Callable[[np.ndarray], None]] = None) -> TrainReport:
    """Fit every ensemble member to the comparison set.

    Members see the same records in member-specific shuffled minibatches.
    Training stops early once the ensemble-mean training accuracy reaches
    ``target_accuracy``, or once it has not improved for ``patience`` epochs,
    in which case the best-seen member weights are restored.  The restore
    matters: the bounded head keeps getting pushed toward saturation by pairs
    it already orders correctly, and once most outputs sit on the rails the
    fine orderings learned earlier quietly erode.
    ``batch_hook`` receives each minibatch's labels just before the gradient
    step; the orchestrator uses it to assert that no label -1 ever reaches
    training.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    f_np, s_np, y_np = records_to_arrays(records, ensemble.input_mode)
    first = _batch_tensor(f_np, ensemble.input_mode, ensemble.dtype, ensemble.device)
    second = _batch_tensor(s_np, ensemble.input_mode, ensemble.dtype, ensemble.device)
    labels = torch.as_tensor(y_np, device=ensemble.device)

    n = first.shape[0]
    last_loss = float("nan")
    epochs_run = 0
    accuracy = _ensemble_accuracy(ensemble, first, second, labels)
    best_accuracy = accuracy
    best_states = None
    stale_epochs = 0
    for epoch in range(epochs):
        if accuracy >= target_accuracy:
            break
        epoch_losses = []
        for m, opt in zip(ensemble.members, ensemble.optimizers):
            m.train()
            perm = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = perm[lo : lo + batch_size]
                if batch_hook is not None:
                    batch_hook(y_np[idx])
                tidx = torch.as_tensor(idx, device=ensemble.device)
                loss = preference_loss(m, first[tidx], second[tidx], labels[tidx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(loss.item())
        epochs_run = epoch + 1
        last_loss = float(np.mean(epoch_losses))
        accuracy = _ensemble_accuracy(ensemble, first, second, labels)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_states = [copy.deepcopy(m.state_dict()) for m in ensemble.members]
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= patience:
                break
    if best_states is not None and accuracy < best_accuracy:
        for m, state in zip(ensemble.members, best_states):
            m.load_state_dict(state)
        accuracy = best_accuracy
    return TrainReport(epochs=epochs_run, final_loss=last_loss,
                       final_accuracy=accuracy, n_records=n)


def train_reward(ensemble: RewardEnsemble, preference_buffer, schedule,
                 batch_size: int = 128, rng: Optional[np.random.Generator] = None,
                 batch_hook: Optional[Callable[[np.ndarray], None]] = None) -> TrainReport:
    """Train the ensemble on a preference buffer's trainable records."""
    records = preference_buffer.trainable_view()
    if len(records) == 0:
        raise ValueError("no preferences")
    return train_on_preferences(ensemble, records,
                                epochs=schedule.reward_update_epochs,
                                batch_size=batch_size, rng=rng, batch_hook=batch_hook)


def train_on_scores(ensemble: RewardEnsemble, segments: Sequence[Segment],
                    scores: Sequence[float], epochs: int = 200,
                    batch_size: int = 128,
                    rng: Optional[np.random.Generator] = None) -> TrainReport:
    """Regress every member onto scalar scores in [0, 1] (score-mode labeler)."""
    if rng is None:
        rng = np.random.default_rng(0)
    if len(segments) == 0:
        raise ValueError("empty batch")
    if len(segments) != len(scores):
        raise ValueError("segment/score length mismatch")
    arr = np.stack([segment_input(s, ensemble.input_mode)[0] for s in segments])
    x = _to_input_tensor(arr, ensemble.input_mode, ensemble.dtype, ensemble.device)
    y = torch.as_tensor(np.asarray(scores, dtype=np.float64), dtype=ensemble.dtype,
                        device=ensemble.device)
    if bool((~torch.isfinite(y)).any()) or bool((y < 0).any()) or bool((y > 1).any()):
        raise ValueError("invalid score")

    n = len(segments)
    last = float("nan")
    epochs_run = 0
    for epoch in range(epochs):
        losses = []
        for m, opt in zip(ensemble.members, ensemble.optimizers):
            m.train()
            perm = rng.permutation(n)
            for lo in range(0, n, batch_size):
                tidx = torch.as_tensor(perm[lo : lo + batch_size], device=ensemble.device)
                loss = score_loss(m, x[tidx], y[tidx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
        epochs_run = epoch + 1
        last = float(np.mean(losses))
        if last < 1e-6:
            break
    return TrainReport(epochs=epochs_run, final_loss=last, final_accuracy=float("nan"),
                       n_records=n)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(member: nn.Module, loss_fn: Callable[[], torch.Tensor],
                            epsilon: float = 1e-5, n_params: int = 24,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between autograd and central differences.

    Probes ``n_params`` randomly chosen scalar parameters.  Use float64
    parameters and inputs; float32 drowns the comparison in rounding noise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = [p for p in member.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    flat_idx = rng.choice(total, size=min(n_params, total), replace=False)

    worst = 0.0
    for fi in sorted(int(i) for i in flat_idx):
        pi, off = 0, fi
        while off >= sizes[pi]:
            off -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[off].item()
            p.view(-1)[off] = orig + epsilon
        up = loss_fn().item()
        with torch.no_grad():
            p.view(-1)[off] = orig - epsilon
        down = loss_fn().item()
        with torch.no_grad():
            p.view(-1)[off] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[pi].view(-1)[off].item()
        # the 1e-5 floor keeps difference noise (~1e-10 in float64) from
        # registering as relative error on near-zero gradient entries
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        worst = max(worst, err)
    return worst


def gradient_check(member: nn.Module, record: PreferenceRecord, epsilon: float = 1e-5,
                   input_mode: str = "state", n_params: int = 24,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Finite-difference check of the preference loss on a single record."""
    f_np, s_np, y_np = records_to_arrays([record], input_mode)
    dtype = next(member.parameters()).dtype
    first = _batch_tensor(f_np, input_mode, dtype, "cpu")
    second = _batch_tensor(s_np, input_mode, dtype, "cpu")
    labels = torch.as_tensor(y_np)
    return finite_difference_check(
        member, lambda: preference_loss(member, first, second, labels),
        epsilon=epsilon, n_params=n_params, rng=rng)
