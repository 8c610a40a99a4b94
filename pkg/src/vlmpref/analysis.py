"""Diagnostics over finished runs: label accuracy, reward alignment, curves.

All numeric results are computed without touching matplotlib; plotting
functions only consume the finished report objects, so numbers are identical
whether or not figures get written.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import PreferenceRecord, Segment


# ---------------------------------------------------------------------------
# label accuracy binned by progress gap
# ---------------------------------------------------------------------------


@dataclass
class AccuracyBinReport:
    bin_edges: np.ndarray          # n_bins + 1 edges over |progress difference|
    correct: np.ndarray            # per-bin counts
    incorrect: np.ndarray
    no_preference: np.ndarray
    n_records: int

    def totals(self) -> np.ndarray:
        return self.correct + self.incorrect + self.no_preference

    def fractions(self) -> np.ndarray:
        """(3, n_bins) rows correct/incorrect/no_preference; NaN for empty bins."""
        tot = self.totals().astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0,
                            np.stack([self.correct, self.incorrect,
                                      self.no_preference]) / tot,
                            np.nan)

    @property
    def overall_accuracy(self) -> float:
        decided = self.correct.sum() + self.incorrect.sum()
        return float(self.correct.sum() / decided) if decided else float("nan")

    @property
    def overall_no_preference_rate(self) -> float:
        return float(self.no_preference.sum() / self.n_records) if self.n_records \
            else float("nan")

    def to_csv(self, path) -> None:
        frac = self.fractions()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "correct", "incorrect", "no_preference",
                        "frac_correct", "frac_incorrect", "frac_no_preference"])
            for i in range(len(self.correct)):
                w.writerow([repr(float(self.bin_edges[i])),
                            repr(float(self.bin_edges[i + 1])),
                            int(self.correct[i]), int(self.incorrect[i]),
                            int(self.no_preference[i]),
                            repr(float(frac[0, i])), repr(float(frac[1, i])),
                            repr(float(frac[2, i]))])


def bin_accuracy(records: Sequence[PreferenceRecord], bins: int = 10) -> AccuracyBinReport:
    """Judge each label against the sign of the ground-truth progress gap.

    Labels of -1 count as no_preference.  A decided label on an exactly tied
    pair counts as incorrect, since the reference labeler would have passed.
    Bins are equal-width and right-closed over the observed |gap| range.
    """
    if len(records) == 0:
        raise ValueError("no records")
    p0 = np.empty(len(records))
    p1 = np.empty(len(records))
    labels = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        if r.first.progress is None or r.second.progress is None:
            raise ValueError("segment missing progress")
        p0[i], p1[i], labels[i] = r.first.progress, r.second.progress, r.label

    gaps = np.abs(p1 - p0)
    gmax = float(gaps.max())
    edges = np.linspace(0.0, gmax if gmax > 0 else 1.0, bins + 1)
    # right-closed bins, except the first which includes its left edge
    idx = np.clip(np.searchsorted(edges, gaps, side="left") - 1, 0, bins - 1)

    correct = np.zeros(bins, dtype=np.int64)
    incorrect = np.zeros(bins, dtype=np.int64)
    no_pref = np.zeros(bins, dtype=np.int64)
    for b, pa, pb, lab in zip(idx, p0, p1, labels):
        if lab == -1:
            no_pref[b] += 1
        elif pb > pa:
            correct[b] += lab == 1
            incorrect[b] += lab == 0
        elif pa > pb:
            correct[b] += lab == 0
            incorrect[b] += lab == 1
        else:
            incorrect[b] += 1
    return AccuracyBinReport(bin_edges=edges, correct=correct, incorrect=incorrect,
                             no_preference=no_pref, n_records=len(records))


# ---------------------------------------------------------------------------
# reward/progress alignment along a trajectory
# ---------------------------------------------------------------------------


def _minmax(series: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(series.min()), float(series.max())
    if hi - lo < 1e-15:
        return np.full_like(series, 0.5, dtype=np.float64), True
    return (series - lo) / (hi - lo), False


@dataclass
class AlignmentCurve:
    steps: np.ndarray
    per_seed: np.ndarray           # (n_ensembles, T) normalized learned rewards
    learned_mean: np.ndarray
    learned_stderr: np.ndarray
    progress_norm: np.ndarray
    constant_learned: list
    constant_progress: bool

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "learned_mean", "learned_stderr", "progress_norm"])
            for i in range(len(self.steps)):
                w.writerow([int(self.steps[i]), repr(float(self.learned_mean[i])),
                            repr(float(self.learned_stderr[i])),
                            repr(float(self.progress_norm[i]))])


def alignment_curve(ensembles: Sequence, trajectory: Sequence[Segment]) -> AlignmentCurve:
    """Normalized learned reward vs normalized progress along one trajectory.

    Each ensemble needs a segment_sum(segment) method.  Per-seed reward series
    are min-max normalized independently, so constant offsets between seeds
    vanish; a constant series maps to all 0.5 and is flagged.
    """
    if len(trajectory) < 2:
        raise ValueError("trajectory too short")
    values = [s.progress for s in trajectory]
    if any(p is None for p in values):
        raise ValueError("segment missing progress")
    progress = np.array(values, dtype=np.float64)

    per_seed = []
    constant_flags = []
    for ens in ensembles:
        raw = np.array([ens.segment_sum(seg) for seg in trajectory], dtype=np.float64)
        norm, constant = _minmax(raw)
        per_seed.append(norm)
        constant_flags.append(constant)
    per_seed = np.stack(per_seed)

    mean = per_seed.mean(axis=0)
    if per_seed.shape[0] > 1:
        stderr = per_seed.std(axis=0, ddof=1) / math.sqrt(per_seed.shape[0])
    else:
        stderr = np.zeros_like(mean)
    progress_norm, progress_constant = _minmax(progress)
    return AlignmentCurve(steps=np.arange(len(trajectory)), per_seed=per_seed,
                          learned_mean=mean, learned_stderr=stderr,
                          progress_norm=progress_norm,
                          constant_learned=constant_flags,
                          constant_progress=progress_constant)


# ---------------------------------------------------------------------------
# learning curves across seeds
# ---------------------------------------------------------------------------


@dataclass
class LearningCurveSummary:
    steps: np.ndarray
    mean_return: np.ndarray
    stderr_return: np.ndarray
    mean_success: np.ndarray
    stderr_success: np.ndarray
    n_runs: int
    env_name: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "mean_return", "stderr_return", "mean_success",
                        "stderr_success"])
            for i in range(len(self.steps)):
                w.writerow([int(self.steps[i]), repr(float(self.mean_return[i])),
                            repr(float(self.stderr_return[i])),
                            repr(float(self.mean_success[i])),
                            repr(float(self.stderr_success[i]))])


def _read_metrics(run_dir: Path):
    rows = []
    with open(run_dir / "metrics.csv", newline="") as f:
        for row in csv.DictReader(f):
            rows.append((int(row["step"]), float(row["mean_eval_return"]),
                         float(row["success_rate"])))
    if not rows:
        raise ValueError(f"empty metrics in {run_dir}")
    rows.sort()
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def learning_curve(run_dirs: Sequence) -> LearningCurveSummary:
    """Mean and standard error of evaluation metrics across seeded runs.

    Runs are interpolated onto the union of evaluation steps, clipped to the
    shortest run, so partial runs only shrink the grid rather than bias it.
    """
    if len(run_dirs) == 0:
        raise ValueError("no runs")
    run_dirs = [Path(d) for d in run_dirs]
    env_names = set()
    for d in run_dirs:
        cfg = json.loads((d / "config.json").read_text())
        env_names.add(cfg["env_name"])
    if len(env_names) != 1:
        raise ValueError("incompatible runs")

    series = [_read_metrics(d) for d in run_dirs]
    max_common = min(s[0].max() for s in series)
    grid = np.unique(np.concatenate([s[0] for s in series]))
    grid = grid[grid <= max_common]

    returns = np.stack([np.interp(grid, s[0], s[1]) for s in series])
    success = np.stack([np.interp(grid, s[0], s[2]) for s in series])
    n = len(series)
    if n > 1:
        se_r = returns.std(axis=0, ddof=1) / math.sqrt(n)
        se_s = success.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se_r = np.zeros(len(grid))
        se_s = np.zeros(len(grid))
    return LearningCurveSummary(steps=grid, mean_return=returns.mean(axis=0),
                                stderr_return=se_r, mean_success=success.mean(axis=0),
                                stderr_success=se_s, n_runs=n,
                                env_name=env_names.pop())


# ---------------------------------------------------------------------------
# plotting (side effects only)
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_run_curve(eval_rows: Sequence[dict], path) -> None:
    plt = _pyplot()
    steps = [r["step"] for r in eval_rows]
    returns = [r["mean_eval_return"] for r in eval_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, returns, marker="o", ms=3)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean evaluation return")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_learning_curve(summary: LearningCurveSummary, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(summary.steps, summary.mean_return, label=f"mean ({summary.n_runs} runs)")
    ax.fill_between(summary.steps,
                    summary.mean_return - summary.stderr_return,
                    summary.mean_return + summary.stderr_return, alpha=0.25)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean evaluation return")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy_bins(report: AccuracyBinReport, path) -> None:
    plt = _pyplot()
    frac = report.fractions()
    centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
    width = float(report.bin_edges[1] - report.bin_edges[0]) * 0.8
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(centers))
    for row, label, color in zip(frac, ["correct", "incorrect", "no preference"],
                                 ["tab:green", "tab:red", "tab:gray"]):
        vals = np.nan_to_num(row)
        ax.bar(centers, vals, width=width, bottom=bottom, label=label, color=color)
        bottom += vals
    ax.set_xlabel("|progress difference|")
    ax.set_ylabel("fraction of labels")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_alignment(curve: AlignmentCurve, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.steps, curve.progress_norm, label="task progress", lw=2)
    ax.plot(curve.steps, curve.learned_mean, label="learned reward", lw=2)
    ax.fill_between(curve.steps,
                    curve.learned_mean - curve.learned_stderr,
                    curve.learned_mean + curve.learned_stderr, alpha=0.25)
    ax.set_xlabel("trajectory step")
    ax.set_ylabel("normalized value")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
