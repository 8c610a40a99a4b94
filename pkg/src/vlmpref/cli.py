"""Command-line entry points.

Exit codes: 0 success, 1 configuration or input error, 2 external labeling
service failure (the run halts resumably).  Commands that write files refuse
to overwrite existing outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import FeedbackSchedule, PreferenceLog, RunConfig, Segment
from .envs import make_env, scripted_expert
from .orchestrator import TrainingRun, restore_agent
from .rewards import RewardEnsemble, member_views
from .sac import evaluate
from .vlm import (CredentialRejected, HttpBackend, ProviderUnavailable,
                  RateLimiter, ScriptedBackend, SequenceBackend)

VLM_PROVIDERS = ("vlm2stage", "vlm1stage", "vlm-score")


def _parse_schedule(text: str) -> FeedbackSchedule:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("schedule must be M,K,N")
    m, k, n = (int(p) for p in parts)
    return FeedbackSchedule(queries_per_session=m, session_interval_steps=k,
                            total_query_budget=n)


def _parse_resolution(text: str) -> tuple:
    w, h = text.lower().split("x")
    return (int(w), int(h))


def _build_backend(config_path: str):
    cfg = json.loads(Path(config_path).read_text())
    kind = cfg.get("backend", "http")
    limiter = None
    if cfg.get("rate_limit_per_minute"):
        limiter = RateLimiter(int(cfg["rate_limit_per_minute"]))
    if kind == "http":
        backend = HttpBackend(endpoint=cfg["endpoint"],
                              api_key_env=cfg.get("api_key_env", "VLM_API_KEY"),
                              timeout=float(cfg.get("timeout", 120.0)))
    elif kind == "scripted":
        backend = ScriptedBackend(path=cfg["path"])
    elif kind == "sequence":
        backend = SequenceBackend(cfg["responses"])
    else:
        raise ValueError(f"unknown backend kind: {kind}")
    return backend, limiter, cfg


def _guard_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ValueError(f"refusing to overwrite {path} (use --force)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    if args.provider in VLM_PROVIDERS and not args.goal:
        print("goal required for VLM providers", file=sys.stderr)
        return 1
    backend = None
    max_attempts, base_delay = 5, 1.0
    if args.provider in VLM_PROVIDERS:
        if not args.backend_config:
            print("backend config required for VLM providers", file=sys.stderr)
            return 1
        backend, _limiter, bcfg = _build_backend(args.backend_config)
        max_attempts = int(bcfg.get("max_attempts", 5))
        base_delay = float(bcfg.get("base_delay", 1.0))

    schedule = _parse_schedule(args.schedule)
    config = RunConfig(
        env_name=args.env,
        goal_description=args.goal or "",
        provider_name=args.provider,
        schedule=schedule,
        seed=args.seed,
        run_dir=args.run_dir,
        discount=args.discount,
        segment_length=1,
        reward_input_mode=args.reward_input,
        render_resolution=_parse_resolution(args.render_resolution),
        total_steps=args.steps,
        warmup_steps=args.warmup,
        eval_interval=args.eval_interval,
        eval_episodes=args.eval_episodes,
        store_images=not args.no_images,
        tie_epsilon=args.tie_epsilon,
    )
    run = TrainingRun(config, backend=backend, force=args.force,
                      audit_relabel=args.audit_relabel,
                      max_attempts=max_attempts, base_delay=base_delay)
    report = run.train()
    print(json.dumps(report, indent=2))
    return 0


def _cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    config = RunConfig.load(run_dir / "config.json")
    env = make_env(config.env_name, config.render_resolution)
    agent = restore_agent(run_dir)
    result = evaluate(agent, env, episodes=args.episodes, seed=args.seed)
    print(json.dumps({"mean_return": result.mean_return,
                      "success_rate": result.success_rate,
                      "returns": result.returns}, indent=2))
    return 0


def _cmd_analyze_labels(args) -> int:
    run_dir = Path(args.run_dir)
    records = PreferenceLog.read(run_dir)
    if not records:
        print("no records", file=sys.stderr)
        return 1
    from .analysis import bin_accuracy, plot_accuracy_bins

    report = bin_accuracy(records, bins=args.bins)
    out_csv = run_dir / "accuracy_bins.csv"
    _guard_overwrite(out_csv, args.force)
    report.to_csv(out_csv)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    plot_accuracy_bins(report, plots / "accuracy_bins.png")
    print(json.dumps({
        "overall_accuracy": report.overall_accuracy,
        "overall_no_preference_rate": report.overall_no_preference_rate,
        "n_records": report.n_records,
        "csv": str(out_csv),
    }, indent=2))
    return 0


def _rollout_trajectory(env, policy, episodes: int, seed: int, want_images: bool,
                        resolution) -> list:
    rng = np.random.default_rng(seed)
    segments = []
    for ep in range(episodes):
        state = env.reset(rng)
        done = False
        step = 0
        while not done:
            action = policy.select_action(state, deterministic=True)
            result = env.step(action)
            segments.append(Segment(
                states=[result.next_state],
                image=env.render(result.next_state) if want_images else None,
                progress=result.progress, source_episode=ep, source_step=step))
            state = result.next_state
            done = result.done
            step += 1
    return segments


def _cmd_align(args) -> int:
    run_dir = Path(args.run_dir)
    config = RunConfig.load(run_dir / "config.json")
    ensemble = RewardEnsemble.load(run_dir)
    env = make_env(config.env_name, config.render_resolution)
    if args.policy == "scripted":
        policy = scripted_expert(config.env_name)
    else:
        policy = restore_agent(run_dir)
    trajectory = _rollout_trajectory(
        env, policy, episodes=args.episodes, seed=args.seed,
        want_images=(config.reward_input_mode == "image"),
        resolution=config.render_resolution)
    from .analysis import alignment_curve, plot_alignment

    curve = alignment_curve(member_views(ensemble), trajectory)
    out_csv = run_dir / "alignment.csv"
    _guard_overwrite(out_csv, args.force)
    curve.to_csv(out_csv)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    plot_alignment(curve, plots / "alignment.png")
    print(json.dumps({
        "trajectory_length": len(trajectory),
        "constant_learned": curve.constant_learned,
        "csv": str(out_csv),
    }, indent=2))
    return 0


def _cmd_plot(args) -> int:
    from .analysis import learning_curve, plot_learning_curve

    summary = learning_curve(args.run_dirs)
    out = Path(args.out) if args.out else Path(args.run_dirs[0]) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "learning_curve.csv"
    png_path = out / "learning_curve.png"
    _guard_overwrite(csv_path, args.force)
    summary.to_csv(csv_path)
    plot_learning_curve(summary, png_path)
    print(json.dumps({"runs": summary.n_runs, "points": len(summary.steps),
                      "csv": str(csv_path), "png": str(png_path)}, indent=2))
    return 0


def _cmd_cache_audit(args) -> int:
    from .vlm import AuditLog, ResponseCache, VlmChatClient

    run_dir = Path(args.run_dir)
    cache_path = run_dir / VlmChatClient.CACHE_FILE
    audit_path = run_dir / VlmChatClient.AUDIT_FILE
    if not audit_path.exists():
        print("no VLM audit log in run directory", file=sys.stderr)
        return 1
    entries = AuditLog.read(audit_path)
    cache = ResponseCache(cache_path) if cache_path.exists() else ResponseCache()
    cached_keys = set(cache.keys())
    audit_keys = [e["request_hash"] for e in entries]
    misses = [k for k in set(audit_keys) if k not in cached_keys]
    by_template: dict = {}
    for e in entries:
        by_template[e["template_id"]] = by_template.get(e["template_id"], 0) + 1
    print(json.dumps({
        "queries": len(entries),
        "cached_replies": sum(1 for e in entries if e["cached"]),
        "backend_calls": sum(1 for e in entries if not e["cached"]),
        "distinct_requests": len(set(audit_keys)),
        "cache_entries": len(cache),
        "audited_but_uncached": len(misses),
        "by_template": by_template,
    }, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmpref",
        description="Preference-based RL with vision-language feedback")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the full training loop")
    t.add_argument("--env", required=True)
    t.add_argument("--provider", required=True)
    t.add_argument("--goal", default="")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=150_000)
    t.add_argument("--schedule", default="50,5000,10000",
                   help="M,K,N: queries per session, session interval, budget")
    t.add_argument("--reward-input", choices=("state", "image"), default="state")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--backend-config", default="")
    t.add_argument("--discount", type=float, default=0.99)
    t.add_argument("--warmup", type=int, default=1000)
    t.add_argument("--eval-interval", type=int, default=10_000)
    t.add_argument("--eval-episodes", type=int, default=10)
    t.add_argument("--render-resolution", default="128x128")
    t.add_argument("--tie-epsilon", type=float, default=1e-6)
    t.add_argument("--no-images", action="store_true",
                   help="skip rendering when the labeler only needs progress")
    t.add_argument("--audit-relabel", action="store_true",
                   help="verify replay rewards against fresh predictions each session")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate the newest checkpoint of a run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("analyze-labels",
                       help="accuracy of stored labels vs ground-truth progress")
    a.add_argument("--run-dir", required=True)
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=_cmd_analyze_labels)

    g = sub.add_parser("align",
                       help="learned reward vs progress along a rollout")
    g.add_argument("--run-dir", required=True)
    g.add_argument("--episodes", type=int, default=1)
    g.add_argument("--policy", choices=("checkpoint", "scripted"),
                   default="checkpoint")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=_cmd_align)

    p = sub.add_parser("plot", help="aggregate learning curves across runs")
    p.add_argument("--run-dirs", nargs="+", required=True)
    p.add_argument("--out", default="")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_plot)

    c = sub.add_parser("cache-audit", help="summarize the VLM query audit trail")
    c.add_argument("--run-dir", required=True)
    c.set_defaults(fn=_cmd_cache_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage; fold its exit codes into the contract
        return 0 if not e.code else 1
    try:
        return args.fn(args)
    except (ProviderUnavailable, CredentialRejected) as e:
        print(f"labeling service failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, FileExistsError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
