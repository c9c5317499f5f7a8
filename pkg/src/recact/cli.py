"""Command-line entry point.

Subcommands: gen-data, train, eval, icl-eval, bench, plot, export-embeddings.
Every run takes --config (JSON), --seed, --precision, --out-dir and writes a
resolved-config snapshot next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone as bb
from .datastore import (
    DomainConfig,
    DomainDataset,
    SamplerConfig,
    Trajectory,
    read_manifest,
    read_trajectory,
    split,
    write_manifest,
    write_trajectory,
)
from .harness import BenchConfig, measure_latency, measure_throughput, read_records_csv
from .policy import Policy, PolicyConfig
from .rollout import (
    IclConfig,
    RolloutConfig,
    aggregate,
    export_embeddings,
    icl_eval,
    normalized_score,
    rollout_episode,
    write_embeddings_csv,
)
from .tokenizer import ActionCodec, ModalitySpec, TokenizerConfig
from .trainer import Trainer, TrainConfig, load_checkpoint, write_metrics_csv
from .worlds import (
    DarkRoomConfig,
    DarkRoomEnv,
    PointReachConfig,
    PointReachEnv,
    gen_darkroom_expert,
    gen_pointreach_expert,
    generate_learning_history,
    measure_random_return,
    sample_goal_split,
)

DESK_CODEC = dict(num_discrete=5, num_cont_dims=2, bins_per_dim=256, low=-1.0, high=1.0)

DOMAIN_PRESETS = {
    "darkroom": dict(reward_scale=100.0, spec_kind="vector", raw_dim=2, action_kind="discrete", act_dims=0),
    "pointreach": dict(reward_scale=1.0, spec_kind="vector", raw_dim=4, action_kind="continuous", act_dims=2),
}


class CliError(RuntimeError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command.replace('-', '_')}_resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True, default=str)
    )


def _domain_config(name: str, stats: dict | None = None) -> DomainConfig:
    if name not in DOMAIN_PRESETS:
        raise CliError(f"unknown domain {name!r} (presets: {sorted(DOMAIN_PRESETS)})")
    p = DOMAIN_PRESETS[name]
    spec = ModalitySpec(p["spec_kind"], raw_dim=p["raw_dim"])
    stats = stats or {}
    return DomainConfig(
        domain=name,
        reward_scale=p["reward_scale"],
        spec=spec,
        action_kind=p["action_kind"],
        act_dims=p["act_dims"],
        data_max_return=stats.get("max_return", 0.0),
        data_random_return=stats.get("random_return", 0.0),
    )


def _build_policy(model: dict, domains: dict[str, DomainConfig], precision: str, seed: int) -> Policy:
    dim = model.get("model_dim", 64)
    kind = model.get("kind", "mlstm_only")
    blocks = model.get("num_blocks", 2)
    heads = model.get("num_heads", 2)
    slstm = model.get("slstm_positions")
    if slstm is None and kind == "mixed_slstm":
        slstm = bb.default_slstm_positions(blocks)
    bcfg = bb.BackboneConfig(
        kind=kind,
        num_blocks=blocks,
        model_dim=dim,
        num_heads=heads,
        slstm_positions=tuple(slstm or ()),
        max_positions=model.get("max_positions", 4096 if kind == "attention" else 0),
    )
    tcfg = TokenizerConfig(
        model_dim=dim,
        padded_dim=model.get("padded_dim", 8),
        codec=ActionCodec(**model.get("codec", DESK_CODEC)),
        image=model.get("image", False),
        include_actions=model.get("include_actions", False),
    )
    pcfg = PolicyConfig(backbone=bcfg, tokenizer=tcfg, domains=domains, precision=precision)
    return Policy(pcfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    tasks: dict[str, dict] = {}
    suites = cfg.get("suites") or [{"kind": "darkroom_expert", "goal": [4, 6], "episodes": 60}]
    for suite in suites:
        kind = suite["kind"]
        if kind == "darkroom_expert":
            wcfg = DarkRoomConfig(goal=tuple(suite["goal"]))
            trajs = gen_darkroom_expert(wcfg, suite.get("episodes", 60), suite.get("eps", 0.15), seed)
            _store_task(out, tasks, "darkroom", trajs, goal=suite["goal"], split="train",
                        random_seed=seed, make_env=lambda: DarkRoomEnv(wcfg))
        elif kind == "pointreach_expert":
            for goal in suite.get("goals", [[0.5, 0.5]]):
                wcfg = PointReachConfig(goal=tuple(goal))
                trajs = gen_pointreach_expert(wcfg, suite.get("episodes", 40), suite.get("noise", 0.05), seed)
                _store_task(out, tasks, "pointreach", trajs, goal=goal, split="train",
                            random_seed=seed, make_env=lambda: PointReachEnv(wcfg))
        elif kind == "darkroom_ad":
            train_goals, eval_goals = sample_goal_split(
                suite.get("n_train_goals", 80), suite.get("n_eval_goals", 20), suite.get("goal_seed", seed)
            )
            budget = suite.get("budget", 20_000)
            for i, goal in enumerate(train_goals):
                wcfg = DarkRoomConfig(goal=goal)
                hist = generate_learning_history(wcfg, budget, seed=seed + i)
                _store_task(out, tasks, "darkroom", hist, goal=list(goal), split="train",
                            history=True, random_seed=None, make_env=None)
            for goal in eval_goals:
                tasks[f"darkroom_{goal[0]}_{goal[1]}"] = {
                    "domain": "darkroom", "files": [], "goal": list(goal),
                    "split": "eval", "history": False, "n_trajectories": 0,
                }
        else:
            raise CliError(f"unknown gen-data suite kind: {kind!r}")
    write_manifest(out / "manifest.json", tasks)
    print(f"wrote {sum(t['n_trajectories'] for t in tasks.values())} trajectories, "
          f"{len(tasks)} tasks -> {out / 'manifest.json'}")
    return 0


def _store_task(out, tasks, domain, trajs, goal, split, random_seed, make_env, history=False):
    task = trajs[0].task
    tdir = out / task
    tdir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, t in enumerate(trajs):
        rel = f"{task}/ep{i:05d}.lrtj"
        write_trajectory(out / rel, t)
        files.append(rel)
    rets = [t.ret for t in trajs]
    info = {
        "domain": domain,
        "files": files,
        "goal": goal,
        "split": split,
        "history": history,
        "n_trajectories": len(trajs),
        "max_return": float(max(rets)),
        "mean_return": float(np.mean(rets)),
    }
    if make_env is not None:
        info["random_return"] = measure_random_return(make_env, episodes=100, seed=random_seed)
    tasks[task] = info


# ---------------------------------------------------------------------------
# manifest loading


def _load_manifest_tasks(manifest_path) -> tuple[Path, dict]:
    p = Path(manifest_path)
    if not p.exists():
        raise CliError(f"dataset manifest not found: {p}")
    return p.parent, read_manifest(p)


def _load_task_trajectories(root: Path, info: dict) -> list[Trajectory]:
    return [read_trajectory(root / rel) for rel in info["files"]]


def _datasets_from_manifest(
    manifest_path, validation_fraction: float, seed: int
) -> tuple[list[DomainDataset], dict[str, list[Trajectory]], dict[str, DomainConfig]]:
    root, tasks = _load_manifest_tasks(manifest_path)
    by_domain: dict[str, DomainDataset] = {}
    val_by_domain: dict[str, list[Trajectory]] = {}
    domain_cfgs: dict[str, DomainConfig] = {}
    for name, info in sorted(tasks.items()):
        if info.get("split") != "train" or not info["files"]:
            continue
        domain = info["domain"]
        if domain not in by_domain:
            dom_cfg = _domain_config(domain, info)
            domain_cfgs[domain] = dom_cfg
            by_domain[domain] = DomainDataset(cfg=dom_cfg)
            val_by_domain[domain] = []
        trajs = _load_task_trajectories(root, info)
        domain_cfgs[domain].data_max_return = max(domain_cfgs[domain].data_max_return, info["max_return"])
        if info.get("history"):
            by_domain[domain].histories.append(trajs)
        elif validation_fraction > 0 and len(trajs) >= 2:
            tr, va = split({name: trajs}, SamplerConfig(validation_fraction=validation_fraction, seed=seed))
            by_domain[domain].trajectories.extend(tr[name])
            val_by_domain[domain].extend(va[name])
        else:
            by_domain[domain].trajectories.extend(trajs)
    if not by_domain:
        raise CliError(f"no train-split tasks with files in manifest {manifest_path}")
    return list(by_domain.values()), val_by_domain, domain_cfgs


# ---------------------------------------------------------------------------
# train


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    manifest = cfg.get("data", {}).get("manifest")
    if manifest is None:
        raise CliError("train config needs data.manifest")
    tcfg_dict = dict(cfg.get("train", {}))
    tcfg_dict.setdefault("seed", args.seed)
    tcfg = TrainConfig(**tcfg_dict)
    datasets, val_data, domain_cfgs = _datasets_from_manifest(
        manifest, cfg.get("data", {}).get("validation_fraction", 0.025), tcfg.seed
    )
    policy = _build_policy(cfg.get("model", {}), domain_cfgs, args.precision, tcfg.seed)
    print(f"model: {policy.config.backbone.kind}, {policy.num_params()} parameters")
    trainer = Trainer(policy, datasets, tcfg, val_data)
    trainer._extra_meta = {"manifest": str(manifest)}

    def progress(step, losses):
        msg = " ".join(f"{k}={v:.4f}" for k, v in sorted(losses.items()))
        print(f"update {step}/{tcfg.total_updates}  {msg}", flush=True)

    trainer.run(progress=progress)
    write_metrics_csv(out / "metrics.csv", trainer.metrics)
    trainer.save(out / "checkpoint.lrck")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.lrck'}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    policy, _, _, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    root, tasks = _load_manifest_tasks(_require(cfg, "manifest"))
    episodes = cfg.get("episodes", 3)
    mode = cfg.get("mode", "recurrent")
    rows = ["task,domain,episode,ret,normalized,target_return,mode"]
    per_task_scores = []
    for name, info in sorted(tasks.items()):
        if info.get("split") != "train" or not info["files"] or info.get("history"):
            continue
        dom = policy.domain(info["domain"])
        target = cfg.get("target_return", info["max_return"])
        stats_dom = DomainConfig(
            domain=dom.domain, reward_scale=dom.reward_scale, spec=dom.spec,
            action_kind=dom.action_kind, act_dims=dom.act_dims,
            data_max_return=info["max_return"], data_random_return=info.get("random_return", 0.0),
        )
        scores = []
        for ep in range(episodes):
            env = _env_for(info)
            rcfg = RolloutConfig(target_return=target, mode=mode, strategy=cfg.get("strategy", "argmax"))
            rec, _ = rollout_episode(env, policy, info["domain"], rcfg, rng=np.random.default_rng((args.seed, ep)))
            ns = normalized_score(rec.ret, stats_dom)
            scores.append(ns)
            rows.append(f"{name},{info['domain']},{ep},{rec.ret!r},{ns!r},{target!r},{mode}")
        per_task_scores.append(float(np.mean(scores)))
    (out / "eval.csv").write_text("\n".join(rows) + "\n")
    agg = aggregate([per_task_scores])
    print(f"normalized score over {len(per_task_scores)} tasks: {agg.mean:.3f} (CI: {agg.ci_halfwidth})")
    print(f"wrote {out / 'eval.csv'}")
    return 0


def _env_for(info: dict):
    if info["domain"] == "darkroom":
        return DarkRoomEnv(DarkRoomConfig(goal=tuple(info["goal"])))
    return PointReachEnv(PointReachConfig(goal=tuple(info["goal"])))


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise CliError(f"config is missing required key {key!r}")
    return cfg[key]


# ---------------------------------------------------------------------------
# icl-eval


def cmd_icl_eval(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    policy, _, _, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    icl = IclConfig(
        trials=cfg.get("trials", 40),
        context_timesteps=cfg.get("context_timesteps", 200),
        target_return=cfg.get("target_return", 80.0),
        mode=cfg.get("mode", "recurrent"),
        strategy=cfg.get("strategy", "sample"),
        temperature=cfg.get("temperature", 1.0),
        seed=args.seed,
    )
    if "goals" in cfg:
        goals = [tuple(g) for g in cfg["goals"]]
    else:
        _, tasks = _load_manifest_tasks(_require(cfg, "manifest"))
        goals = [tuple(i["goal"]) for i in tasks.values() if i.get("split") == "eval"]
        if not goals:
            raise CliError("manifest has no eval-split goals; pass goals explicitly")
    results = icl_eval(policy, goals, lambda g: DarkRoomEnv(DarkRoomConfig(goal=g)), icl)
    rows = ["goal_x,goal_y,trial,ret"]
    for goal, rets in sorted(results.items()):
        for i, r in enumerate(rets):
            rows.append(f"{goal[0]},{goal[1]},{i},{r!r}")
    (out / "icl.csv").write_text("\n".join(rows) + "\n")
    curves = np.array([results[g] for g in sorted(results)])
    early, late = curves[:, :10].mean(), curves[:, -10:].mean()
    print(f"{len(goals)} goals x {icl.trials} trials: mean return trials 1-10 {early:.2f}, "
          f"trials {icl.trials - 9}-{icl.trials} {late:.2f}")
    print(f"wrote {out / 'icl.csv'}")
    return 0


# ---------------------------------------------------------------------------
# bench / plot / export


def cmd_bench(args, cfg: dict) -> int:
    from .plotting import emit

    out = Path(args.out_dir)
    sweep = cfg.pop("sweep", "latency")
    bcfg_fields = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
    bcfg = BenchConfig(seed=args.seed, **bcfg_fields)
    progress = lambda r: print(
        f"  {r.backbone}/{r.mode} C={r.context_timesteps} B={r.batch}: "
        + (f"{r.mean_s * 1e3:.2f} ms/step" if r.status == "ok" else r.status), flush=True,
    )
    written = []
    if sweep in ("latency", "both"):
        records = measure_latency(bcfg, progress)
        written += emit(records, out, "bench_latency")
    if sweep in ("throughput", "both"):
        records = measure_throughput(bcfg, progress)
        written += emit(records, out, "bench_throughput")
    if not written:
        raise CliError(f"unknown sweep {sweep!r} (latency | throughput | both)")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_plot(args, cfg: dict) -> int:
    from .plotting import emit

    csv = Path(_require(cfg, "csv"))
    if not csv.exists():
        raise CliError(f"benchmark CSV not found: {csv}")
    records = read_records_csv(csv)
    for p in emit(records, Path(args.out_dir), csv.stem):
        print(f"wrote {p}")
    return 0


def cmd_export_embeddings(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    policy, _, _, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    root, tasks = _load_manifest_tasks(_require(cfg, "manifest"))
    table = {}
    for name, info in sorted(tasks.items()):
        if not info["files"]:
            continue
        table[name] = (info["domain"], _load_task_trajectories(root, info))
    rows = export_embeddings(
        policy, table, per_task=cfg.get("per_task", 32), window=cfg.get("window", 50), seed=args.seed
    )
    write_embeddings_csv(out / "embeddings.csv", rows)
    print(f"wrote {len(rows)} rows -> {out / 'embeddings.csv'}")
    return 0


# ---------------------------------------------------------------------------


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "icl-eval": cmd_icl_eval,
    "bench": cmd_bench,
    "plot": cmd_plot,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="recact", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", choices=("f32", "f64"), default="f32")
        p.add_argument("--out-dir", default="out")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        resolved = {"command": args.command, "seed": args.seed, "precision": args.precision,
                    "out_dir": args.out_dir, "config": cfg}
        _snapshot(Path(args.out_dir), args.command, resolved)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
