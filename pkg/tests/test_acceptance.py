"""Acceptance suite. One criterion per test, each printing a PASS/FAIL line
(run with -s to see them on success). The heavy behavioral criteria (7, 8)
train real models and dominate the runtime; see the README for budgets.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import DESK_CODEC, darkroom_domain, pointreach_domain, tiny_policy

import recact.backbone as bb
from recact.datastore import (
    DomainConfig,
    DomainDataset,
    Trajectory,
    balanced_batches,
    compute_rtg,
    effective_batch,
    read_trajectory,
    write_trajectory,
)
from recact.harness import BenchConfig, measure_latency, measure_throughput, run_config, _policy_for
from recact.optim import finite_diff_grad
from recact.policy import Policy, PolicyConfig
from recact.rollout import IclConfig, RolloutConfig, icl_eval, rollout_episode
from recact.tensor import Tensor
from recact.tokenizer import (
    ActionCodec,
    ModalitySpec,
    TokenizerConfig,
    discretize,
    interleave,
    undiscretize,
)
from recact.trainer import TrainConfig, Trainer
from recact.worlds import (
    DarkRoomConfig,
    DarkRoomEnv,
    gen_darkroom_expert,
    generate_learning_history,
    sample_goal_split,
)


def report(num: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"criterion {num}: {detail}"


KIND_ARGS = {
    "mlstm_only": {},
    "mixed_slstm": {"slstm_positions": (1,)},
    "attention": {"max_positions": 300},
}


def _stack(kind, seed, dtype, **kw):
    args = dict(KIND_ARGS[kind])
    args.update(kw)
    cfg = bb.BackboneConfig(kind=kind, num_blocks=2, model_dim=16, num_heads=2, **args)
    params = bb.init_backbone(cfg, np.random.default_rng(seed), dtype)
    return cfg, params


def test_criterion_1_mode_equivalence():
    t0 = time.process_time()
    worst = {}
    for kind in ("mlstm_only", "mixed_slstm", "attention"):
        for i in range(100):
            dtype, tol = (np.float32, 1e-5) if i % 2 == 0 else (np.float64, 1e-9)
            rng = np.random.default_rng(1000 + i)
            cfg, params = _stack(kind, seed=i, dtype=dtype)
            T = int(rng.integers(2, 257))
            x = rng.normal(0, 1, (1, T, 16)).astype(dtype)
            yp = bb.stack_forward(cfg, params, Tensor(x), mode="parallel").data
            st = bb.init_state(cfg, 1, dtype)
            ys, _ = bb.stack_forward(cfg, params, x, mode="step", state=st)
            st2 = bb.init_state(cfg, 1, dtype)
            yc, _ = bb.stack_forward(cfg, params, x, mode="chunkwise", state=st2)
            err = max(np.abs(yp - ys).max(), np.abs(yp - yc).max())
            key = (kind, "f32" if dtype == np.float32 else "f64")
            worst[key] = max(worst.get(key, 0.0), err)
            assert err <= tol, (kind, i, T, err)
    elapsed = time.process_time() - t0
    detail = (
        "parallel==chunkwise==step on 100 random sequences (<=256 tokens) per kind; worst "
        + ", ".join(f"{k[0]}/{k[1]}={v:.2e}" for k, v in sorted(worst.items()))
        + f"; {elapsed:.0f}s CPU"
    )
    report(1, elapsed < 120, detail)


def test_criterion_2_gradient_oracle():
    worst = 0.0
    rng = np.random.default_rng(7)
    kinds = ["mlstm_only"] * 7 + ["mixed_slstm"] * 7 + ["attention"] * 6
    for i, kind in enumerate(kinds):
        heads = int(rng.choice([1, 2]))
        dim = int(rng.choice([4, 8])) * heads
        blocks = int(rng.integers(1, 3))
        args = dict(kind=kind, num_blocks=blocks, model_dim=dim, num_heads=heads)
        if kind == "mixed_slstm":
            args["slstm_positions"] = (blocks - 1,)
        if kind == "attention":
            args["max_positions"] = 32
        cfg = bb.BackboneConfig(**args)
        params = bb.init_backbone(cfg, np.random.default_rng(100 + i), np.float64)
        x = rng.normal(0, 1, (1, int(rng.integers(2, 6)), dim))
        out = bb.stack_forward(cfg, params, Tensor(x), mode="parallel")
        (out * out).sum().backward()
        g_ad = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        abs_err, g_max = 0.0, 0.0
        for name, p in params.items():
            def f(w, p=p):
                old = p.data.copy()
                p.data = w.reshape(p.data.shape)
                o = bb.stack_forward(cfg, params, Tensor(x), mode="parallel")
                val = float((o.data**2).sum())
                p.data = old
                return val

            g_fd = finite_diff_grad(f, p.data.copy().ravel(), 1e-5).reshape(p.data.shape)
            abs_err = max(abs_err, np.abs(g_ad[name] - g_fd).max())
            g_max = max(g_max, np.abs(g_fd).max())
        rel = abs_err / g_max
        worst = max(worst, rel)
        assert rel <= 1e-4, (kind, i, rel)
    report(2, worst <= 1e-4, f"reverse-mode vs central differences (h=1e-5, f64) on 20 configs; worst rel {worst:.2e}")


def test_criterion_3_stability_sweep():
    grid = (-50.0, -25.0, 0.0, 25.0, 50.0)
    rng = np.random.default_rng(3)
    B, H, T, dh = 1, 1, 6, 4
    qkv = [Tensor(rng.normal(0, 1, (B, H, T, dh)), requires_grad=True) for _ in range(3)]
    for iv in grid:
        for fv in grid:
            ig = Tensor(np.full((B, H, T), iv), requires_grad=True)
            fg = Tensor(np.full((B, H, T), fv), requires_grad=True)
            for t in qkv:
                t.grad = None
            out = bb.mlstm_parallel_core(*qkv, ig, fg)
            assert np.isfinite(out.data).all()
            (out * out).sum().backward()
            assert all(np.isfinite(t.grad).all() for t in qkv + [ig, fg])
    for kind in ("mlstm_only", "mixed_slstm"):
        for val in grid:
            cfg, params = _stack(kind, seed=0, dtype=np.float64)
            for name, p in params.items():
                if name.endswith(("bgate", "bpre")):
                    p.data[:] = val
            x = rng.normal(0, 1, (1, 8, 16))
            out = bb.stack_forward(cfg, params, Tensor(x), mode="parallel")
            assert np.isfinite(out.data).all()
            (out * out).sum().backward()
            assert all(p.grad is None or np.isfinite(p.grad).all() for p in params.values())
    report(3, True, "gate preactivations in [-50, 50]: finite outputs and gradients everywhere")


def test_criterion_4_causality():
    rng = np.random.default_rng(4)
    for kind in ("mlstm_only", "mixed_slstm", "attention"):
        cfg, params = _stack(kind, seed=11, dtype=np.float32)
        x = rng.normal(0, 1, (2, 24, 16)).astype(np.float32)
        x2 = x.copy()
        x2[:, 13:] += rng.normal(0, 2, x2[:, 13:].shape).astype(np.float32)
        yp1 = bb.stack_forward(cfg, params, Tensor(x), mode="parallel").data
        yp2 = bb.stack_forward(cfg, params, Tensor(x2), mode="parallel").data
        if kind == "attention":
            assert np.array_equal(yp1[:, :13], yp2[:, :13])
        else:
            assert np.abs(yp1[:, :13] - yp2[:, :13]).max() <= 1e-12
        for mode in ("step", "chunkwise"):
            s1, s2 = bb.init_state(cfg, 2, np.float32), bb.init_state(cfg, 2, np.float32)
            y1, _ = bb.stack_forward(cfg, params, x, mode=mode, state=s1)
            y2, _ = bb.stack_forward(cfg, params, x2, mode=mode, state=s2)
            assert np.abs(y1[:, :13] - y2[:, :13]).max() <= 1e-12, (kind, mode)
    report(4, True, "suffix perturbation leaves prefix outputs unchanged for all kinds and modes")


def test_criterion_5_token_arithmetic():
    D = 4
    for C in (1, 3, 50, 25600):
        toks = [Tensor(np.zeros((1, C, D), np.float32)) for _ in range(3)]
        flat, readout = interleave(*toks)
        assert flat.shape[1] == 3 * C
        assert list(readout[:3]) == [1, 4, 7][: min(C, 3)]
    flat, _ = interleave(*[Tensor(np.zeros((1, 25600, D), np.float32)) for _ in range(3)])
    ok = flat.shape[1] == 76800
    report(5, ok, f"C timesteps -> exactly 3C tokens; C=25600 -> {flat.shape[1]} (expect 76800)")


def test_criterion_6_action_codec():
    paper = ActionCodec(num_discrete=18, num_cont_dims=8)
    desk = ActionCodec(num_discrete=5, num_cont_dims=2)
    rng = np.random.default_rng(6)
    a = rng.uniform(-1, 1, (100_000 // 8, 8))
    back = undiscretize(discretize(a, paper), paper)
    err = np.abs(a - back).max()
    half_bin = (paper.high - paper.low) / (2 * paper.bins_per_dim)
    ok = err <= half_bin and paper.total_classes == 2066 and desk.total_classes == 517
    report(
        6,
        ok,
        f"round-trip error {err:.2e} <= half bin width {half_bin:.2e} on 1e5 actions; "
        f"classes {paper.total_classes} (paper rule) / {desk.total_classes} (desk rule)",
    )


BC_GOAL = (4, 6)


def _bc_policy(seed: int) -> Policy:
    pc = PolicyConfig(
        backbone=bb.BackboneConfig(kind="mlstm_only", num_blocks=2, model_dim=64, num_heads=2),
        tokenizer=TokenizerConfig(model_dim=64, padded_dim=8, codec=DESK_CODEC),
        domains={"darkroom": darkroom_domain()},
    )
    return Policy(pc, np.random.default_rng(seed))


def test_criterion_7_bc_sanity():
    t0 = time.process_time()
    wcfg = DarkRoomConfig(goal=BC_GOAL)
    returns = []
    for seed in range(5):
        data = gen_darkroom_expert(wcfg, episodes=60, eps=0.15, seed=seed)
        policy = _bc_policy(seed)
        ds = DomainDataset(cfg=darkroom_domain(), trajectories=data)
        cfg = TrainConfig(
            total_updates=10_000, batch_per_domain=6, context_timesteps=20,
            seed=seed, warmup_steps=500, log_every=10_000,
        )
        Trainer(policy, [ds], cfg).run()
        rec, _ = rollout_episode(
            DarkRoomEnv(wcfg), policy, "darkroom", RolloutConfig(target_return=80.0)
        )
        returns.append(rec.ret)
        print(f"  [criterion 7] seed {seed}: return {rec.ret}", flush=True)
    elapsed = time.process_time() - t0
    passes = sum(r >= 80.0 for r in returns)
    ok = passes >= 4 and elapsed < 30 * 60
    report(
        7,
        ok,
        f"2-block mLSTM ({_bc_policy(0).num_params()} params), 10K updates/seed: returns {returns} "
        f"with target 80 -> {passes}/5 seeds >= 80; {elapsed / 60:.1f} min CPU (< 30)",
    )


def test_criterion_8_icl_trend():
    t0 = time.process_time()
    train_goals, eval_goals = sample_goal_split(80, 20, seed=0)
    histories = [
        generate_learning_history(DarkRoomConfig(goal=g), 20_000, seed=100 + i)
        for i, g in enumerate(train_goals)
    ]
    ds = DomainDataset(cfg=darkroom_domain(), histories=histories)
    pc = PolicyConfig(
        backbone=bb.BackboneConfig(kind="mlstm_only", num_blocks=2, model_dim=64, num_heads=2),
        tokenizer=TokenizerConfig(model_dim=64, padded_dim=8, codec=DESK_CODEC),
        domains={"darkroom": darkroom_domain()},
    )
    policy = Policy(pc, np.random.default_rng(0))
    cfg = TrainConfig(
        total_updates=4000, batch_per_domain=4, context_timesteps=200,
        seed=0, warmup_steps=200, log_every=500,
    )
    Trainer(policy, [ds], cfg).run(
        progress=lambda s, l: print(f"  [criterion 8] update {s}: loss {l['darkroom']:.4f}", flush=True)
    )
    icl = IclConfig(trials=40, context_timesteps=200, target_return=80.0, strategy="sample", seed=0)
    results = icl_eval(policy, eval_goals, lambda g: DarkRoomEnv(DarkRoomConfig(goal=g)), icl)
    curves = np.array([results[g] for g in eval_goals])
    early = float(curves[:, :10].mean())
    late = float(curves[:, 30:40].mean())
    elapsed = time.process_time() - t0
    ok = late >= 1.2 * early and elapsed < 2 * 3600
    report(
        8,
        ok,
        f"AD on 80 goals, 20 hold-out goals x 40 trials: mean return trials 1-10 {early:.2f}, "
        f"trials 31-40 {late:.2f} ({late / max(early, 1e-9):.2f}x, need >= 1.2x); "
        f"{elapsed / 60:.1f} min CPU (< 120)",
    )


BENCH = dict(num_blocks=4, model_dim=128, num_heads=2, episodes=3, episode_len=1600, seed=0)


def test_criterion_9_inference_scaling():
    t0 = time.process_time()
    rec_cfg = BenchConfig(modes=("recurrent",), context_grid=(50, 6400), **BENCH)
    rec = {r.context_timesteps: r for r in measure_latency(rec_cfg)}
    ratio = rec[6400].mean_s / rec[50].mean_s
    kv_cfg = BenchConfig(modes=("kv-cache",), context_grid=(50, 200, 800, 1600, 6400), **BENCH)
    kv = measure_latency(kv_cfg)
    kv_lat = [r.mean_s for r in kv]
    kv_bytes = [r.state_bytes for r in kv]
    monotone = all(a < b for a, b in zip(kv_lat, kv_lat[1:]))
    base = kv_bytes[0] / kv[0].context_timesteps
    linear = all(b == base * r.context_timesteps for b, r in zip(kv_bytes, kv))
    cmp_cfg = BenchConfig(modes=("step-loop", "chunkwise"), context_grid=(1600,), **BENCH)
    cmp = {r.mode: r for r in measure_latency(cmp_cfg)}
    chunk_ok = cmp["chunkwise"].mean_s <= cmp["step-loop"].mean_s
    elapsed = time.process_time() - t0
    ok = ratio <= 1.3 and monotone and linear and chunk_ok and elapsed < 30 * 60
    report(
        9,
        ok,
        f"recurrent latency C=6400/C=50 ratio {ratio:.3f} (<= 1.3); kv-cache latency "
        f"{['%.2fms' % (x * 1e3) for x in kv_lat]} monotone={monotone}; state_bytes exactly linear={linear}; "
        f"chunkwise {cmp['chunkwise'].mean_s * 1e3:.2f}ms <= step-loop {cmp['step-loop'].mean_s * 1e3:.2f}ms; "
        f"{elapsed / 60:.1f} min CPU (< 30)",
    )


def test_criterion_10_throughput_and_oom():
    cfg = BenchConfig(modes=("recurrent",), batch_grid=(1,), fixed_context=50,
                      num_blocks=4, model_dim=128, num_heads=2, episodes=3, episode_len=200)
    (rec,) = measure_throughput(cfg)
    consistent = abs(rec.throughput_sps * rec.mean_s - 1.0) <= 0.10
    budget = 10_000_000
    oom_cfg = BenchConfig(
        modes=("kv-cache",), context_grid=(50, 200, 800, 1600, 6400),
        memory_budget_bytes=budget, num_blocks=4, model_dim=128, num_heads=2,
        episodes=2, episode_len=50,
    )
    records = measure_latency(oom_cfg)
    expected = ["ok" if r.state_bytes <= budget else "oom" for r in records]
    statuses = [r.status for r in records]
    ok = consistent and statuses == expected and "oom" in statuses
    report(
        10,
        ok,
        f"B=1 throughput x mean latency = {rec.throughput_sps * rec.mean_s:.4f} (within 10% of 1); "
        f"kv-cache under {budget / 1e6:.0f}MB budget: statuses {statuses} match analytic cache sizes",
    )


def test_criterion_11_data_layer(tmp_path):
    rng = np.random.default_rng(11)
    for i in range(1000):
        T = int(rng.integers(1, 24))
        if i % 2 == 0:
            traj = Trajectory(
                domain="darkroom", task=f"t{i % 5}",
                states=rng.normal(size=(T, 2)).astype(np.float32),
                actions=rng.integers(0, 5, T).astype(np.int64),
                rewards=rng.normal(size=T).astype(np.float32),
            )
        else:
            traj = Trajectory(
                domain="pointreach", task=f"p{i % 3}",
                states=rng.normal(size=(T, 4)).astype(np.float32),
                actions=rng.normal(size=(T, 2)).astype(np.float32),
                rewards=rng.normal(size=T).astype(np.float64),
            )
        p = tmp_path / "t.lrtj"
        write_trajectory(p, traj)
        back = read_trajectory(p)
        for name in ("states", "actions", "rewards", "rtg"):
            assert np.array_equal(getattr(traj, name), getattr(back, name))
        assert np.array_equal(traj.rtg[:-1], traj.rewards[:-1] + traj.rtg[1:])
        assert traj.rtg[-1] == traj.rewards[-1]
    d1 = DomainDataset(
        cfg=darkroom_domain(),
        trajectories=[
            Trajectory("darkroom", "a", np.zeros((30, 2), np.float32), np.zeros(30, np.int64), np.ones(30, np.float32))
        ],
    )
    d2 = DomainDataset(
        cfg=pointreach_domain(),
        trajectories=[
            Trajectory("pointreach", "b", np.zeros((9, 4), np.float32), np.zeros((9, 2), np.float32), np.ones(9, np.float32))
        ],
    )
    step = next(balanced_batches([d1, d2], per_domain_batch=4, C=8, seed=0))
    shapes = {k: (v.states.shape[0], v.mask.shape[1]) for k, v in step.items()}
    ok = shapes["darkroom"] == shapes["pointreach"] == (4, 8) and effective_batch(128, 6) == 768
    report(
        11,
        ok,
        "LRTJ round-trip bit-exact on 1000 randomized trajectories; RTG recurrence exact; "
        f"balanced batches equal per-domain slots {shapes}; effective batch (128, 6) -> {effective_batch(128, 6)}",
    )


def test_criterion_12_determinism(tmp_path):
    import json

    from recact.cli import main as cli_main

    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps({"suites": [{"kind": "darkroom_expert", "goal": [3, 2], "episodes": 20}]}))
    assert cli_main(["gen-data", "--config", str(gen_cfg), "--out-dir", str(tmp_path / "data"), "--seed", "0"]) == 0
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(
        json.dumps(
            {
                "model": {"model_dim": 32, "num_blocks": 2, "num_heads": 2},
                "train": {
                    "total_updates": 60, "batch_per_domain": 4, "context_timesteps": 8,
                    "log_every": 10, "warmup_steps": 10,
                },
                "data": {"manifest": str(tmp_path / "data" / "manifest.json")},
            }
        )
    )
    for run in ("run1", "run2"):
        rc = cli_main(
            ["train", "--config", str(train_cfg), "--out-dir", str(tmp_path / run),
             "--seed", "9", "--precision", "f64"]
        )
        assert rc == 0
    b1 = (tmp_path / "run1" / "metrics.csv").read_bytes()
    b2 = (tmp_path / "run2" / "metrics.csv").read_bytes()
    ok = b1 == b2 and len(b1) > 0
    report(12, ok, f"identical config+seed at f64 reproduces metrics.csv bit-identically ({len(b1)} bytes)")
