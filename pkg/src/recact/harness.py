"""Inference latency/throughput/memory benchmarking.

The benchmarked path is the same per-timestep pipeline rollout uses: encode
the three tokens, advance the backbone, read the action head, step a
synthetic environment. The cache/hidden state is preserved across episode
boundaries and the first episode is discarded (warm-up/prefill). Attention
history is capped at the configured context: the KV cache is a ring buffer
of 3C tokens, full-recompute re-runs a parallel forward over the window.

OOM behavior is simulated by an analytic memory budget on the cache
allocation so missing-bar results are deterministic and testable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .datastore import DomainConfig
from .policy import Policy, PolicyConfig
from .rollout import WindowState, _window_forward
from .tokenizer import ActionCodec, ModalitySpec, TokenizerConfig, select_action

MODES = ("recurrent", "step-loop", "chunkwise", "kv-cache", "full-recompute")
ATTENTION_MODES = ("kv-cache", "full-recompute")

CSV_HEADER = "backbone,mode,context_timesteps,batch,mean_s,median_s,p95_s,throughput_sps,state_bytes,status"


@dataclass
class BenchConfig:
    backbone_kind: str = "mlstm_only"
    num_blocks: int = 4
    model_dim: int = 128
    num_heads: int = 2
    modes: tuple[str, ...] = ("recurrent", "chunkwise", "kv-cache")
    context_grid: tuple[int, ...] = (50, 200, 800, 1600, 6400)
    batch_grid: tuple[int, ...] = (1,)
    fixed_context: int = 1600  # throughput sweeps batch at this context
    episodes: int = 5
    episode_len: int = 8192
    memory_budget_bytes: int | None = None
    kernel_backend: str | None = None
    checkpoint: str | None = None  # random weights when absent
    seed: int = 0
    obs_dim: int = 8

    def __post_init__(self):
        if not self.context_grid or not self.batch_grid:
            raise ValueError("context and batch grids must be nonempty")
        if self.episodes < 2:
            raise ValueError("need at least 2 episodes (the first is discarded)")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown bench mode {m!r}")


@dataclass
class BenchRecord:
    backbone: str
    mode: str
    context_timesteps: int
    batch: int
    mean_s: float | None
    median_s: float | None
    p95_s: float | None
    throughput_sps: float | None
    state_bytes: int
    status: str = "ok"  # ok | oom
    samples: list = field(default_factory=list, repr=False)

    def csv_row(self) -> str:
        fmt = lambda x: "" if x is None else repr(x)
        return (
            f"{self.backbone},{self.mode},{self.context_timesteps},{self.batch},"
            f"{fmt(self.mean_s)},{fmt(self.median_s)},{fmt(self.p95_s)},"
            f"{fmt(self.throughput_sps)},{self.state_bytes},{self.status}"
        )


class SyntheticStepper:
    """Constant-time environment with a fixed episode length, so measured
    steps include a simulator call."""

    def __init__(self, obs_dim: int, episode_len: int, batch: int):
        self.obs = np.zeros((batch, obs_dim), dtype=np.float32)
        self.episode_len = episode_len
        self.t = 0

    def reset(self):
        self.t = 0
        return self.obs

    def step(self, action):
        self.t += 1
        return self.obs, 0.0, self.t >= self.episode_len


def _bench_policy(cfg: BenchConfig, max_context: int) -> Policy:
    """Random-weights policy shaped for the benchmark (or a checkpoint)."""
    if cfg.checkpoint is not None:
        from .trainer import load_checkpoint

        return load_checkpoint(cfg.checkpoint)[0]
    kind = cfg.backbone_kind
    bcfg = bb.BackboneConfig(
        kind=kind,
        num_blocks=cfg.num_blocks,
        model_dim=cfg.model_dim,
        num_heads=cfg.num_heads,
        slstm_positions=bb.default_slstm_positions(cfg.num_blocks) if kind == "mixed_slstm" else (),
        max_positions=3 * max_context if kind == "attention" else 0,
    )
    codec = ActionCodec(num_discrete=5, num_cont_dims=2)
    dom = DomainConfig(
        domain="synthetic",
        reward_scale=1.0,
        spec=ModalitySpec("vector", raw_dim=cfg.obs_dim),
        action_kind="discrete",
    )
    pcfg = PolicyConfig(
        backbone=bcfg,
        tokenizer=TokenizerConfig(model_dim=cfg.model_dim, padded_dim=cfg.obs_dim, codec=codec),
        domains={"synthetic": dom},
    )
    return Policy(pcfg, np.random.default_rng(cfg.seed))


def analytic_state_bytes(policy: Policy, mode: str, C: int, batch: int) -> int:
    """Steady-state carried-state size for a configuration.

    Attention modes hold 3C tokens of K/V; recurrent modes are measured from
    a live state (constant in C)."""
    bcfg = policy.config.backbone
    itemsize = np.dtype(policy.config.dtype).itemsize
    if mode in ATTENTION_MODES:
        return bb.attention_cache_bytes(bcfg, 3 * C, batch, itemsize)
    return bb.state_bytes(bb.init_state(bcfg, batch, policy.config.dtype))


def run_config(policy: Policy, cfg: BenchConfig, mode: str, C: int, batch: int) -> BenchRecord:
    name = policy.config.backbone.kind
    state_bytes = analytic_state_bytes(policy, mode, C, batch)
    if cfg.memory_budget_bytes is not None and state_bytes > cfg.memory_budget_bytes:
        return BenchRecord(name, mode, C, batch, None, None, None, None, state_bytes, "oom")

    if mode in ("recurrent", "step-loop"):
        step_mode, state = "step", policy.begin(batch)
    elif mode == "chunkwise":
        step_mode, state = "chunkwise", policy.begin(batch)
    elif mode == "kv-cache":
        step_mode, state = "step", policy.begin(batch, cache_capacity=3 * C)
    elif mode == "full-recompute":
        step_mode, state = "window", WindowState()
    else:
        raise ValueError(mode)

    env = SyntheticStepper(cfg.obs_dim, cfg.episode_len, batch)
    codec = policy.config.tokenizer.codec
    dom = next(iter(policy.config.domains.values()))
    samples: list[float] = []
    for episode in range(cfg.episodes):
        obs = env.reset()
        done = False
        target = np.ones(batch)
        while not done:
            t0 = time.perf_counter()
            s_tok = policy.encode_state_np(dom.domain, obs)
            rtg_tok = policy.encode_scalar_np("rtg", target)
            if mode == "full-recompute":
                h = _window_forward(policy, state, [s_tok, rtg_tok], C)
            else:
                h = policy.step_tokens(state, [s_tok, rtg_tok], mode=step_mode, backend=cfg.kernel_backend)
            logits = policy.head_np(h)
            select_action(logits[0], dom.action_kind, codec)
            obs, reward, done = env.step(None)
            rew_tok = policy.encode_scalar_np("rew", np.zeros(batch))
            if mode == "full-recompute":
                state.groups.append([s_tok, rtg_tok, rew_tok])
                state.groups = state.groups[-C:]
            else:
                policy.defer_tokens(state, [rew_tok], mode=step_mode, backend=cfg.kernel_backend)
            if episode > 0:  # first episode excluded: warm-up and prefilling
                samples.append(time.perf_counter() - t0)
    arr = np.sort(np.array(samples))
    mean = float(arr.mean())
    return BenchRecord(
        backbone=name,
        mode=mode,
        context_timesteps=C,
        batch=batch,
        mean_s=mean,
        median_s=float(np.median(arr)),
        p95_s=float(arr[min(int(0.95 * len(arr)), len(arr) - 1)]),
        throughput_sps=batch / mean,
        state_bytes=state_bytes,
        status="ok",
        samples=samples,
    )


def _policy_for(cfg: BenchConfig, mode: str) -> Policy:
    sub = BenchConfig(**{**vars(cfg), "backbone_kind": "attention" if mode in ATTENTION_MODES else cfg.backbone_kind})
    return _bench_policy(sub, max(max(cfg.context_grid), cfg.fixed_context))


def measure_latency(cfg: BenchConfig, progress=None) -> list[BenchRecord]:
    """Per-step latency across the context grid at fixed batch sizes."""
    records = []
    for mode in cfg.modes:
        policy = _policy_for(cfg, mode)
        for batch in cfg.batch_grid:
            for C in cfg.context_grid:
                rec = run_config(policy, cfg, mode, C, batch)
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


def measure_throughput(cfg: BenchConfig, progress=None) -> list[BenchRecord]:
    """Steps/second across the batch grid at the fixed context length."""
    records = []
    for mode in cfg.modes:
        policy = _policy_for(cfg, mode)
        for batch in cfg.batch_grid:
            rec = run_config(policy, cfg, mode, cfg.fixed_context, batch)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


def emit_csv(records: list[BenchRecord], path) -> None:
    from pathlib import Path

    lines = [CSV_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path) -> list[BenchRecord]:
    from pathlib import Path

    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError("unrecognized benchmark CSV header")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        num = lambda s: None if s == "" else float(s)
        out.append(
            BenchRecord(
                backbone=parts[0],
                mode=parts[1],
                context_timesteps=int(parts[2]),
                batch=int(parts[3]),
                mean_s=num(parts[4]),
                median_s=num(parts[5]),
                p95_s=num(parts[6]),
                throughput_sps=num(parts[7]),
                state_bytes=int(parts[8]),
                status=parts[9],
            )
        )
    return out
