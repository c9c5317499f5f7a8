"""Return-conditioned online evaluation.

Per timestep the policy consumes the state token and the return-to-go token,
its action logits are read at the return-to-go position, the action is
executed, and the (scaled) reward token is fed afterwards. The raw target
return decrements by the observed reward, floored at zero. Recurrent modes
carry constant-size state; `window` mode re-runs a parallel forward over the
most recent timesteps instead (the sliding-window attention baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .datastore import DomainConfig, Trajectory, sample_window
from .policy import Policy, PolicyState
from .tensor import Tensor, no_grad
from .tokenizer import select_action

MODE_ALIASES = {
    "recurrent": "step",
    "step": "step",
    "step-loop": "step",
    "chunkwise": "chunkwise",
    "window": "window",
    "parallel-sliding-window": "window",
}


@dataclass
class RolloutConfig:
    target_return: float  # raw units; scaled just before tokenization
    mode: str = "recurrent"
    episodes: int = 3
    strategy: str = "argmax"
    temperature: float = 1.0
    window_timesteps: int = 50  # window mode only
    backend: str | None = None

    def __post_init__(self):
        if self.mode not in MODE_ALIASES:
            raise ValueError(f"unknown rollout mode: {self.mode!r}")


@dataclass
class EpisodeRecord:
    ret: float
    length: int
    actions: list
    rewards: list[float]
    rtg_trace: list[float]  # raw target before each step


@dataclass
class WindowState:
    """Token groups per timestep for the sliding-window parallel mode."""

    groups: list[list[np.ndarray]] = field(default_factory=list)
    tokens: int = 0


def _window_forward(policy: Policy, ws: WindowState, current: list[np.ndarray], W: int) -> np.ndarray:
    toks = [t for g in ws.groups[-(W - 1) :] for t in g] + current if W > 1 else list(current)
    x = np.concatenate(toks, axis=1)
    with no_grad():
        y = bb.stack_forward(policy.config.backbone, policy.params, Tensor(x), mode="parallel")
    return y.data[:, -1]


def rollout_episode(
    env,
    policy: Policy,
    domain: str,
    cfg: RolloutConfig,
    state: PolicyState | WindowState | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[EpisodeRecord, PolicyState | WindowState]:
    """Run one episode; the carried state is returned for continuation."""
    mode = MODE_ALIASES[cfg.mode]
    dom = policy.domain(domain)
    scale = 1.0 / dom.reward_scale
    if state is None:
        state = WindowState() if mode == "window" else policy.begin(batch=1)
    obs = env.reset()
    target = float(cfg.target_return)
    actions, rewards, trace = [], [], []
    done = False
    while not done:
        trace.append(target)
        s_tok = policy.encode_state_np(domain, obs[None])
        rtg_tok = policy.encode_scalar_np("rtg", np.array([target * scale]))
        if mode == "window":
            h = _window_forward(policy, state, [s_tok, rtg_tok], cfg.window_timesteps)
        else:
            h = policy.step_tokens(state, [s_tok, rtg_tok], mode=mode, backend=cfg.backend)
        logits = policy.head_np(h)[0]
        action = select_action(
            logits, dom.action_kind, policy.config.tokenizer.codec,
            act_dims=dom.act_dims, strategy=cfg.strategy, temperature=cfg.temperature, rng=rng,
        )
        step = env.step(action)
        extra = []
        if policy.config.tokenizer.include_actions:
            extra.append(policy.encode_action_np(domain, np.asarray([action])))
        rew_tok = policy.encode_scalar_np("rew", np.array([step.reward * scale]))
        extra.append(rew_tok)
        if mode == "window":
            state.groups.append([s_tok, rtg_tok, *extra])
            state.tokens += 2 + len(extra)
        else:
            policy.defer_tokens(state, extra, mode=mode, backend=cfg.backend)
        actions.append(action)
        rewards.append(float(step.reward))
        target = max(target - float(step.reward), 0.0)
        obs = step.observation
        done = step.done
    return EpisodeRecord(sum(rewards), len(rewards), actions, rewards, trace), state


# ---------------------------------------------------------------------------
# in-context-learning protocol


@dataclass
class IclConfig:
    trials: int = 40
    context_timesteps: int = 200  # two episodes' worth; window mode keeps this much
    target_return: float = 80.0
    mode: str = "recurrent"
    strategy: str = "sample"  # exploration across trials matters here
    temperature: float = 1.0
    seed: int = 0
    backend: str | None = None


def icl_eval(policy: Policy, goals, make_env, icl: IclConfig, domain: str = "darkroom") -> dict:
    """Per goal: sequential trials with the carried context never reset at
    episode boundaries. Returns {goal: [return per trial]}."""
    results = {}
    for goal in goals:
        rng = np.random.default_rng((icl.seed, hash(goal) & 0xFFFF))
        rcfg = RolloutConfig(
            target_return=icl.target_return,
            mode=icl.mode,
            strategy=icl.strategy,
            temperature=icl.temperature,
            window_timesteps=icl.context_timesteps,
            backend=icl.backend,
        )
        state = None
        rets = []
        tokens_before = 0
        for _ in range(icl.trials):
            rec, state = rollout_episode(make_env(goal), policy, domain, rcfg, state=state, rng=rng)
            seen = state.tokens if isinstance(state, WindowState) else state.tokens_seen
            assert seen > tokens_before, "carried context must persist across episodes"
            tokens_before = seen
            if isinstance(state, WindowState):
                state.groups = state.groups[-icl.context_timesteps :]
            rets.append(rec.ret)
        results[goal] = rets
    return results


# ---------------------------------------------------------------------------
# scores


def normalized_score(raw_return: float, dom: DomainConfig) -> float:
    """(R - R_random) / (R_max_data - R_random)."""
    denom = dom.data_max_return - dom.data_random_return
    if denom <= 0:
        raise ValueError(f"degenerate normalization for domain {dom.domain!r}")
    return (raw_return - dom.data_random_return) / denom


@dataclass
class AggregateResult:
    mean: float
    ci_halfwidth: float | None  # absent with fewer than 2 seeds
    method: str = "normal-approx-95"


def aggregate(seed_scores: list) -> AggregateResult:
    """Mean over per-seed score collections with a 95% CI over seeds.

    Each element is one training seed's scores (scalar or per-task list);
    tasks are averaged within a seed first."""
    means = [float(np.mean(s)) for s in seed_scores]
    mean = float(np.mean(means))
    if len(means) < 2:
        return AggregateResult(mean, None)
    sd = float(np.std(means, ddof=1))
    return AggregateResult(mean, 1.96 * sd / math.sqrt(len(means)))


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(
    policy: Policy,
    tasks: dict[str, tuple[str, list[Trajectory]]],
    per_task: int = 32,
    window: int = 50,
    seed: int = 0,
) -> list[tuple[str, str, np.ndarray]]:
    """Mean-pooled last-layer hidden states of sampled sub-trajectories.

    tasks: task_id -> (domain, trajectories). Returns per-sample rows
    (task, domain, pooled vector of model_dim)."""
    rng = np.random.default_rng(seed)
    rows = []
    for task, (domain, trajs) in sorted(tasks.items()):
        dom = policy.domain(domain)
        scale = 1.0 / dom.reward_scale
        lengths = np.array([t.length for t in trajs], dtype=np.float64)
        probs = lengths / lengths.sum()
        for _ in range(per_task):
            traj = trajs[int(rng.choice(len(trajs), p=probs))]
            w = sample_window(traj, window, rng)
            from .datastore import Batch

            batch = Batch(
                domain=domain,
                states=w.states[None],
                actions=w.actions[None],
                rewards=w.rewards[None] * scale,
                rtg=w.rtg[None] * scale,
                mask=w.mask[None],
            )
            with no_grad():
                hidden = _batch_hidden(policy, batch)
            tok_mask = np.repeat(batch.mask, policy.config.tokenizer.tokens_per_step, axis=1)
            pooled = hidden[0][tok_mask[0]].mean(axis=0)
            rows.append((task, domain, pooled))
    return rows


def _batch_hidden(policy: Policy, batch) -> np.ndarray:
    from .tokenizer import encode_actions, encode_scalars, encode_states, expand_mask, interleave

    cfg = policy.config
    dom = policy.domain(batch.domain)
    s_tok = encode_states(policy.params, dom.spec, batch.states, cfg.tokenizer)
    rtg_tok = encode_scalars(policy.params, "enc.rtg", batch.rtg, cfg.tokenizer)
    rew_tok = encode_scalars(policy.params, "enc.rew", batch.rewards, cfg.tokenizer)
    act_tok = None
    if cfg.tokenizer.include_actions:
        act_tok = encode_actions(policy.params, dom.action_kind, batch.actions, cfg.tokenizer)
    stream, _ = interleave(s_tok, rtg_tok, rew_tok, act_tok)
    tok_mask = expand_mask(batch.mask, cfg.tokenizer.tokens_per_step)
    hidden = bb.stack_forward(cfg.backbone, policy.params, stream, mask=tok_mask, mode="parallel")
    return hidden.data


def write_embeddings_csv(path, rows) -> None:
    if not rows:
        raise ValueError("no embedding rows to write")
    dim = len(rows[0][2])
    header = "task,domain," + ",".join(f"e{i}" for i in range(dim))
    lines = [header]
    for task, domain, vec in rows:
        lines.append(f"{task},{domain}," + ",".join(repr(float(x)) for x in vec))
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")
