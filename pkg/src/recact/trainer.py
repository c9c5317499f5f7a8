"""Behavior-cloning training loop, validation perplexity, checkpoints.

Every optimizer step consumes one micro-batch per domain; per-domain losses
are averaged so each domain contributes equal weight regardless of dataset
size. Checkpoints are versioned binary files with the same framing
discipline as trajectory files and restore training bit-exactly at 64-bit.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import DomainDataset, Trajectory
from .optim import ParamSet, ScheduleConfig, adamw_step, clip_global_norm, lr_at
from .policy import Policy, PolicyConfig

CKPT_MAGIC = b"LRCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    total_updates: int
    batch_per_domain: int = 8
    context_timesteps: int = 20
    peak_lr: float = 3e-4
    final_lr: float = 1e-6
    warmup_steps: int = 500
    clip_norm: float = 0.25
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    dropout: float = 0.0
    seed: int = 0
    include_actions_in_context: bool = False
    eval_every: int = 0  # 0 disables validation perplexity passes
    log_every: int = 100

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            total_steps=self.total_updates,
            peak_lr=self.peak_lr,
            warmup_steps=min(self.warmup_steps, max(self.total_updates - 1, 1)),
            final_lr=self.final_lr,
        )


# published training hyperparameters, for reference and presets
PAPER_TRAIN = dict(
    total_updates=200_000, peak_lr=1e-4, final_lr=1e-6, warmup_steps=4000,
    clip_norm=0.25, weight_decay=0.01, batch_per_domain=128, context_timesteps=50,
    eval_every=50_000,
)


@dataclass
class MetricsRow:
    step: int
    domain: str
    loss: float
    perplexity: float | None
    lr: float


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    lines = ["step,domain,loss,perplexity,lr"]
    for r in rows:
        ppl = repr(r.perplexity) if r.perplexity is not None else ""
        lines.append(f"{r.step},{r.domain},{r.loss!r},{ppl},{r.lr!r}")
    Path(path).write_text("\n".join(lines) + "\n")


class NanLossError(RuntimeError):
    pass


class Trainer:
    def __init__(
        self,
        policy: Policy,
        datasets: list[DomainDataset],
        cfg: TrainConfig,
        val_data: dict[str, list[Trajectory]] | None = None,
    ):
        self.policy = policy
        self.datasets = datasets
        self.cfg = cfg
        self.val_data = val_data or {}
        self.pset = ParamSet(params=policy.params)
        self.sched = cfg.schedule()
        self.rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1) if cfg.dropout > 0 else None
        self.step = 0
        self.metrics: list[MetricsRow] = []
        self._extra_meta: dict = {}
        policy.config.backbone.dropout_rate = cfg.dropout
        policy.config.tokenizer.include_actions = cfg.include_actions_in_context

    def _one_update(self) -> dict[str, float]:
        cfg = self.cfg
        batches = {
            d.cfg.domain: d.sample_batch(cfg.batch_per_domain, cfg.context_timesteps, self.rng)
            for d in self.datasets
        }
        self.pset.zero_grad()
        losses: dict[str, float] = {}
        w = 1.0 / len(batches)
        for name, batch in batches.items():
            loss = self.policy.loss_for_batch(batch, self.dropout_rng)
            val = float(loss.data)
            if not math.isfinite(val):
                raise NanLossError(
                    f"non-finite loss at update {self.step} on domain {name!r} "
                    f"(batch of {batch.states.shape[0]} windows, {int(batch.mask.sum())} real steps)"
                )
            losses[name] = val
            (loss * w).backward()
        for p in self.policy.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        grads = {k: p.grad for k, p in self.policy.params.items()}
        clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(self.step, self.sched)
        adamw_step(self.pset, lr, cfg.weight_decay, cfg.betas, cfg.eps)
        self.policy.invalidate_cache()
        self.step += 1
        return losses

    def run(self, n_updates: int | None = None, progress=None) -> list[MetricsRow]:
        cfg = self.cfg
        target = cfg.total_updates if n_updates is None else self.step + n_updates
        while self.step < target:
            losses = self._one_update()
            if self.step % cfg.log_every == 0 or self.step == target:
                lr = lr_at(self.step - 1, self.sched)
                for name, val in sorted(losses.items()):
                    self.metrics.append(MetricsRow(self.step, name, val, None, lr))
                if progress is not None:
                    progress(self.step, losses)
            if cfg.eval_every and self.step % cfg.eval_every == 0 and self.val_data:
                for name, ppl in sorted(self.perplexity().items()):
                    loss = losses.get(name, float("nan"))
                    self.metrics.append(
                        MetricsRow(self.step, name, loss, ppl, lr_at(self.step - 1, self.sched))
                    )
        return self.metrics

    def perplexity(self) -> dict[str, float]:
        return perplexity(self.policy, self.val_data, self.cfg.context_timesteps)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.policy, self.pset, self.step, self.rng, extra=self._extra_meta)

    @classmethod
    def restore(cls, path, datasets, cfg: TrainConfig, val_data=None) -> "Trainer":
        policy, pset, step, rng_state, _ = load_checkpoint(path)
        t = cls(policy, datasets, cfg, val_data)
        t.pset = pset
        t.step = step
        t.rng = np.random.default_rng()
        t.rng.bit_generator.state = rng_state
        return t


def perplexity(policy: Policy, val_data: dict[str, list[Trajectory]], C: int) -> dict[str, float]:
    """exp(mean per-readout-token cross-entropy) per domain, masked tokens
    excluded. Windows tile each held-out trajectory deterministically."""
    if not val_data or all(not v for v in val_data.values()):
        raise ValueError("empty validation set")
    out = {}
    for name, trajs in val_data.items():
        if not trajs:
            continue
        dom = policy.domain(name)
        total_ce, total_tok = 0.0, 0
        for traj in trajs:
            for start in range(0, traj.length, C):
                end = min(start + C, traj.length)
                window = _window_slice(traj, start, end, C)
                batch = _window_batch(name, window, dom.reward_scale)
                ce = policy.eval_loss(batch)
                n = int(batch.mask.sum())
                total_ce += ce * n
                total_tok += n
        out[name] = math.exp(total_ce / total_tok)
    return out


def _window_slice(traj: Trajectory, start: int, end: int, C: int):
    from .datastore import Window, _pad_left

    mask = np.zeros(C, dtype=bool)
    mask[C - (end - start) :] = True
    return Window(
        states=_pad_left(traj.states[start:end], C),
        actions=_pad_left(traj.actions[start:end], C),
        rewards=_pad_left(traj.rewards[start:end], C),
        rtg=_pad_left(traj.rtg[start:end], C),
        mask=mask,
    )


def _window_batch(domain: str, window, reward_scale: float):
    from .datastore import Batch

    s = 1.0 / reward_scale
    return Batch(
        domain=domain,
        states=window.states[None],
        actions=window.actions[None],
        rewards=window.rewards[None] * s,
        rtg=window.rtg[None] * s,
        mask=window.mask[None],
    )


def select_top_fraction(trajs: list[Trajectory], fraction: float = 0.05) -> list[Trajectory]:
    """Highest-return subset used for fine-tuning data."""
    n = max(1, int(len(trajs) * fraction))
    return sorted(trajs, key=lambda t: t.ret, reverse=True)[:n]


def fine_tune(
    checkpoint_path,
    datasets: list[DomainDataset],
    updates: int,
    cfg: TrainConfig | None = None,
    val_data=None,
) -> Trainer:
    """Full-parameter fine-tuning from a checkpoint with a fresh schedule."""
    policy, _, _, _, _ = load_checkpoint(checkpoint_path)
    total = max(updates, 2)  # schedule needs warmup < total even for 0-update runs
    cfg = cfg or TrainConfig(total_updates=total, warmup_steps=max(updates // 10, 1))
    cfg.total_updates = total
    trainer = Trainer(policy, datasets, cfg, val_data)
    if updates > 0:
        trainer.run(n_updates=updates)
    return trainer


# ---------------------------------------------------------------------------
# checkpoint files


def _w_section(fh, payload: bytes):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(path, policy: Policy, pset: ParamSet, step: int, rng=None, extra=None) -> None:
    names = sorted(policy.params)
    meta = {
        "policy_config": policy.config.to_json(),
        "step": step,
        "opt_step": pset.step,
        "param_names": names,
        "arrays": {n: {"dtype": policy.params[n].data.dtype.str, "shape": list(policy.params[n].shape)} for n in names},
        "rng_state": _jsonify(rng.bit_generator.state) if rng is not None else None,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        _w_section(fh, json.dumps(meta, sort_keys=True).encode())
        for n in names:
            _w_section(fh, np.ascontiguousarray(policy.params[n].data).tobytes())
            _w_section(fh, np.ascontiguousarray(pset.m[n]).tobytes())
            _w_section(fh, np.ascontiguousarray(pset.v[n]).tobytes())


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def load_checkpoint(path):
    from .datastore import BadMagicError, BadVersionError, _read_section

    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    off = 6
    meta_raw, off = _read_section(buf, off, "metadata")
    meta = json.loads(meta_raw.decode())
    config = PolicyConfig.from_json(meta["policy_config"])
    policy = Policy(config)
    pset = ParamSet(params=policy.params)
    pset.step = meta["opt_step"]
    for n in meta["param_names"]:
        info = meta["arrays"][n]
        dt, shape = np.dtype(info["dtype"]), info["shape"]
        if n not in policy.params:
            raise ValueError(f"checkpoint parameter {n!r} does not fit this architecture")
        if list(policy.params[n].shape) != shape:
            raise ValueError(
                f"architecture mismatch for {n!r}: checkpoint {shape}, model {list(policy.params[n].shape)}"
            )
        for target in ("param", "m", "v"):
            payload, off = _read_section(buf, off, f"{n}:{target}")
            arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
            if target == "param":
                policy.params[n].data = arr
            elif target == "m":
                pset.m[n] = arr
            else:
                pset.v[n] = arr
    policy.invalidate_cache()
    rng_state = meta.get("rng_state")
    return policy, pset, meta["step"], rng_state, meta.get("extra", {})
