"""Trajectory storage and batch assembly.

LRTJ files hold one trajectory each: magic "LRTJ", little-endian u16 version,
a length-prefixed JSON metadata block, then length-prefixed raw array
sections (states, actions, rewards, rtg), each followed by its CRC32.
Alongside the files sits a JSON manifest mapping tasks to file paths,
return statistics, and split assignment.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import ModalitySpec

MAGIC = b"LRTJ"
VERSION = 1
SECTIONS = ("states", "actions", "rewards", "rtg")


class TrajectoryFormatError(ValueError):
    """Base class for LRTJ parsing failures."""


class BadMagicError(TrajectoryFormatError):
    pass


class BadVersionError(TrajectoryFormatError):
    pass


class TruncatedFileError(TrajectoryFormatError):
    pass


class ChecksumError(TrajectoryFormatError):
    pass


@dataclass
class Trajectory:
    domain: str
    task: str
    states: np.ndarray  # (T, ...) observations
    actions: np.ndarray  # (T,) int for discrete, (T, act_dims) float otherwise
    rewards: np.ndarray  # (T,)
    rtg: np.ndarray = None  # (T,), derived when not given
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.rewards)
        if not (len(self.states) == len(self.actions) == T):
            raise ValueError("states, actions and rewards must share length")
        if self.rtg is None:
            self.rtg = compute_rtg(self.rewards)
        elif len(self.rtg) != T:
            raise ValueError("rtg length mismatch")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(self.rtg[0]) if self.length else 0.0

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.domain.encode())
        h.update(self.task.encode())
        for arr in (self.states, self.actions, self.rewards):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class DomainConfig:
    domain: str
    reward_scale: float
    spec: ModalitySpec
    action_kind: str  # "discrete" | "continuous"
    act_dims: int = 0
    data_max_return: float = 0.0
    data_random_return: float = 0.0

    def __post_init__(self):
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")


# published per-domain reward scales, kept as presets
PAPER_REWARD_SCALES = {"meta_world": 200.0, "dmcontrol": 100.0, "atari": 20.0}


@dataclass
class SamplerConfig:
    context_timesteps: int = 50
    validation_fraction: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums: rtg_t = r_t + rtg_{t+1}, rtg_T = r_T.

    Computed right to left with no reordering, so the recurrence holds
    bit-exactly on the output.
    """
    rewards = np.asarray(rewards)
    if rewards.size == 0:
        raise ValueError("empty reward sequence")
    return np.cumsum(rewards[::-1])[::-1].copy()


def scale_trajectory(traj: Trajectory, cfg: DomainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scaled (rewards, rtg) view; the trajectory keeps its raw values."""
    s = 1.0 / cfg.reward_scale
    return traj.rewards * s, traj.rtg * s


# ---------------------------------------------------------------------------
# LRTJ files


def _write_section(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def write_trajectory(path, traj: Trajectory) -> None:
    path = Path(path)
    arrays = {
        "states": np.ascontiguousarray(traj.states),
        "actions": np.ascontiguousarray(traj.actions),
        "rewards": np.ascontiguousarray(traj.rewards),
        "rtg": np.ascontiguousarray(traj.rtg),
    }
    meta = {
        "domain": traj.domain,
        "task": traj.task,
        "arrays": {
            name: {"dtype": arr.dtype.str, "shape": list(arr.shape)} for name, arr in arrays.items()
        },
        "extra": traj.meta,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        _write_section(fh, json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name in SECTIONS:
            _write_section(fh, arrays[name].tobytes())


def _read_section(buf: bytes, off: int, what: str) -> tuple[bytes, int]:
    if off + 4 > len(buf):
        raise TruncatedFileError(f"truncated {what} length")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + n + 4 > len(buf):
        raise TruncatedFileError(f"truncated {what} payload")
    payload = buf[off : off + n]
    off += n
    (crc,) = struct.unpack_from("<I", buf, off)
    off += 4
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"checksum mismatch in {what}")
    return payload, off


def read_trajectory(path) -> Trajectory:
    buf = Path(path).read_bytes()
    if len(buf) < 6:
        raise TruncatedFileError("file shorter than header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a trajectory file: {path}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise BadVersionError(f"unsupported trajectory version {version}")
    off = 6
    meta_raw, off = _read_section(buf, off, "metadata")
    meta = json.loads(meta_raw.decode("utf-8"))
    arrays = {}
    for name in SECTIONS:
        payload, off = _read_section(buf, off, name)
        info = meta["arrays"][name]
        arrays[name] = np.frombuffer(payload, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    return Trajectory(
        domain=meta["domain"],
        task=meta["task"],
        states=arrays["states"],
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        rtg=arrays["rtg"],
        meta=meta.get("extra", {}),
    )


def trajectory_file_size(meta_bytes: int, array_bytes: int) -> int:
    """Format arithmetic: header + framed metadata + framed sections."""
    return 6 + (8 + meta_bytes) + 4 * 8 + array_bytes


# ---------------------------------------------------------------------------
# splits


def split(
    tasks: dict[str, list[Trajectory]], cfg: SamplerConfig
) -> tuple[dict[str, list[Trajectory]], dict[str, list[Trajectory]]]:
    """Per-task stratified validation split, deterministic per seed.

    Membership is keyed by content hash, so the split does not depend on the
    order trajectories were listed in. Tiny tasks may end up with an empty
    validation side (floor rule); a warning is emitted.
    """
    train: dict[str, list[Trajectory]] = {}
    val: dict[str, list[Trajectory]] = {}
    seed_bytes = str(cfg.seed).encode()
    for task, trajs in tasks.items():
        keyed = sorted(
            trajs,
            key=lambda t: hashlib.sha256(seed_bytes + bytes.fromhex(t.content_hash())).hexdigest(),
        )
        n_val = int(len(keyed) * cfg.validation_fraction)
        if n_val == 0:
            warnings.warn(f"task {task!r}: too few trajectories for a validation split")
        val[task] = keyed[:n_val]
        train[task] = keyed[n_val:]
    return train, val


# ---------------------------------------------------------------------------
# window sampling


@dataclass
class Window:
    states: np.ndarray  # (C, ...)
    actions: np.ndarray  # (C, ...)
    rewards: np.ndarray  # (C,) raw
    rtg: np.ndarray  # (C,) raw
    mask: np.ndarray  # (C,) bool, False on left padding


def _pad_left(arr: np.ndarray, C: int) -> np.ndarray:
    pad = C - arr.shape[0]
    if pad <= 0:
        return arr
    out = np.zeros((C,) + arr.shape[1:], dtype=arr.dtype)
    out[pad:] = arr
    return out


def sample_window(traj: Trajectory, C: int, rng: np.random.Generator) -> Window:
    """Uniform random end-point; short histories are left-padded and masked."""
    end = int(rng.integers(1, traj.length + 1))
    start = max(0, end - C)
    mask = np.zeros(C, dtype=bool)
    mask[C - (end - start) :] = True
    return Window(
        states=_pad_left(traj.states[start:end], C),
        actions=_pad_left(traj.actions[start:end], C),
        rewards=_pad_left(traj.rewards[start:end], C),
        rtg=_pad_left(traj.rtg[start:end], C),
        mask=mask,
    )


def sample_history_window(episodes: list[Trajectory], C: int, rng: np.random.Generator) -> Window:
    """Window over an ordered multi-episode history (contexts cross episode
    boundaries; per-episode rtg/reward structure is preserved)."""
    lengths = np.array([e.length for e in episodes])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    total = int(offsets[-1])
    end = int(rng.integers(1, total + 1))
    start = max(0, end - C)
    fields = {}
    for name in ("states", "actions", "rewards", "rtg"):
        parts = []
        for i, e in enumerate(episodes):
            lo, hi = int(offsets[i]), int(offsets[i + 1])
            if hi <= start or lo >= end:
                continue
            arr = getattr(e, name)
            parts.append(arr[max(start - lo, 0) : min(end, hi) - lo])
        fields[name] = _pad_left(np.concatenate(parts), C)
    mask = np.zeros(C, dtype=bool)
    mask[C - (end - start) :] = True
    return Window(mask=mask, **fields)


@dataclass
class Batch:
    domain: str
    states: np.ndarray  # (B, C, ...)
    actions: np.ndarray
    rewards: np.ndarray  # (B, C) scaled
    rtg: np.ndarray  # (B, C) scaled
    mask: np.ndarray  # (B, C) bool


def _stack_windows(domain: str, windows: list[Window], scale: float) -> Batch:
    return Batch(
        domain=domain,
        states=np.stack([w.states for w in windows]),
        actions=np.stack([w.actions for w in windows]),
        rewards=np.stack([w.rewards for w in windows]) * scale,
        rtg=np.stack([w.rtg for w in windows]) * scale,
        mask=np.stack([w.mask for w in windows]),
    )


@dataclass
class DomainDataset:
    """Sampling view over one domain's trajectories (or episode histories)."""

    cfg: DomainConfig
    trajectories: list[Trajectory] = field(default_factory=list)
    histories: list[list[Trajectory]] = field(default_factory=list)

    def sample_batch(self, batch: int, C: int, rng: np.random.Generator) -> Batch:
        scale = 1.0 / self.cfg.reward_scale
        windows = []
        if self.histories:
            lengths = np.array([sum(e.length for e in h) for h in self.histories], dtype=np.float64)
            probs = lengths / lengths.sum()
            for _ in range(batch):
                h = self.histories[int(rng.choice(len(self.histories), p=probs))]
                windows.append(sample_history_window(h, C, rng))
        else:
            lengths = np.array([t.length for t in self.trajectories], dtype=np.float64)
            probs = lengths / lengths.sum()  # uniform over transitions
            for _ in range(batch):
                t = self.trajectories[int(rng.choice(len(self.trajectories), p=probs))]
                windows.append(sample_window(t, C, rng))
        return _stack_windows(self.cfg.domain, windows, scale)


def balanced_batches(
    domains: list[DomainDataset],
    per_domain_batch: int,
    C: int,
    seed: int,
):
    """Yield one micro-batch per domain per optimizer step (equal proportion).

    The effective batch is per_domain_batch * len(domains).
    """
    if not domains:
        raise ValueError("need at least one domain")
    for d in domains:
        if not (d.trajectories or d.histories):
            raise ValueError(f"domain {d.cfg.domain!r} has no data")
    rng = np.random.default_rng(seed)
    while True:
        yield {d.cfg.domain: d.sample_batch(per_domain_batch, C, rng) for d in domains}


def effective_batch(per_domain_batch: int, num_domains: int) -> int:
    return per_domain_batch * num_domains


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, tasks: dict[str, dict]) -> None:
    """tasks: task_key -> {domain, files, n_trajectories, max_return, ...}."""
    payload = {"format": "recact-manifest", "version": 1, "tasks": tasks}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != "recact-manifest":
        raise ValueError(f"not a dataset manifest: {path}")
    return data["tasks"]


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
