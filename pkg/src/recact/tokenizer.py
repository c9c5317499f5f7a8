"""Trajectory-to-token-stream conversion and the unified action head.

Each timestep becomes three tokens (state, return-to-go, reward); actions are
not part of the input stream by default and are predicted from the hidden
state at the return-to-go token. An optional ablation mode reintroduces
action tokens (4 tokens per timestep). Continuous actions are discretized
into uniform bins and share one classification head with discrete actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    index_rows,
    log_softmax,
    matmul,
    relu,
    reshape,
    take_along,
    transpose,
    tsum,
)

IMG_CHANNELS = (16, 32)  # strided conv encoder widths


@dataclass
class ModalitySpec:
    kind: str  # "vector" | "image"
    raw_dim: int = 0
    image_shape: tuple[int, int, int] = ()

    def __post_init__(self):
        if self.kind == "vector":
            if self.raw_dim <= 0:
                raise ValueError("vector modality needs raw_dim > 0")
        elif self.kind == "image":
            if tuple(self.image_shape) != (1, 64, 64):
                raise ValueError("image modality supports 1x64x64 observations")
        else:
            raise ValueError(f"unknown modality kind: {self.kind!r}")


@dataclass
class ActionCodec:
    """Layout of the shared action classes: [discrete slots | dim-0 bins | ...]."""

    num_discrete: int
    num_cont_dims: int
    bins_per_dim: int = 256
    low: float = -1.0
    high: float = 1.0

    @property
    def total_classes(self) -> int:
        return self.num_discrete + self.num_cont_dims * self.bins_per_dim

    def dim_slice(self, d: int) -> slice:
        if not 0 <= d < self.num_cont_dims:
            raise ValueError(f"continuous dim {d} out of range")
        start = self.num_discrete + d * self.bins_per_dim
        return slice(start, start + self.bins_per_dim)


@dataclass
class SaturationStats:
    clamped: int = 0
    total: int = 0


def discretize(a: np.ndarray, codec: ActionCodec, stats: SaturationStats | None = None) -> np.ndarray:
    """Map continuous actions in [low, high] to per-dim bin indices.

    Out-of-range values are clamped (expert data may graze the bounds) and
    counted in `stats` when given.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] > codec.num_cont_dims:
        raise ValueError(f"action has {a.shape[-1]} dims, codec allows {codec.num_cont_dims}")
    span = codec.high - codec.low
    raw = np.floor((a - codec.low) / span * codec.bins_per_dim)
    bins = np.clip(raw, 0, codec.bins_per_dim - 1).astype(np.int64)
    if stats is not None:
        stats.total += a.size
        stats.clamped += int((a < codec.low).sum() + (a > codec.high).sum())
    return bins


def undiscretize(bins: np.ndarray, codec: ActionCodec) -> np.ndarray:
    """Bin centers: low + (bin + 0.5) * (high - low) / bins_per_dim."""
    bins = np.asarray(bins)
    if bins.min() < 0 or bins.max() >= codec.bins_per_dim:
        raise ValueError("bin index out of range")
    span = codec.high - codec.low
    return codec.low + (bins + 0.5) * span / codec.bins_per_dim


@dataclass
class TokenizerConfig:
    model_dim: int
    padded_dim: int
    codec: ActionCodec
    image: bool = False
    include_actions: bool = False

    @property
    def tokens_per_step(self) -> int:
        return 4 if self.include_actions else 3


def init_tokenizer_params(cfg: TokenizerConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    D = cfg.model_dim

    def lin(fan_in, fan_out, std=None):
        s = std if std is not None else 1.0 / math.sqrt(fan_in)
        return Tensor(rng.normal(0.0, s, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    p = {
        "enc.state.W": lin(cfg.padded_dim, D),
        "enc.state.b": zeros(D),
        "enc.rtg.W": lin(1, D, std=1.0),
        "enc.rtg.b": zeros(D),
        "enc.rew.W": lin(1, D, std=1.0),
        "enc.rew.b": zeros(D),
        "enc.act.disc": Tensor(
            rng.normal(0.0, 0.02, size=(max(cfg.codec.num_discrete, 1), D)).astype(dtype),
            requires_grad=True,
        ),
        "enc.act.cont.W": lin(max(cfg.codec.num_cont_dims, 1), D),
        "enc.act.cont.b": zeros(D),
        "head.W": lin(D, cfg.codec.total_classes, std=0.02),
        "head.b": zeros(cfg.codec.total_classes),
    }
    if cfg.image:
        c1, c2 = IMG_CHANNELS
        p["enc.img.W1"] = lin(16, c1)  # 4x4 patches of the 1-channel input
        p["enc.img.b1"] = zeros(c1)
        p["enc.img.W2"] = lin(16 * c1, c2)
        p["enc.img.b2"] = zeros(c2)
        p["enc.img.W3"] = lin(16 * c2, D)
        p["enc.img.b3"] = zeros(D)
    return p


def pad_states(states: np.ndarray, padded_dim: int) -> np.ndarray:
    """Zero-pad trailing state dims: (..., raw) -> (..., padded_dim)."""
    raw = states.shape[-1]
    if raw > padded_dim:
        raise ValueError(f"state dim {raw} exceeds padded_dim {padded_dim}")
    if raw == padded_dim:
        return states
    pad = [(0, 0)] * (states.ndim - 1) + [(0, padded_dim - raw)]
    return np.pad(states, pad)


def encode_states(params: dict, spec: ModalitySpec, states: np.ndarray, cfg: TokenizerConfig) -> Tensor:
    """states: (B, T, raw) or (B, T, 1, 64, 64) -> token embeddings (B, T, D)."""
    dtype = params["enc.state.W"].dtype
    if spec.kind == "vector":
        x = Tensor(pad_states(states, cfg.padded_dim).astype(dtype))
        return matmul(x, params["enc.state.W"]) + params["enc.state.b"]
    B, T = states.shape[:2]
    c1, c2 = IMG_CHANNELS
    # k4s4 strided convs are non-overlapping, so im2col is a pure reshape
    x = states.reshape(B * T, 1, 16, 4, 16, 4).transpose(0, 2, 4, 1, 3, 5).reshape(B * T, 256, 16)
    h = relu(matmul(Tensor(x.astype(dtype)), params["enc.img.W1"]) + params["enc.img.b1"])
    h = reshape(h, (B * T, 16, 16, c1))  # back on the 16x16 grid
    h = transpose(reshape(h, (B * T, 4, 4, 4, 4, c1)), (0, 1, 3, 2, 4, 5))
    h = relu(matmul(reshape(h, (B * T, 16, 16 * c1)), params["enc.img.W2"]) + params["enc.img.b2"])
    out = matmul(reshape(h, (B * T, 16 * c2)), params["enc.img.W3"]) + params["enc.img.b3"]
    return reshape(out, (B, T, cfg.model_dim))


def encode_scalars(params: dict, prefix: str, values: np.ndarray, cfg: TokenizerConfig) -> Tensor:
    dtype = params[prefix + ".W"].dtype
    B, T = values.shape
    x = Tensor(values.reshape(B, T, 1).astype(dtype))
    return matmul(x, params[prefix + ".W"]) + params[prefix + ".b"]


def encode_actions(params: dict, kind: str, actions: np.ndarray, cfg: TokenizerConfig) -> Tensor:
    """Action tokens for the actions-in-context ablation."""
    if kind == "discrete":
        B, T = actions.shape
        return reshape(index_rows(params["enc.act.disc"], actions.reshape(-1)), (B, T, cfg.model_dim))
    dtype = params["enc.act.cont.W"].dtype
    B, T = actions.shape[:2]
    x = pad_states(actions, cfg.codec.num_cont_dims).astype(dtype)
    return matmul(Tensor(x), params["enc.act.cont.W"]) + params["enc.act.cont.b"]


def encode_timestep(
    params: dict,
    spec: ModalitySpec,
    state: np.ndarray,
    rtg: float,
    reward: float,
    cfg: TokenizerConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-timestep convenience: the three token embeddings (each (D,))."""
    s = encode_states(params, spec, np.asarray(state)[None, None], cfg).data[0, 0]
    r_hat = encode_scalars(params, "enc.rtg", np.array([[rtg]]), cfg).data[0, 0]
    r = encode_scalars(params, "enc.rew", np.array([[reward]]), cfg).data[0, 0]
    return s, r_hat, r


def interleave(
    state_tok: Tensor,
    rtg_tok: Tensor,
    rew_tok: Tensor,
    action_tok: Tensor | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Flat stream [s_1, R_1, (a_1,) r_1, ...] plus action-readout indices.

    The readout index for step t is the position of its return-to-go token.
    """
    B, T, D = state_tok.shape
    if T == 0:
        raise ValueError("cannot interleave an empty sequence")
    toks = [state_tok, rtg_tok] + ([action_tok] if action_tok is not None else []) + [rew_tok]
    per = len(toks)
    stacked = concat([reshape(t, (B, T, 1, D)) for t in toks], axis=2)
    flat = reshape(stacked, (B, T * per, D))
    readout = np.arange(T) * per + 1
    return flat, readout


def expand_mask(mask: np.ndarray, tokens_per_step: int) -> np.ndarray:
    """Per-timestep validity -> per-token validity."""
    return np.repeat(mask, tokens_per_step, axis=1)


def action_head(h: Tensor, params: dict) -> Tensor:
    """Single linear map to all action classes, no autoregression across dims."""
    return matmul(h, params["head.W"]) + params["head.b"]


def action_loss(
    logits: Tensor,
    targets: np.ndarray,
    kind: str,
    codec: ActionCodec,
    mask: np.ndarray,
) -> Tensor:
    """Masked mean cross-entropy at the readout positions.

    Discrete domains read the discrete-slot slice; continuous domains average
    per-dim cross-entropies, each over its own 256-slot slice.
    """
    B, T, _ = logits.shape
    m = mask.astype(logits.dtype.type)
    denom = max(float(m.sum()), 1.0)
    if kind == "discrete":
        lp = log_softmax(logits[:, :, : codec.num_discrete], axis=-1)
        picked = take_along(lp, targets.reshape(B, T, 1), axis=-1)
        ce = -reshape(picked, (B, T))
        return tsum(ce * m) * (1.0 / denom)
    bins = discretize(targets, codec)
    act_dims = targets.shape[-1]
    total = None
    for d in range(act_dims):
        lp = log_softmax(logits[:, :, codec.dim_slice(d)], axis=-1)
        picked = take_along(lp, bins[:, :, d].reshape(B, T, 1), axis=-1)
        ce = -reshape(picked, (B, T))
        total = ce if total is None else total + ce
    per_tok = total * (1.0 / act_dims)
    return tsum(per_tok * m) * (1.0 / denom)


def select_action(
    logits: np.ndarray,
    kind: str,
    codec: ActionCodec,
    act_dims: int = 0,
    strategy: str = "argmax",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
):
    """Decode an executable action from head logits (single timestep).

    argmax breaks ties toward the lowest index; sampling uses a softmax at
    the given temperature within the relevant slice(s).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite action logits")

    def pick(slice_logits):
        if strategy == "argmax":
            return int(np.argmax(slice_logits))
        if strategy != "sample":
            raise ValueError(f"unknown strategy: {strategy!r}")
        z = slice_logits / temperature
        z = z - z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        return int(rng.choice(len(probs), p=probs))

    if kind == "discrete":
        return pick(logits[: codec.num_discrete])
    bins = np.array([pick(logits[codec.dim_slice(d)]) for d in range(act_dims)])
    return undiscretize(bins, codec)
