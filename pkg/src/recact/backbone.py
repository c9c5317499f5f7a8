"""Sequence backbones: stacked mLSTM, mLSTM+sLSTM, or causal-attention blocks.

Every stack runs in three modes with matching outputs:

* ``parallel``  -- full-sequence training forward on the autodiff tape; the
  mLSTM uses the stabilized quadratic form over the causal gate-product
  matrix, attention uses ordinary masked softmax.
* ``chunkwise`` -- batched numpy inference over a chunk of tokens given a
  carried state (one call per chunk).
* ``step``      -- token-by-token numpy inference through the scan kernels.

Recurrent kinds carry constant-size state; attention carries a KV cache that
grows with the tokens seen (optionally ring-buffered at a fixed capacity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import DENOM_EPS
from .tensor import (
    Tensor,
    absolute,
    cast,
    concat,
    cumsum,
    exp,
    gelu,
    index_rows,
    matmul,
    maximum,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    tanh,
    tmax,
    tmean,
    tsum,
    transpose,
    where,
)

KINDS = ("mlstm_only", "mixed_slstm", "attention", "mamba")

NORM_EPS = 1e-6


@dataclass
class BackboneConfig:
    kind: str
    num_blocks: int
    model_dim: int
    num_heads: int
    slstm_positions: tuple[int, ...] = ()
    dropout_rate: float = 0.0
    max_positions: int = 0  # attention only, in tokens
    parallel_token_limit: int = 16384  # O(T^2) work-buffer guard

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind: {self.kind!r}")
        if self.kind == "mamba":
            raise NotImplementedError("mamba is a reserved kind and not implemented")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        self.slstm_positions = tuple(sorted(self.slstm_positions))
        if any(p < 0 or p >= self.num_blocks for p in self.slstm_positions):
            raise ValueError("slstm_positions must lie within [0, num_blocks)")
        if self.kind == "attention" and self.max_positions <= 0:
            raise ValueError("attention backbones need max_positions > 0")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def block_kind(self, i: int) -> str:
        if self.kind == "attention":
            return "attention"
        if self.kind == "mixed_slstm" and i in self.slstm_positions:
            return "slstm"
        return "mlstm"


def default_slstm_positions(num_blocks: int) -> tuple[int, ...]:
    """Block indices for the sLSTM blocks in a mixed stack.

    Published placements: [1] for 8 blocks, [1, 3] for 12 and 16, [1, 3, 5]
    for 20; smaller desk stacks keep a single sLSTM block at position 1.
    """
    if num_blocks >= 20:
        return (1, 3, 5)
    if num_blocks >= 12:
        return (1, 3)
    if num_blocks >= 2:
        return (1,)
    return (0,)


# ---------------------------------------------------------------------------
# parameters


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    D = cfg.model_dim
    H = cfg.num_heads
    dh = cfg.head_dim
    out_scale = 1.0 / math.sqrt(2.0 * cfg.num_blocks)

    def lin(fan_in, fan_out, scale=1.0):
        w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
        return Tensor(w.astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}."
        bk = cfg.block_kind(i)
        if bk == "mlstm":
            params[pre + "norm_g"] = ones(D)
            params[pre + "Wqkv"] = lin(D, 3 * D)
            params[pre + "bqkv"] = zeros(3 * D)
            params[pre + "Wgate"] = lin(D, 2 * H)
            # forget gates start close to 1 with per-head horizons; exponential
            # parameterization, so bias = log(target gate value)
            bgate = np.zeros(2 * H)
            bgate[H:] = np.log(np.linspace(0.9, 0.999, H))
            params[pre + "bgate"] = Tensor(bgate.astype(dtype), requires_grad=True)
            params[pre + "Wo"] = lin(D, D)
            params[pre + "bo"] = zeros(D)
            params[pre + "Wout"] = lin(D, D, out_scale)
            params[pre + "bout"] = zeros(D)
        elif bk == "slstm":
            params[pre + "norm_g"] = ones(D)
            params[pre + "Wpre"] = lin(D, 4 * D)
            bpre = np.zeros(4 * D)
            bpre[2 * D : 3 * D] = np.log(np.linspace(0.9, 0.999, D))
            params[pre + "bpre"] = Tensor(bpre.astype(dtype), requires_grad=True)
            r = rng.normal(0.0, 0.5 / math.sqrt(dh), size=(H, 4, dh, dh))
            params[pre + "R"] = Tensor(r.astype(dtype), requires_grad=True)
            params[pre + "Wout"] = lin(D, D, out_scale)
            params[pre + "bout"] = zeros(D)
        else:
            params[pre + "ln1_g"] = ones(D)
            params[pre + "ln1_b"] = zeros(D)
            params[pre + "Wqkv"] = lin(D, 3 * D)
            params[pre + "bqkv"] = zeros(3 * D)
            params[pre + "Wproj"] = lin(D, D, out_scale)
            params[pre + "bproj"] = zeros(D)
            params[pre + "ln2_g"] = ones(D)
            params[pre + "ln2_b"] = zeros(D)
            params[pre + "Wfc"] = lin(D, 4 * D)
            params[pre + "bfc"] = zeros(4 * D)
            params[pre + "Wfc2"] = lin(4 * D, D, out_scale)
            params[pre + "bfc2"] = zeros(D)
    if cfg.kind == "attention":
        pe = rng.normal(0.0, 0.02, size=(cfg.max_positions, D))
        params["pos_emb"] = Tensor(pe.astype(dtype), requires_grad=True)
        params["final_norm_g"] = ones(D)
        params["final_norm_b"] = zeros(D)
    else:
        params["final_norm_g"] = ones(D)
    return params


# ---------------------------------------------------------------------------
# inference state


@dataclass
class MlstmState:
    C: np.ndarray  # (B, H, dh, dh)
    n: np.ndarray  # (B, H, dh)
    m: np.ndarray  # (B, H)

    def nbytes(self) -> int:
        return self.C.nbytes + self.n.nbytes + self.m.nbytes


@dataclass
class SlstmState:
    c: np.ndarray  # (B, H, dh)
    n: np.ndarray
    m: np.ndarray
    h: np.ndarray

    def nbytes(self) -> int:
        return self.c.nbytes + self.n.nbytes + self.m.nbytes + self.h.nbytes


@dataclass
class AttnState:
    """KV cache. capacity=None grows until max_positions; a fixed capacity
    turns it into a ring buffer that evicts the oldest token."""

    k: np.ndarray  # (B, H, alloc, dh)
    v: np.ndarray
    length: int = 0
    capacity: int | None = None

    def nbytes(self) -> int:
        # live contents, not allocation
        per_tok = self.k.shape[0] * self.k.shape[1] * self.k.shape[3] * self.k.itemsize
        return 2 * self.length * per_tok

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        L = k_new.shape[2]
        cap = self.capacity
        if cap is not None and L > cap:
            k_new, v_new = k_new[:, :, -cap:], v_new[:, :, -cap:]
            L = cap
        need = self.length + L
        if cap is not None and need > cap:
            drop = need - cap
            keep = self.length - drop
            self.k[:, :, :keep] = self.k[:, :, drop : self.length]
            self.v[:, :, :keep] = self.v[:, :, drop : self.length]
            self.length = keep
            need = cap
        if need > self.k.shape[2]:
            alloc = max(need, 2 * self.k.shape[2])
            if cap is not None:
                alloc = min(alloc, cap)
            grown_k = np.zeros(self.k.shape[:2] + (alloc,) + self.k.shape[3:], self.k.dtype)
            grown_v = np.zeros_like(grown_k)
            grown_k[:, :, : self.length] = self.k[:, :, : self.length]
            grown_v[:, :, : self.length] = self.v[:, :, : self.length]
            self.k, self.v = grown_k, grown_v
        self.k[:, :, self.length : self.length + L] = k_new
        self.v[:, :, self.length : self.length + L] = v_new
        self.length += L


@dataclass
class BackboneState:
    blocks: list
    tokens: int = 0  # total tokens processed


class CacheFullError(RuntimeError):
    """Attention processed more tokens than max_positions allows."""


def init_state(
    cfg: BackboneConfig, batch: int, dtype=np.float32, cache_capacity: int | None = None
) -> BackboneState:
    """Fresh carry. Recurrent carries are float64 (cell math runs in float64
    in every mode); the KV cache keeps the model dtype."""
    H, dh = cfg.num_heads, cfg.head_dim
    f64 = np.float64
    blocks = []
    for i in range(cfg.num_blocks):
        bk = cfg.block_kind(i)
        if bk == "mlstm":
            blocks.append(
                MlstmState(
                    C=np.zeros((batch, H, dh, dh), f64),
                    n=np.zeros((batch, H, dh), f64),
                    m=np.zeros((batch, H), f64),
                )
            )
        elif bk == "slstm":
            blocks.append(
                SlstmState(
                    c=np.zeros((batch, H, dh), f64),
                    n=np.zeros((batch, H, dh), f64),
                    m=np.zeros((batch, H, dh), f64),
                    h=np.zeros((batch, H, dh), f64),
                )
            )
        else:
            alloc = cache_capacity if cache_capacity is not None else min(256, cfg.max_positions)
            blocks.append(
                AttnState(
                    k=np.zeros((batch, H, alloc, dh), dtype),
                    v=np.zeros((batch, H, alloc, dh), dtype),
                    capacity=cache_capacity,
                )
            )
    return BackboneState(blocks=blocks)


def state_bytes(state: BackboneState) -> int:
    """Exact byte count of the carried inference state's live contents."""
    return sum(b.nbytes() for b in state.blocks)


def attention_cache_bytes(cfg: BackboneConfig, tokens: int, batch: int = 1, itemsize: int = 4) -> int:
    """Analytic KV-cache size for `tokens` cached tokens."""
    return 2 * cfg.num_blocks * tokens * cfg.model_dim * batch * itemsize


# ---------------------------------------------------------------------------
# tape-path building blocks (training / parallel mode)
#
# Recurrent block interiors always compute in float64, whatever the model
# dtype: the exponential gate products and the signed normalizer are badly
# conditioned in float32 and would break parallel/step mode agreement over
# long sequences. The residual stream and the parameters keep the model dtype.


class _F64View:
    """Dict view that upcasts parameters to float64 on the tape."""

    def __init__(self, params: dict):
        self._p = params

    def __getitem__(self, key: str) -> Tensor:
        return cast(self._p[key], np.float64)


def rms_norm(x: Tensor, g: Tensor) -> Tensor:
    ms = tmean(x * x, axis=-1, keepdims=True)
    return x / sqrt(ms + NORM_EPS) * g


def layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + NORM_EPS) * g + b


def _split_heads(x: Tensor, B: int, T: int, H: int, dh: int) -> Tensor:
    return transpose(reshape(x, (B, T, H, dh)), (0, 2, 1, 3))  # (B,H,T,dh)


def _merge_heads(x: Tensor, B: int, T: int, D: int) -> Tensor:
    return reshape(transpose(x, (0, 2, 1, 3)), (B, T, D))


def mask_gates(ig: Tensor, fg: Tensor, mask: np.ndarray | None):
    """Invalid tokens write nothing (i -> 0) and pass state through (f -> 1)."""
    if mask is None:
        return ig, fg
    cond = mask[:, None, :]
    return where(cond, ig, -np.inf), where(cond, fg, 0.0)


PARALLEL_CHUNK_TOKENS = 128  # quadratic work buffers are built per chunk


def mlstm_chunk_core(
    q: Tensor, k: Tensor, v: Tensor, ig: Tensor, fg: Tensor, state=None
) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    """Stabilized quadratic form over one chunk given a carried (C, n, m).

    q, k, v: (B, H, L, dh); ig, fg: (B, H, L); k pre-scaled by 1/sqrt(dh).
    Equals running the step recurrence token by token from that state.
    """
    B, H, L, dh = q.shape
    if state is None:
        zeros = np.zeros((B, H, dh, dh), q.dtype)
        state = (
            Tensor(zeros),
            Tensor(np.zeros((B, H, dh), q.dtype)),
            Tensor(np.zeros((B, H), q.dtype)),  # stabilizer m_0 = 0
        )
    c_in, n_in, m_in = state
    b = cumsum(fg, axis=2)
    a = ig - b
    tril = np.tril(np.ones((L, L), dtype=bool))
    a_rows = where(tril, reshape(a, (B, H, 1, L)), -np.inf)
    u = maximum(tmax(a_rows, axis=-1), reshape(m_in, (B, H, 1)))  # running max incl. carry
    m_row = b + u
    dmat = exp(a_rows - reshape(u, (B, H, L, 1)))
    s = matmul(q, transpose(k, (0, 1, 3, 2))) * dmat
    decay = exp(reshape(m_in, (B, H, 1)) - u)
    num = matmul(s, v) + reshape(decay, (B, H, L, 1)) * matmul(q, c_in)
    ndot = tsum(s, axis=-1) + decay * tsum(q * reshape(n_in, (B, H, 1, dh)), axis=-1)
    denom = maximum(absolute(ndot), exp(-m_row)) + DENOM_EPS
    h = num / reshape(denom, (B, H, L, 1))
    k_w = k * reshape(dmat[:, :, L - 1], (B, H, L, 1))
    decay_last = reshape(decay[:, :, L - 1], (B, H, 1, 1))
    c_out = decay_last * c_in + matmul(transpose(k_w, (0, 1, 3, 2)), v)
    n_out = reshape(decay[:, :, L - 1], (B, H, 1)) * n_in + tsum(k_w, axis=2)
    m_out = m_row[:, :, L - 1]
    return h, (c_out, n_out, m_out)


def mlstm_parallel_core(q: Tensor, k: Tensor, v: Tensor, ig: Tensor, fg: Tensor) -> Tensor:
    """Full-sequence mLSTM from zero state, scanned in quadratic chunks."""
    T = q.shape[2]
    L = PARALLEL_CHUNK_TOKENS
    if T <= L:
        return mlstm_chunk_core(q, k, v, ig, fg)[0]
    state = None
    outs = []
    for lo in range(0, T, L):
        hi = min(lo + L, T)
        h, state = mlstm_chunk_core(
            q[:, :, lo:hi], k[:, :, lo:hi], v[:, :, lo:hi],
            ig[:, :, lo:hi], fg[:, :, lo:hi], state,
        )
        outs.append(h)
    return concat(outs, axis=2)


def _mlstm_block_parallel(p, pre: str, x: Tensor, mask, cfg: BackboneConfig) -> Tensor:
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    out_dtype = x.dtype
    x = cast(x, np.float64)
    p = _F64View(p)
    xn = rms_norm(x, p[pre + "norm_g"])
    qkv = matmul(xn, p[pre + "Wqkv"]) + p[pre + "bqkv"]
    q = _split_heads(qkv[:, :, :D], B, T, H, dh)
    k = _split_heads(qkv[:, :, D : 2 * D], B, T, H, dh) * (1.0 / math.sqrt(dh))
    v = _split_heads(qkv[:, :, 2 * D :], B, T, H, dh)
    gates = matmul(xn, p[pre + "Wgate"]) + p[pre + "bgate"]
    ig = transpose(gates[:, :, :H], (0, 2, 1))
    fg = transpose(gates[:, :, H:], (0, 2, 1))
    ig, fg = mask_gates(ig, fg, mask)
    h = mlstm_parallel_core(q, k, v, ig, fg)
    h = _merge_heads(h, B, T, D)
    o = sigmoid(matmul(xn, p[pre + "Wo"]) + p[pre + "bo"])
    return cast(matmul(o * h, p[pre + "Wout"]) + p[pre + "bout"], out_dtype)


def _slstm_block_parallel(p, pre: str, x: Tensor, mask, cfg: BackboneConfig) -> Tensor:
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    out_dtype = x.dtype
    x = cast(x, np.float64)
    p = _F64View(p)
    xn = rms_norm(x, p[pre + "norm_g"])
    pre_acts = matmul(xn, p[pre + "Wpre"]) + p[pre + "bpre"]  # (B,T,4D), order z,i,f,o
    pre_acts = transpose(reshape(pre_acts, (B, T, 4, H, dh)), (1, 0, 2, 3, 4))  # (T,B,4,H,dh)
    R = p[pre + "R"]  # (H,4,dh,dh)
    h_prev = Tensor(np.zeros((H, B, dh), np.float64))
    c = Tensor(np.zeros((H, B, dh), np.float64))
    n = Tensor(np.zeros((H, B, dh), np.float64))
    m = Tensor(np.zeros((H, B, dh), np.float64))
    outs = []
    for t in range(T):
        pa = transpose(pre_acts[t], (2, 1, 0, 3))  # (H,4,B,dh)
        rec = matmul(reshape(h_prev, (H, 1, B, dh)), transpose(R, (0, 1, 3, 2)))  # (H,4,B,dh)
        acts = pa + rec
        z = tanh(acts[:, 0])
        it = acts[:, 1]
        ft = acts[:, 2]
        o = sigmoid(acts[:, 3])
        if mask is not None:
            cond = mask[None, :, t : t + 1]  # (1,B,1)
            it = where(cond, it, -np.inf)
            ft = where(cond, ft, 0.0)
        m_new = maximum(ft + m, it)
        ia = exp(it - m_new)
        fa = exp(ft + m - m_new)
        c = fa * c + ia * z
        n = fa * n + ia
        m = m_new
        h_new = o * (c / maximum(n, exp(-m_new)))
        if mask is not None:
            h_new = where(mask[None, :, t : t + 1], h_new, h_prev)
        h_prev = h_new
        outs.append(reshape(transpose(h_new, (1, 0, 2)), (B, 1, D)))
    h_seq = concat(outs, axis=1)
    return cast(matmul(h_seq, p[pre + "Wout"]) + p[pre + "bout"], out_dtype)


def _dropout(y: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return y
    keep = (rng.random(y.shape) >= rate).astype(y.dtype.type) / (1.0 - rate)
    return y * keep


def _attn_block_parallel(
    p: dict, pre: str, x: Tensor, mask, cfg: BackboneConfig, dropout_rng=None
) -> Tensor:
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    a = layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    qkv = matmul(a, p[pre + "Wqkv"]) + p[pre + "bqkv"]
    q = _split_heads(qkv[:, :, :D], B, T, H, dh)
    k = _split_heads(qkv[:, :, D : 2 * D], B, T, H, dh)
    v = _split_heads(qkv[:, :, 2 * D :], B, T, H, dh)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    allowed = np.tril(np.ones((T, T), dtype=bool))[None, None]
    if mask is not None:
        allowed = allowed & mask[:, None, None, :]
        eye = np.eye(T, dtype=bool)[None, None]
        allowed = np.where(mask[:, None, :, None], allowed, eye)
    w = softmax(where(allowed, scores, -np.inf), axis=-1)
    out = _merge_heads(matmul(w, v), B, T, D)
    x = x + _dropout(matmul(out, p[pre + "Wproj"]) + p[pre + "bproj"], cfg.dropout_rate, dropout_rng)
    mlp_in = layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    ff = matmul(gelu(matmul(mlp_in, p[pre + "Wfc"]) + p[pre + "bfc"]), p[pre + "Wfc2"]) + p[pre + "bfc2"]
    return x + _dropout(ff, cfg.dropout_rate, dropout_rng)


# ---------------------------------------------------------------------------
# numpy inference blocks


def _np_rms_norm(x, g):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + NORM_EPS) * g


def _np_layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + NORM_EPS) * g + b


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _np_split_heads(x, B, T, H, dh):
    return np.ascontiguousarray(x.reshape(B, T, H, dh).transpose(0, 2, 1, 3))


def _mlstm_block_infer(p, pre, x, st: MlstmState, cfg, chunk: bool, scan_fn):
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    xn = _np_rms_norm(x.astype(np.float64), p[pre + "norm_g"])
    qkv = xn @ p[pre + "Wqkv"] + p[pre + "bqkv"]
    q = _np_split_heads(qkv[:, :, :D], B, T, H, dh)
    k = _np_split_heads(qkv[:, :, D : 2 * D] * (1.0 / math.sqrt(dh)), B, T, H, dh)
    v = _np_split_heads(qkv[:, :, 2 * D :], B, T, H, dh)
    gates = xn @ p[pre + "Wgate"] + p[pre + "bgate"]
    ig = np.ascontiguousarray(gates[:, :, :H].transpose(0, 2, 1))
    fg = np.ascontiguousarray(gates[:, :, H:].transpose(0, 2, 1))
    out = np.empty_like(q)
    if chunk:
        kernels.mlstm_chunk(q, k, v, ig, fg, st.C, st.n, st.m, out)
    else:
        scan_fn(q, k, v, ig, fg, st.C, st.n, st.m, out)
    h = out.transpose(0, 2, 1, 3).reshape(B, T, D)
    o = _np_sigmoid(xn @ p[pre + "Wo"] + p[pre + "bo"])
    return x + ((o * h) @ p[pre + "Wout"] + p[pre + "bout"]).astype(x.dtype)


def _slstm_block_infer(p, pre, x, st: SlstmState, cfg, scan_fn):
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    xn = _np_rms_norm(x.astype(np.float64), p[pre + "norm_g"])
    pre_acts = np.ascontiguousarray(
        (xn @ p[pre + "Wpre"] + p[pre + "bpre"]).reshape(B, T, 4, H, dh)
    )
    out = np.empty((B, T, H, dh), dtype=np.float64)
    scan_fn(pre_acts, p[pre + "R"], st.h, st.c, st.n, st.m, out)
    return x + (out.reshape(B, T, D) @ p[pre + "Wout"] + p[pre + "bout"]).astype(x.dtype)


def _attn_block_infer(p, pre, x, st: AttnState, cfg):
    B, T, D = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    a = _np_layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    qkv = a @ p[pre + "Wqkv"] + p[pre + "bqkv"]
    q = _np_split_heads(qkv[:, :, :D], B, T, H, dh)
    k = _np_split_heads(qkv[:, :, D : 2 * D], B, T, H, dh)
    v = _np_split_heads(qkv[:, :, 2 * D :], B, T, H, dh)
    st.append(k, v)
    keys = st.k[:, :, : st.length]
    vals = st.v[:, :, : st.length]
    scores = np.matmul(q, keys.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if T > 1:
        # new tokens only see the cache plus their own prefix
        offs = st.length - T  # index of the first new token inside the cache
        col = np.arange(st.length)[None, :]
        row = np.arange(T)[:, None]
        scores = np.where(col <= row + offs, scores, -np.inf)
    mx = scores.max(axis=-1, keepdims=True)
    w = np.exp(scores - mx)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, vals).transpose(0, 2, 1, 3).reshape(B, T, D)
    x = x + out @ p[pre + "Wproj"] + p[pre + "bproj"]
    mlp_in = _np_layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    return x + _np_gelu(mlp_in @ p[pre + "Wfc"] + p[pre + "bfc"]) @ p[pre + "Wfc2"] + p[pre + "bfc2"]


# ---------------------------------------------------------------------------
# public stack API


def prepare_inference_params(cfg: BackboneConfig, params: dict) -> dict:
    """Raw-ndarray view of the parameters for the numpy inference paths.

    Recurrent-block parameters are upcast to float64 once here (the block
    interiors run in float64); attention parameters keep the model dtype.
    Cache the result when stepping in a hot loop.
    """
    out: dict[str, np.ndarray] = {}
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else t
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            if cfg.block_kind(idx) != "attention":
                arr = arr.astype(np.float64, copy=False)
        out[name] = arr
    return out


def _raw(cfg: BackboneConfig, params: dict) -> dict:
    first = next(iter(params.values()))
    if isinstance(first, Tensor):
        return prepare_inference_params(cfg, params)
    return params


def stack_forward(
    cfg: BackboneConfig,
    params: dict,
    x,
    mask: np.ndarray | None = None,
    mode: str = "parallel",
    state: BackboneState | None = None,
    dropout_rng: np.random.Generator | None = None,
    backend: str | None = None,
):
    """Run the block stack.

    parallel: x is a Tensor (B, T, D); returns a Tensor, state must be None.
    chunkwise/step: x is an ndarray; returns (ndarray, state) with the carried
    state advanced by x's tokens.
    """
    if mode == "parallel":
        return _stack_parallel(cfg, params, x, mask, dropout_rng)
    if mode not in ("chunkwise", "step"):
        raise ValueError(f"unknown mode: {mode!r}")
    if state is None:
        raise ValueError(f"{mode} mode needs a BackboneState")
    p = _raw(cfg, params)
    x = np.asarray(x)
    if mode == "step" and x.shape[1] > 1:
        ys = [
            _stack_infer(cfg, p, x[:, t : t + 1], state, chunk=False, backend=backend)
            for t in range(x.shape[1])
        ]
        return np.concatenate(ys, axis=1), state
    return _stack_infer(cfg, p, x, state, chunk=(mode == "chunkwise"), backend=backend), state


def _stack_parallel(cfg, params, x: Tensor, mask, dropout_rng):
    B, T, D = x.shape
    if cfg.kind == "attention":
        if T > cfg.max_positions:
            raise CacheFullError(
                f"sequence of {T} tokens exceeds max_positions={cfg.max_positions}"
            )
        x = x + index_rows(params["pos_emb"], np.arange(T))
    elif T > cfg.parallel_token_limit:
        raise ValueError(
            f"sequence of {T} tokens exceeds parallel_token_limit={cfg.parallel_token_limit}"
        )
    rate = cfg.dropout_rate
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}."
        bk = cfg.block_kind(i)
        if bk == "mlstm":
            x = x + _dropout(_mlstm_block_parallel(params, pre, x, mask, cfg), rate, dropout_rng)
        elif bk == "slstm":
            x = x + _dropout(_slstm_block_parallel(params, pre, x, mask, cfg), rate, dropout_rng)
        else:
            x = _attn_block_parallel(params, pre, x, mask, cfg, dropout_rng)
    if cfg.kind == "attention":
        return layer_norm(x, params["final_norm_g"], params["final_norm_b"])
    return rms_norm(x, params["final_norm_g"])


def _stack_infer(cfg, p, x: np.ndarray, state: BackboneState, chunk: bool, backend):
    B, T, D = x.shape
    mlstm_fn, slstm_fn = kernels.get_scan_fns(backend)
    if cfg.kind == "attention":
        limit = cfg.max_positions
        st0: AttnState = state.blocks[0]
        if st0.capacity is None and state.tokens + T > limit:
            raise CacheFullError(
                f"KV cache full: {state.tokens}+{T} tokens exceeds max_positions={limit}"
            )
        pos = np.minimum(np.arange(state.tokens, state.tokens + T), limit - 1)
        x = x + p["pos_emb"][pos]
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}."
        bk = cfg.block_kind(i)
        st = state.blocks[i]
        if bk == "mlstm":
            x = _mlstm_block_infer(p, pre, x, st, cfg, chunk, mlstm_fn)
        elif bk == "slstm":
            x = _slstm_block_infer(p, pre, x, st, cfg, slstm_fn)
        else:
            x = _attn_block_infer(p, pre, x, st, cfg)
    state.tokens += T
    if cfg.kind == "attention":
        return _np_layer_norm(x, p["final_norm_g"], p["final_norm_b"])
    return _np_rms_norm(x, p["final_norm_g"])
