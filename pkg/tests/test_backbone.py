import numpy as np
import pytest

import recact.kernels as kernels
from recact.backbone import (
    BackboneConfig,
    CacheFullError,
    attention_cache_bytes,
    default_slstm_positions,
    init_backbone,
    init_state,
    mlstm_parallel_core,
    stack_forward,
    state_bytes,
)
from recact.optim import finite_diff_grad
from recact.tensor import Tensor

KIND_KW = {
    "mlstm_only": {},
    "mixed_slstm": {"slstm_positions": (1,)},
    "attention": {"max_positions": 512},
}


def make(kind, seed=0, dtype=np.float32, num_blocks=2, model_dim=16, num_heads=2, **kw):
    args = dict(KIND_KW[kind])
    args.update(kw)
    cfg = BackboneConfig(kind=kind, num_blocks=num_blocks, model_dim=model_dim, num_heads=num_heads, **args)
    params = init_backbone(cfg, np.random.default_rng(seed), dtype)
    return cfg, params


def run_modes(cfg, params, x, dtype):
    yp = stack_forward(cfg, params, Tensor(x), mode="parallel").data
    st = init_state(cfg, x.shape[0], dtype)
    ys, _ = stack_forward(cfg, params, x, mode="step", state=st)
    st2 = init_state(cfg, x.shape[0], dtype)
    yc, _ = stack_forward(cfg, params, x, mode="chunkwise", state=st2)
    return yp, ys, yc, st


@pytest.mark.parametrize("kind", ["mlstm_only", "mixed_slstm", "attention"])
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-9)])
def test_mode_equivalence(kind, dtype, tol):
    cfg, params = make(kind, dtype=dtype)
    x = np.random.default_rng(1).normal(0, 1, (2, 48, 16)).astype(dtype)
    yp, ys, yc, _ = run_modes(cfg, params, x, dtype)
    assert np.abs(yp - ys).max() <= tol
    assert np.abs(yp - yc).max() <= tol


def test_single_token_parallel_equals_step():
    cfg, params = make("mlstm_only")
    x = np.random.default_rng(2).normal(0, 1, (1, 1, 16)).astype(np.float32)
    yp, ys, _, _ = run_modes(cfg, params, x, np.float32)
    assert np.abs(yp - ys).max() <= 1e-6


def test_chunk_split_matches_parallel():
    cfg, params = make("mlstm_only")
    x = np.random.default_rng(3).normal(0, 1, (2, 12, 16)).astype(np.float32)
    yp = stack_forward(cfg, params, Tensor(x), mode="parallel").data
    st = init_state(cfg, 2)
    y1, st = stack_forward(cfg, params, x[:, :5], mode="chunkwise", state=st)
    y2, st = stack_forward(cfg, params, x[:, 5:], mode="chunkwise", state=st)
    assert np.abs(np.concatenate([y1, y2], axis=1) - yp).max() <= 1e-5


def test_chunk_of_three_replaces_three_steps():
    cfg, params = make("mlstm_only")
    x = np.random.default_rng(4).normal(0, 1, (1, 3, 16)).astype(np.float32)
    st = init_state(cfg, 1)
    yc, _ = stack_forward(cfg, params, x, mode="chunkwise", state=st)
    st2 = init_state(cfg, 1)
    ys = [stack_forward(cfg, params, x[:, t : t + 1], mode="step", state=st2)[0] for t in range(3)]
    assert np.abs(yc - np.concatenate(ys, axis=1)).max() <= 1e-6


@pytest.mark.parametrize("kind", ["mlstm_only", "mixed_slstm", "attention"])
def test_causality_suffix_perturbation(kind):
    cfg, params = make(kind)
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (2, 20, 16)).astype(np.float32)
    x2 = x.copy()
    x2[:, 11:] += rng.normal(0, 1, x2[:, 11:].shape).astype(np.float32)
    y1 = stack_forward(cfg, params, Tensor(x), mode="parallel").data
    y2 = stack_forward(cfg, params, Tensor(x2), mode="parallel").data
    if kind == "attention":
        assert np.array_equal(y1[:, :11], y2[:, :11])
    else:
        assert np.abs(y1[:, :11] - y2[:, :11]).max() <= 1e-12


@pytest.mark.parametrize("kind", ["mlstm_only", "mixed_slstm", "attention"])
def test_masked_suffix_equals_prefix_alone(kind):
    cfg, params = make(kind)
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (2, 10, 16)).astype(np.float32)
    mask = np.zeros((2, 10), dtype=bool)
    mask[:, :6] = True
    y_masked = stack_forward(cfg, params, Tensor(x), mask=mask, mode="parallel").data
    y_prefix = stack_forward(cfg, params, Tensor(x[:, :6].copy()), mode="parallel").data
    assert np.abs(y_masked[:, :6] - y_prefix).max() <= 1e-5


def test_stability_gate_sweep_mlstm():
    # forced gate preactivations in [-50, 50] must keep outputs and grads finite
    rng = np.random.default_rng(7)
    B, H, T, dh = 1, 1, 6, 4
    q = Tensor(rng.normal(0, 1, (B, H, T, dh)), requires_grad=True)
    k = Tensor(rng.normal(0, 1, (B, H, T, dh)), requires_grad=True)
    v = Tensor(rng.normal(0, 1, (B, H, T, dh)), requires_grad=True)
    for iv in (-50.0, -25.0, 0.0, 25.0, 50.0):
        for fv in (-50.0, -25.0, 0.0, 25.0, 50.0):
            ig = Tensor(np.full((B, H, T), iv), requires_grad=True)
            fg = Tensor(np.full((B, H, T), fv), requires_grad=True)
            q.grad = k.grad = v.grad = None
            out = mlstm_parallel_core(q, k, v, ig, fg)
            assert np.isfinite(out.data).all(), (iv, fv)
            (out * out).sum().backward()
            for t in (q, k, v, ig, fg):
                assert np.isfinite(t.grad).all(), (iv, fv)


@pytest.mark.parametrize("kind", ["mlstm_only", "mixed_slstm"])
def test_stability_gate_sweep_stack(kind):
    # bias-forced gates at the block level, both parallel and step modes
    for gate_val in (-50.0, 50.0):
        cfg, params = make(kind, dtype=np.float64, model_dim=8, num_heads=2)
        for name, p in params.items():
            if name.endswith("bgate"):
                p.data[:] = gate_val
            if name.endswith("bpre"):
                p.data[:] = gate_val
        x = np.random.default_rng(8).normal(0, 1, (1, 8, 8))
        out = stack_forward(cfg, params, Tensor(x), mode="parallel")
        assert np.isfinite(out.data).all()
        (out * out).sum().backward()
        for p in params.values():
            assert p.grad is None or np.isfinite(p.grad).all()
        st = init_state(cfg, 1, np.float64)
        ys, _ = stack_forward(cfg, params, x, mode="step", state=st)
        assert np.isfinite(ys).all()


def test_stabilizer_identity_first_step():
    # i-gate 0, f-gate 0, zero state: m'=0, i=1, f=1 and C' = v k^T exactly
    B, H, D = 1, 1, 3
    q = np.zeros((B, H, 1, D))
    k = np.arange(1.0, D + 1).reshape(1, 1, 1, D)
    v = np.arange(2.0, D + 2).reshape(1, 1, 1, D)
    ig = np.zeros((B, H, 1))
    fg = np.zeros((B, H, 1))
    C = np.zeros((B, H, D, D))
    n = np.zeros((B, H, D))
    m = np.zeros((B, H))
    out = np.empty_like(q)
    kernels.get_scan_fns("python")[0](q, k, v, ig, fg, C, n, m, out)
    assert m[0, 0] == 0.0
    assert np.allclose(C[0, 0], np.outer(k[0, 0, 0], v[0, 0, 0]))
    assert np.allclose(n[0, 0], k[0, 0, 0])


def test_slstm_forced_gates():
    # i=1, f=0 forced: c' = z exactly; zero recurrent weights drop h dependence
    B, T, H, D = 1, 1, 1, 4
    rng = np.random.default_rng(9)
    pre = np.zeros((B, T, 4, H, D))
    pre[:, :, 0] = rng.normal(0, 1, (B, T, H, D))  # z inputs
    pre[:, :, 1] = 0.0  # i preact -> i = exp(0 - m'), m' = max(f+m, i)=0 -> 1
    pre[:, :, 2] = -1e9  # f -> 0
    R = np.zeros((H, 4, D, D))
    h = rng.normal(0, 1, (B, H, D))  # junk previous hidden, must not matter
    c = rng.normal(0, 1, (B, H, D))
    n = np.zeros((B, H, D))
    m = np.zeros((B, H, D))
    out = np.empty((B, T, H, D))
    kernels.get_scan_fns("python")[1](pre, R, h, c, n, m, out)
    assert np.allclose(c[0, 0], np.tanh(pre[0, 0, 0, 0]))
    assert np.allclose(n[0, 0], 1.0)


@pytest.mark.parametrize("kind", ["mlstm_only", "mixed_slstm", "attention"])
def test_block_gradients_match_finite_differences(kind):
    cfg, params = make(kind, seed=11, dtype=np.float64, model_dim=8, num_heads=2)
    x = np.random.default_rng(12).normal(0, 1, (1, 4, 8))
    out = stack_forward(cfg, params, Tensor(x), mode="parallel")
    (out * out).sum().backward()
    g_ad = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    abs_err, g_max = 0.0, 0.0
    for name, p in params.items():
        def f(w, p=p):
            old = p.data.copy()
            p.data = w.reshape(p.data.shape)
            o = stack_forward(cfg, params, Tensor(x), mode="parallel")
            val = float((o.data ** 2).sum())
            p.data = old
            return val

        g_fd = finite_diff_grad(f, p.data.copy().ravel(), 1e-5).reshape(p.data.shape)
        abs_err = max(abs_err, np.abs(g_ad[name] - g_fd).max())
        g_max = max(g_max, np.abs(g_fd).max())
    assert abs_err / g_max < 1e-4


def test_recurrent_state_size_constant():
    cfg, params = make("mlstm_only")
    st = init_state(cfg, 1)
    stack_forward(cfg, params, np.zeros((1, 50, 16), np.float32), mode="chunkwise", state=st)
    b50 = state_bytes(st)
    stack_forward(cfg, params, np.zeros((1, 450, 16), np.float32), mode="chunkwise", state=st)
    assert state_bytes(st) == b50


def test_attention_cache_grows_linearly():
    cfg, params = make("attention", max_positions=4096, model_dim=64, num_heads=1, num_blocks=4)
    st = init_state(cfg, 1, np.float32)
    stack_forward(cfg, params, np.zeros((1, 100, 64), np.float32), mode="chunkwise", state=st)
    b100 = state_bytes(st)
    assert b100 == 2 * 4 * 100 * 64 * 4 == attention_cache_bytes(cfg, 100)
    stack_forward(cfg, params, np.zeros((1, 100, 64), np.float32), mode="chunkwise", state=st)
    assert state_bytes(st) == 2 * b100


def test_attention_cache_full_raises():
    cfg, params = make("attention", max_positions=8)
    st = init_state(cfg, 1)
    stack_forward(cfg, params, np.zeros((1, 8, 16), np.float32), mode="chunkwise", state=st)
    with pytest.raises(CacheFullError):
        stack_forward(cfg, params, np.zeros((1, 1, 16), np.float32), mode="step", state=st)


def test_attention_ring_cache_truncates():
    cfg, params = make("attention", max_positions=64)
    st = init_state(cfg, 1, cache_capacity=10)
    x = np.random.default_rng(13).normal(0, 1, (1, 25, 16)).astype(np.float32)
    stack_forward(cfg, params, x, mode="step", state=st)
    assert st.blocks[0].length == 10
    assert state_bytes(st) == attention_cache_bytes(cfg, 10, itemsize=4)


def test_parallel_token_limit():
    cfg, params = make("mlstm_only", parallel_token_limit=8)
    with pytest.raises(ValueError, match="work|limit|exceeds"):
        stack_forward(cfg, params, Tensor(np.zeros((1, 9, 16), np.float32)), mode="parallel")


def test_default_slstm_positions():
    assert default_slstm_positions(8) == (1,)
    assert default_slstm_positions(12) == (1, 3)
    assert default_slstm_positions(20) == (1, 3, 5)


def test_mamba_reserved():
    with pytest.raises(NotImplementedError):
        BackboneConfig(kind="mamba", num_blocks=2, model_dim=16, num_heads=2)


def test_dropout_zero_is_deterministic():
    cfg, params = make("mlstm_only")
    x = Tensor(np.random.default_rng(14).normal(0, 1, (1, 8, 16)).astype(np.float32))
    y1 = stack_forward(cfg, params, x, mode="parallel", dropout_rng=np.random.default_rng(0)).data
    y2 = stack_forward(cfg, params, x, mode="parallel", dropout_rng=np.random.default_rng(99)).data
    assert np.array_equal(y1, y2)


@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="no compiled kernels")
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_kernel_backend_parity(dtype, tol):
    cfg, params = make("mixed_slstm", dtype=dtype)
    x = np.random.default_rng(15).normal(0, 1, (2, 16, 16)).astype(dtype)
    outs = {}
    for backend in kernels.available_backends():
        st = init_state(cfg, 2, dtype)
        outs[backend], _ = stack_forward(cfg, params, x, mode="step", state=st, backend=backend)
    assert np.abs(outs["python"] - outs["cython"]).max() <= tol
