"""Return-conditioned policy: modality encoders, backbone, shared action head.

One Policy serves every domain in its config; the batch's domain name picks
the modality spec and the action-slice of the head. Training runs the
backbone in parallel mode on the autodiff tape; rollout/benchmark stepping
runs the numpy inference paths with a carried state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from .datastore import Batch, DomainConfig
from .tensor import Tensor, no_grad
from .tokenizer import (
    ActionCodec,
    ModalitySpec,
    TokenizerConfig,
    action_head,
    action_loss,
    discretize,
    encode_actions,
    encode_scalars,
    encode_states,
    expand_mask,
    init_tokenizer_params,
    interleave,
    pad_states,
)


@dataclass
class PolicyConfig:
    backbone: bb.BackboneConfig
    tokenizer: TokenizerConfig
    domains: dict[str, DomainConfig]
    precision: str = "f32"  # f32 | f64

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_json(self) -> dict:
        return {
            "backbone": {
                "kind": self.backbone.kind,
                "num_blocks": self.backbone.num_blocks,
                "model_dim": self.backbone.model_dim,
                "num_heads": self.backbone.num_heads,
                "slstm_positions": list(self.backbone.slstm_positions),
                "dropout_rate": self.backbone.dropout_rate,
                "max_positions": self.backbone.max_positions,
                "parallel_token_limit": self.backbone.parallel_token_limit,
            },
            "tokenizer": {
                "model_dim": self.tokenizer.model_dim,
                "padded_dim": self.tokenizer.padded_dim,
                "image": self.tokenizer.image,
                "include_actions": self.tokenizer.include_actions,
                "codec": vars(self.tokenizer.codec),
            },
            "domains": {
                name: {
                    "domain": d.domain,
                    "reward_scale": d.reward_scale,
                    "spec": {
                        "kind": d.spec.kind,
                        "raw_dim": d.spec.raw_dim,
                        "image_shape": list(d.spec.image_shape),
                    },
                    "action_kind": d.action_kind,
                    "act_dims": d.act_dims,
                    "data_max_return": d.data_max_return,
                    "data_random_return": d.data_random_return,
                }
                for name, d in self.domains.items()
            },
            "precision": self.precision,
        }

    @staticmethod
    def from_json(data: dict) -> "PolicyConfig":
        bcfg = bb.BackboneConfig(
            kind=data["backbone"]["kind"],
            num_blocks=data["backbone"]["num_blocks"],
            model_dim=data["backbone"]["model_dim"],
            num_heads=data["backbone"]["num_heads"],
            slstm_positions=tuple(data["backbone"]["slstm_positions"]),
            dropout_rate=data["backbone"]["dropout_rate"],
            max_positions=data["backbone"]["max_positions"],
            parallel_token_limit=data["backbone"]["parallel_token_limit"],
        )
        tk = data["tokenizer"]
        tcfg = TokenizerConfig(
            model_dim=tk["model_dim"],
            padded_dim=tk["padded_dim"],
            codec=ActionCodec(**tk["codec"]),
            image=tk["image"],
            include_actions=tk["include_actions"],
        )
        domains = {}
        for name, d in data["domains"].items():
            domains[name] = DomainConfig(
                domain=d["domain"],
                reward_scale=d["reward_scale"],
                spec=ModalitySpec(
                    kind=d["spec"]["kind"],
                    raw_dim=d["spec"]["raw_dim"],
                    image_shape=tuple(d["spec"]["image_shape"]),
                ),
                action_kind=d["action_kind"],
                act_dims=d["act_dims"],
                data_max_return=d["data_max_return"],
                data_random_return=d["data_random_return"],
            )
        return PolicyConfig(backbone=bcfg, tokenizer=tcfg, domains=domains, precision=data["precision"])


@dataclass
class PolicyState:
    """Carried inference state plus tokens deferred to the next chunk call."""

    bb: bb.BackboneState
    pending: list = field(default_factory=list)

    @property
    def tokens_seen(self) -> int:
        return self.bb.tokens


class Policy:
    def __init__(self, config: PolicyConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = config.dtype
        self.params: dict[str, Tensor] = {}
        self.params.update(init_tokenizer_params(config.tokenizer, rng, dtype))
        self.params.update(bb.init_backbone(config.backbone, rng, dtype))
        self._prepared = None

    # -- bookkeeping ---------------------------------------------------------

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def invalidate_cache(self) -> None:
        self._prepared = None

    def prepared(self) -> dict:
        """Raw-array parameter view for inference; rebuilt after updates."""
        if self._prepared is None:
            self._prepared = bb.prepare_inference_params(self.config.backbone, self.params)
        return self._prepared

    def domain(self, name: str) -> DomainConfig:
        return self.config.domains[name]

    # -- training path -------------------------------------------------------

    def logits_for_batch(self, batch: Batch, dropout_rng=None) -> tuple[Tensor, np.ndarray]:
        """Action logits at the readout positions: (B, C, total_classes)."""
        cfg = self.config
        dom = self.domain(batch.domain)
        s_tok = encode_states(self.params, dom.spec, batch.states, cfg.tokenizer)
        rtg_tok = encode_scalars(self.params, "enc.rtg", batch.rtg, cfg.tokenizer)
        rew_tok = encode_scalars(self.params, "enc.rew", batch.rewards, cfg.tokenizer)
        act_tok = None
        if cfg.tokenizer.include_actions:
            act_tok = encode_actions(self.params, dom.action_kind, batch.actions, cfg.tokenizer)
        stream, readout = interleave(s_tok, rtg_tok, rew_tok, act_tok)
        tok_mask = expand_mask(batch.mask, cfg.tokenizer.tokens_per_step)
        hidden = bb.stack_forward(
            cfg.backbone, self.params, stream, mask=tok_mask, mode="parallel", dropout_rng=dropout_rng
        )
        h_read = hidden[:, readout]
        return action_head(h_read, self.params), readout

    def loss_for_batch(self, batch: Batch, dropout_rng=None) -> Tensor:
        logits, _ = self.logits_for_batch(batch, dropout_rng)
        dom = self.domain(batch.domain)
        return action_loss(logits, batch.actions, dom.action_kind, self.config.tokenizer.codec, batch.mask)

    def eval_loss(self, batch: Batch) -> float:
        with no_grad():
            return float(self.loss_for_batch(batch).data)

    # -- inference path ------------------------------------------------------

    def begin(self, batch: int = 1, cache_capacity: int | None = None) -> PolicyState:
        return PolicyState(
            bb=bb.init_state(self.config.backbone, batch, self.config.dtype, cache_capacity)
        )

    def _np_lin(self, x: np.ndarray, w: str, b: str) -> np.ndarray:
        p = self.prepared()
        return x.astype(self.config.dtype) @ p[w] + p[b]

    def encode_state_np(self, domain: str, obs: np.ndarray) -> np.ndarray:
        """obs: (B, raw) or (B, 1, 64, 64) -> (B, 1, D) token embedding."""
        dom = self.domain(domain)
        if dom.spec.kind == "vector":
            x = pad_states(obs, self.config.tokenizer.padded_dim)
            return self._np_lin(x, "enc.state.W", "enc.state.b")[:, None, :]
        with no_grad():
            t = encode_states(self.params, dom.spec, obs[:, None], self.config.tokenizer)
        return t.data

    def encode_scalar_np(self, which: str, values: np.ndarray) -> np.ndarray:
        """values: (B,) -> (B, 1, D); which is 'rtg' or 'rew'."""
        x = np.asarray(values, dtype=self.config.dtype).reshape(-1, 1)
        return self._np_lin(x, f"enc.{which}.W", f"enc.{which}.b")[:, None, :]

    def encode_action_np(self, domain: str, actions) -> np.ndarray:
        dom = self.domain(domain)
        with no_grad():
            arr = np.asarray(actions)
            t = encode_actions(
                self.params, dom.action_kind, arr.reshape((arr.shape[0], 1) + arr.shape[1:]),
                self.config.tokenizer,
            )
        return t.data

    def head_np(self, h: np.ndarray) -> np.ndarray:
        p = self.prepared()
        return h.astype(self.config.dtype) @ p["head.W"] + p["head.b"]

    def step_tokens(self, state: PolicyState, toks: list[np.ndarray], mode: str = "step", backend=None) -> np.ndarray:
        """Feed token embeddings (each (B, 1, D)); return hidden of the last.

        step mode runs one backbone call per token; chunkwise prepends any
        pending tokens and makes a single call.
        """
        if mode == "chunkwise":
            chunk = state.pending + toks
            state.pending = []
            x = np.concatenate(chunk, axis=1)
            y, _ = bb.stack_forward(
                self.config.backbone, self.prepared(), x, mode="chunkwise", state=state.bb, backend=backend
            )
            return y[:, -1]
        last = None
        for t in toks:
            last, _ = bb.stack_forward(
                self.config.backbone, self.prepared(), t, mode="step", state=state.bb, backend=backend
            )
        return last[:, -1]

    def defer_tokens(self, state: PolicyState, toks: list[np.ndarray], mode: str = "step", backend=None) -> None:
        """Feed tokens that nothing reads immediately (reward/action tokens).

        In chunkwise mode they ride along with the next chunk call."""
        if mode == "chunkwise":
            state.pending.extend(toks)
        else:
            self.step_tokens(state, toks, mode="step", backend=backend)
