import numpy as np
import pytest

from recact.backbone import BackboneConfig
from recact.datastore import DomainConfig, DomainDataset
from recact.policy import Policy, PolicyConfig
from recact.tokenizer import ActionCodec, ModalitySpec, TokenizerConfig

DESK_CODEC = ActionCodec(num_discrete=5, num_cont_dims=2)


def darkroom_domain(**stats):
    return DomainConfig(
        domain="darkroom",
        reward_scale=100.0,
        spec=ModalitySpec("vector", raw_dim=2),
        action_kind="discrete",
        **stats,
    )


def pointreach_domain(**stats):
    return DomainConfig(
        domain="pointreach",
        reward_scale=1.0,
        spec=ModalitySpec("vector", raw_dim=4),
        action_kind="continuous",
        act_dims=2,
        **stats,
    )


def tiny_policy(
    kind="mlstm_only",
    model_dim=32,
    num_blocks=2,
    num_heads=2,
    domains=None,
    precision="f32",
    seed=0,
    include_actions=False,
    max_positions=2048,
):
    domains = domains or {"darkroom": darkroom_domain()}
    bcfg = BackboneConfig(
        kind=kind,
        num_blocks=num_blocks,
        model_dim=model_dim,
        num_heads=num_heads,
        slstm_positions=(1,) if kind == "mixed_slstm" else (),
        max_positions=max_positions if kind == "attention" else 0,
    )
    tcfg = TokenizerConfig(
        model_dim=model_dim, padded_dim=8, codec=DESK_CODEC, include_actions=include_actions
    )
    cfg = PolicyConfig(backbone=bcfg, tokenizer=tcfg, domains=domains, precision=precision)
    return Policy(cfg, np.random.default_rng(seed))


@pytest.fixture
def darkroom_policy():
    return tiny_policy()
