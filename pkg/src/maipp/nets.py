"""Graph attention encoder, temporal U-Net noise predictor and value critic.

All three are plain functions of a :class:`ParameterStore` so that the same
weights can be evaluated with or without an active tape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .roadmap import AGENT_FEATURES, ENCODING_DIM, NODE_FEATURES, Observation


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    node_features: int = NODE_FEATURES
    encoding_dim: int = ENCODING_DIM
    agent_features: int = AGENT_FEATURES

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"embedding dim {self.d} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class DenoiserConfig:
    horizon: int = 8
    action_dim: int = 2
    channels: tuple[int, int] = (32, 64)
    kernel: int = 3
    step_embed: int = 32
    cond_hidden: int = 128

    def __post_init__(self) -> None:
        if self.horizon % 2:
            raise ValueError("horizon must be even for one down/up-sampling level")


@dataclass(frozen=True)
class NetConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    critic_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        den = dict(d["denoiser"])
        den["channels"] = tuple(den["channels"])
        return cls(EncoderConfig(**d["encoder"]), DenoiserConfig(**den), d["critic_hidden"])


# ----------------------------------------------------------------------------- batching


@dataclass(frozen=True)
class ObsBatch:
    nodes: np.ndarray  # (B, n, 5)
    encoding: np.ndarray  # (B, n, E)
    agent: np.ndarray  # (B, 4)
    prev_nodes: np.ndarray
    prev_agent: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


def stack_observations(obs: Sequence[Observation]) -> ObsBatch:
    n = {o.n for o in obs}
    if len(n) != 1:
        raise ValueError(f"observations have differing node counts {sorted(n)}")
    return ObsBatch(
        np.stack([o.nodes for o in obs]),
        np.stack([o.encoding for o in obs]),
        np.stack([o.agent for o in obs]),
        np.stack([o.prev_nodes for o in obs]),
        np.stack([o.prev_agent for o in obs]),
    )


def _node_inputs(nodes: np.ndarray) -> np.ndarray:
    # intent densities are unbounded; compress them
    x = nodes.copy()
    x[..., 4] = np.log1p(np.maximum(x[..., 4], 0.0))
    return x


# ----------------------------------------------------------------------------- parameters


def _linear_params(store: ParameterStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0) -> None:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def _norm_params(store: ParameterStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def _conv_params(store: ParameterStore, name: str, k: int, cin: int, cout: int, rng: np.random.Generator, gain: float = 1.0) -> None:
    bound = gain * np.sqrt(6.0 / (k * cin + cout))
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(k, cin, cout)))
    store.add(f"{name}.b", np.zeros(cout))


def _lin(p: ParameterStore, name: str, x):
    return ad.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _ln(p: ParameterStore, name: str, x):
    return ad.layer_norm(x) * p[f"{name}.g"] + p[f"{name}.b"]


def init_encoder(store: ParameterStore, prefix: str, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.d
    _linear_params(store, f"{prefix}.node", cfg.node_features, d, rng)
    _linear_params(store, f"{prefix}.pe", cfg.encoding_dim, d, rng)
    _linear_params(store, f"{prefix}.agent", cfg.agent_features, d, rng)
    for att in ("self", "cross"):
        for m in ("q", "k", "v", "o"):
            _linear_params(store, f"{prefix}.{att}.{m}", d, d, rng)
    _norm_params(store, f"{prefix}.ln1", d)
    _linear_params(store, f"{prefix}.ffn1", d, cfg.ffn_hidden, rng)
    _linear_params(store, f"{prefix}.ffn2", cfg.ffn_hidden, d, rng)
    _norm_params(store, f"{prefix}.ln2", d)
    _norm_params(store, f"{prefix}.ln3", d)
    _linear_params(store, f"{prefix}.proj", 2 * d, d, rng)


def _attention(p: ParameterStore, name: str, q_in, kv_in, heads: int) -> Tensor:
    b, nq, d = q_in.shape
    nk = kv_in.shape[1]
    dh = d // heads
    q = _lin(p, f"{name}.q", q_in).reshape(b, nq, heads, dh).transpose(0, 2, 1, 3)
    k = _lin(p, f"{name}.k", kv_in).reshape(b, nk, heads, dh).transpose(0, 2, 3, 1)
    v = _lin(p, f"{name}.v", kv_in).reshape(b, nk, heads, dh).transpose(0, 2, 1, 3)
    w = ad.softmax(ad.matmul(q, k) * (1.0 / np.sqrt(dh)))
    out = ad.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, nq, d)
    return _lin(p, f"{name}.o", out)


def encode(p: ParameterStore, prefix: str, cfg: EncoderConfig, batch: ObsBatch) -> Tensor:
    """d-dimensional state summary from the current and previous observation."""
    if batch.prev_nodes.shape != batch.nodes.shape:
        raise ValueError("current and previous observations are on different graphs")
    bsz = len(batch)
    nodes = np.concatenate([_node_inputs(batch.nodes), _node_inputs(batch.prev_nodes)], axis=0)
    agent = np.concatenate([batch.agent, batch.prev_agent], axis=0)[:, None, :]
    pe = _lin(p, f"{prefix}.pe", batch.encoding)
    h = _lin(p, f"{prefix}.node", nodes) + ad.concat([pe, pe], axis=0)
    h = _ln(p, f"{prefix}.ln1", h + _attention(p, f"{prefix}.self", h, h, cfg.heads))
    ff = _lin(p, f"{prefix}.ffn2", ad.gelu(_lin(p, f"{prefix}.ffn1", h)))
    h = _ln(p, f"{prefix}.ln2", h + ff)
    a = _lin(p, f"{prefix}.agent", agent)
    z = _ln(p, f"{prefix}.ln3", a + _attention(p, f"{prefix}.cross", a, h, cfg.heads))
    z = z.reshape(2 * bsz, cfg.d)
    both = ad.concat([z[:bsz], z[bsz:]], axis=-1)
    return _lin(p, f"{prefix}.proj", both)


def step_embedding(k: np.ndarray, dim: int) -> np.ndarray:
    k = np.asarray(k, dtype=float).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    return np.concatenate([np.sin(k * freqs), np.cos(k * freqs)], axis=1)


def init_denoiser(store: ParameterStore, prefix: str, cfg: DenoiserConfig, d: int, rng: np.random.Generator) -> None:
    c1, c2 = cfg.channels
    kk = cfg.kernel
    _linear_params(store, f"{prefix}.cond1", d + cfg.step_embed, cfg.cond_hidden, rng)
    _linear_params(store, f"{prefix}.cond2", cfg.cond_hidden, cfg.cond_hidden, rng)
    blocks = {"down1": (cfg.action_dim, c1), "down2": (c1, c2), "mid": (c2, c2), "up1": (c2 + c1, c1)}
    for name, (cin, cout) in blocks.items():
        _conv_params(store, f"{prefix}.{name}", kk, cin, cout, rng)
        store.add(f"{prefix}.{name}.film.w", np.zeros((cfg.cond_hidden, 2 * cout)))
        store.add(f"{prefix}.{name}.film.b", np.zeros(2 * cout))
    _conv_params(store, f"{prefix}.out", kk, c1, cfg.action_dim, rng, gain=0.1)


def _pool_matrix(t: int) -> np.ndarray:
    m = np.zeros((t // 2, t))
    for i in range(t // 2):
        m[i, 2 * i : 2 * i + 2] = 0.5
    return m


def _block(p: ParameterStore, name: str, x, cond) -> Tensor:
    h = ad.conv1d(x, p[f"{name}.w"]) + p[f"{name}.b"]
    cout = h.shape[-1]
    film = _lin(p, f"{name}.film", cond)
    scale = film[:, None, :cout]
    shift = film[:, None, cout:]
    return ad.gelu(h * (scale + 1.0) + shift)


def denoise_eps(p: ParameterStore, prefix: str, cfg: DenoiserConfig, s_hat, noisy_actions, k) -> Tensor:
    """Predicted noise for (B, T, 2) noisy action sequences at diffusion steps ``k``."""
    x = ad.as_tensor(noisy_actions)
    if x.ndim != 3 or x.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ad.ShapeError(f"denoise_eps: expected (B, {cfg.horizon}, {cfg.action_dim}) actions, got {x.shape}")
    bsz = x.shape[0]
    k = np.broadcast_to(np.asarray(k), (bsz,))
    s_hat = ad.as_tensor(s_hat)
    if s_hat.shape[0] != bsz:
        raise ad.ShapeError(f"denoise_eps: {s_hat.shape[0]} conditioning rows for {bsz} action sequences")
    temb = Tensor(step_embedding(k, cfg.step_embed))
    cond = ad.gelu(_lin(p, f"{prefix}.cond1", ad.concat([s_hat, temb], axis=-1)))
    cond = ad.gelu(_lin(p, f"{prefix}.cond2", cond))
    t = cfg.horizon
    pool = _pool_matrix(t)
    h1 = _block(p, f"{prefix}.down1", x, cond)
    h2 = _block(p, f"{prefix}.down2", ad.matmul(pool, h1), cond)
    h3 = _block(p, f"{prefix}.mid", h2, cond)
    up = ad.matmul(2.0 * pool.T, h3)
    h4 = _block(p, f"{prefix}.up1", ad.concat([up, h1], axis=-1), cond)
    return ad.conv1d(h4, p[f"{prefix}.out.w"]) + p[f"{prefix}.out.b"]


def init_critic_head(store: ParameterStore, prefix: str, d: int, hidden: int, rng: np.random.Generator) -> None:
    _linear_params(store, f"{prefix}.mlp1", d, hidden, rng)
    _linear_params(store, f"{prefix}.mlp2", hidden, hidden, rng)
    _linear_params(store, f"{prefix}.mlp3", hidden, 1, rng)


def critic_head(p: ParameterStore, prefix: str, s_hat) -> Tensor:
    h = ad.gelu(_lin(p, f"{prefix}.mlp1", s_hat))
    h = ad.gelu(_lin(p, f"{prefix}.mlp2", h))
    return _lin(p, f"{prefix}.mlp3", h).reshape(-1)


# ----------------------------------------------------------------------------- policy container


class PolicyNetworks:
    """Actor (encoder + denoiser) and critic (own encoder + MLP) parameter sets."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0) -> None:
        self.config = config
        rng = np.random.default_rng(seed)
        self.actor = ParameterStore()
        init_encoder(self.actor, "enc", config.encoder, rng)
        init_denoiser(self.actor, "den", config.denoiser, config.encoder.d, rng)
        self.critic = ParameterStore()
        init_encoder(self.critic, "enc", config.encoder, rng)
        init_critic_head(self.critic, "head", config.encoder.d, config.critic_hidden, rng)

    def encode_actor(self, batch: ObsBatch) -> Tensor:
        return encode(self.actor, "enc", self.config.encoder, batch)

    def eps(self, s_hat, noisy_actions, k) -> Tensor:
        return denoise_eps(self.actor, "den", self.config.denoiser, s_hat, noisy_actions, k)

    def value(self, batch: ObsBatch) -> Tensor:
        return critic_head(self.critic, "head", encode(self.critic, "enc", self.config.encoder, batch))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"actor/{k}": v for k, v in self.actor.arrays().items()}
        out.update({f"critic/{k}": v for k, v in self.critic.arrays().items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.actor.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("actor/")})
        self.critic.load_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("critic/")})

    def copy(self) -> "PolicyNetworks":
        other = PolicyNetworks.__new__(PolicyNetworks)
        other.config = self.config
        other.actor = self.actor.copy()
        other.critic = self.critic.copy()
        return other

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        info = {"net_config": self.config.to_dict()}
        info.update(meta or {})
        ad.save_checkpoint(path, self.arrays(), info)

    @classmethod
    def load(cls, path: str | Path) -> tuple["PolicyNetworks", dict]:
        arrays, meta = ad.load_checkpoint(path)
        if "net_config" not in meta:
            raise ad.CheckpointError(f"{path}: checkpoint has no network configuration")
        nets = cls(NetConfig.from_dict(meta["net_config"]), seed=0)
        nets.load_arrays(arrays)
        return nets, meta
