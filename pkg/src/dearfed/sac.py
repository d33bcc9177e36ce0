"""Soft actor-critic over simplex-valued aggregation weights.

The actor outputs a diagonal Gaussian; samples are squashed by tanh and the
squashed vector is mapped onto the probability simplex by a softmax. The
log-probability carries the tanh change-of-variable correction only: the
softmax is treated as the environment's interpretation of the action, and
the twin critics consume the pre-softmax vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeding
from .params import ModelParams, layout_from_shapes
from .replay import ReplayBuffer, Transition

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RewardConfig:
    """Weights and constants of the compound round reward."""

    delta_target: float = 0.02  # target validation MAPE, as a fraction
    kappa: float = 64.0         # base of the exponential accuracy sub-reward
    beta1: float = 0.5
    beta2: float = 0.5

    def __post_init__(self):
        if self.kappa <= 1.0:
            raise ValueError("kappa must exceed 1")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("reward weights must be nonnegative")


def compute_reward(cfg: RewardConfig, delta_t: float, n_bar: np.ndarray,
                   action: np.ndarray) -> float:
    """beta1 * (kappa^(target - delta) - 1) + beta2 * (-mean((n_bar - a)^2))."""
    n_bar = np.asarray(n_bar, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if n_bar.shape != action.shape:
        raise ValueError(f"mark/action lengths differ: {n_bar.shape} vs {action.shape}")
    delta_t = min(1.0, max(0.0, float(delta_t)))
    r1 = cfg.kappa ** (cfg.delta_target - delta_t) - 1.0
    r2 = -float(np.mean((n_bar - action) ** 2))
    return cfg.beta1 * r1 + cfg.beta2 * r2


def build_state(e_global: np.ndarray, embeddings, losses, a_prev) -> np.ndarray:
    """Fixed-order state: (e_global, e_1..e_K, l_1..l_K, a_prev)."""
    embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
    losses = np.asarray(losses, dtype=np.float64)
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if len(embeddings) != losses.size or losses.size != a_prev.size:
        raise ValueError(
            f"need K embeddings, K losses, K previous weights; got "
            f"{len(embeddings)}, {losses.size}, {a_prev.size}"
        )
    e_global = np.asarray(e_global, dtype=np.float64)
    if any(e.shape != e_global.shape for e in embeddings):
        raise ValueError("embedding lengths differ")
    return np.concatenate([e_global, *embeddings, losses, a_prev])


def state_dim(k: int, e_dim: int) -> int:
    return (k + 1) * e_dim + 2 * k


def _mlp(net: ad.Net, prefix: str, sizes, rng) -> list:
    names = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        net.add_param(f"{prefix}.w{i}", ad.init_params(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in)))
        net.add_param(f"{prefix}.b{i}", np.zeros(fan_out))
        names.append(f"{prefix}.w{i}")
    return names


def _mlp_forward(net: ad.Net, prefix: str, x: ad.Tensor, depth: int,
                 hidden_activation=ad.tanh) -> ad.Tensor:
    h = x
    for i in range(1, depth + 1):
        h = ad.matmul(h, net.params[f"{prefix}.w{i}"]) + net.params[f"{prefix}.b{i}"]
        if i < depth:
            h = hidden_activation(h)
    return h


class Actor:
    """Gaussian policy head: state -> (mu, bounded log-std) per action dim."""

    def __init__(self, s_dim: int, k: int, hidden: int, rng):
        self.k = k
        self.net = ad.Net()
        _mlp(self.net, "body", (s_dim, hidden, hidden), rng)
        _mlp(self.net, "mu", (hidden, k), rng)
        _mlp(self.net, "log_std", (hidden, k), rng)

    def forward(self, states: ad.Tensor):
        h = ad.tanh(_mlp_forward(self.net, "body", states, 2))
        mu = _mlp_forward(self.net, "mu", h, 1)
        raw = _mlp_forward(self.net, "log_std", h, 1)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (ad.tanh(raw) + 1.0)
        return mu, log_std


class Critic:
    """Q(s, u) on the concatenated state and pre-softmax action."""

    def __init__(self, s_dim: int, k: int, hidden: int, rng):
        self.net = ad.Net()
        _mlp(self.net, "q", (s_dim + k, hidden, hidden, 1), rng)

    def forward(self, states: ad.Tensor, actions_raw: ad.Tensor) -> ad.Tensor:
        x = ad.concatenate([states, actions_raw], axis=1)
        return _mlp_forward(self.net, "q", x, 3)


def softmax(u: np.ndarray) -> np.ndarray:
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SacConfig:
    k: int = 4
    e_dim: int = 64
    hidden: int = 128
    lr: float = 3e-4
    gamma: float = 0.99
    rho: float = 5e-3            # soft target update rate
    batch_size: int = 128
    auto_temperature: bool = True
    init_temperature: float = 0.2
    clip_norm: float = 5.0
    normalize_observations: bool = True
    state_size: int = None       # derived from (k, e_dim) when None

    @property
    def s_dim(self) -> int:
        return self.state_size if self.state_size is not None else state_dim(self.k, self.e_dim)

    @property
    def target_entropy(self) -> float:
        return -float(self.k)


class ObsNormalizer:
    """Running per-dimension standardization of observed states.

    Updated only while the agent is collecting experience; frozen statistics
    make evaluation deterministic. Applied at network-input time, so the
    stored transitions keep their raw states.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def observe(self, state: np.ndarray) -> None:
        self.count += 1
        delta = state - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (state - self.mean)

    def apply(self, states: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return states
        var = self.m2 / (self.count - 1)
        return (states - self.mean) / np.sqrt(var + 1e-8)

    def state_arrays(self):
        return np.concatenate([[float(self.count)], self.mean, self.m2])

    def load_state_arrays(self, flat: np.ndarray) -> None:
        dim = self.mean.size
        self.count = int(flat[0])
        self.mean = flat[1:1 + dim].copy()
        self.m2 = flat[1 + dim:1 + 2 * dim].copy()


class SacAgent:
    """Twin-critic SAC with auto-tuned entropy temperature."""

    def __init__(self, cfg: SacConfig, seed: int = 0):
        self.cfg = cfg
        rng = seeding.stream(seed, seeding.AGENT_INIT)
        self.actor = Actor(cfg.s_dim, cfg.k, cfg.hidden, rng)
        self.q1 = Critic(cfg.s_dim, cfg.k, cfg.hidden, rng)
        self.q2 = Critic(cfg.s_dim, cfg.k, cfg.hidden, rng)
        self.q1_target = Critic(cfg.s_dim, cfg.k, cfg.hidden, rng)
        self.q2_target = Critic(cfg.s_dim, cfg.k, cfg.hidden, rng)
        self.q1_target.net.set_vector(self.q1.net.get_vector())
        self.q2_target.net.set_vector(self.q2.net.get_vector())
        self.log_alpha = math.log(cfg.init_temperature)
        self.obs_norm = ObsNormalizer(cfg.s_dim) if cfg.normalize_observations else None
        self._rng = seeding.stream(seed, seeding.AGENT_SAMPLE)
        self._adam = {
            "actor": ad.AdamState.for_size(self.actor.net.num_params, cfg.lr),
            "q1": ad.AdamState.for_size(self.q1.net.num_params, cfg.lr),
            "q2": ad.AdamState.for_size(self.q2.net.num_params, cfg.lr),
            "alpha": ad.AdamState.for_size(1, cfg.lr),
        }

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def observe(self, state: np.ndarray) -> None:
        """Feed one freshly seen state into the running normalization."""
        if self.obs_norm is not None:
            self.obs_norm.observe(np.asarray(state, dtype=np.float64))

    def _prep(self, states: np.ndarray) -> np.ndarray:
        return self.obs_norm.apply(states) if self.obs_norm is not None else states

    # -- acting ---------------------------------------------------------------

    def _policy(self, states: np.ndarray, noise: np.ndarray = None):
        """Reparameterized tanh-Gaussian draw as graph tensors."""
        mu, log_std = self.actor.forward(ad.Tensor(self._prep(states)))
        std = ad.exp(log_std)
        if not np.all(np.isfinite(std.data)) or np.any(std.data <= 0.0):
            raise FloatingPointError("policy std must be finite and positive")
        if noise is None:
            z = mu
            gauss_logp = ad.sum_(-log_std, axis=1, keepdims=True) + 0.0
        else:
            z = mu + std * ad.Tensor(noise)
            gauss_logp = ad.sum_(-log_std - 0.5 * ad.Tensor(noise * noise) - 0.5 * LOG_2PI,
                                 axis=1, keepdims=True)
        u = ad.tanh(z)
        squash = ad.sum_(ad.log(1.0 - u * u + 1e-6), axis=1, keepdims=True)
        return u, gauss_logp - squash

    def sample_action(self, state: np.ndarray, deterministic: bool = False):
        """One action for one state: (simplex weights, pre-softmax vector)."""
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.cfg.s_dim,):
            raise ValueError(f"state shaped {state.shape}, expected ({self.cfg.s_dim},)")
        noise = None if deterministic else self._rng.standard_normal((1, self.cfg.k))
        u, _ = self._policy(state[None], noise)
        u = u.data[0]
        return softmax(u), u

    # -- learning -------------------------------------------------------------

    def update(self, buffer: ReplayBuffer, round_fraction: float = 0.0) -> dict:
        """One SAC gradient step from a prioritized batch; returns diagnostics."""
        cfg = self.cfg
        batch = buffer.sample(cfg.batch_size, round_fraction)
        n = batch.states.shape[0]

        # TD target from target critics and the current policy at s'
        noise = self._rng.standard_normal((n, cfg.k))
        u2, logp2 = self._policy(batch.next_states, noise)
        next_states = ad.Tensor(self._prep(batch.next_states))
        q1t = self.q1_target.forward(next_states, ad.Tensor(u2.data))
        q2t = self.q2_target.forward(next_states, ad.Tensor(u2.data))
        soft_q = np.minimum(q1t.data, q2t.data) - self.alpha * logp2.data
        y = batch.rewards[:, None] + cfg.gamma * soft_q

        # critic step (importance-weighted)
        iw = ad.Tensor(batch.weights[:, None])
        states = ad.Tensor(self._prep(batch.states))
        for net in (self.q1.net, self.q2.net, self.actor.net):
            net.zero_grad()
        q1 = self.q1.forward(states, ad.Tensor(batch.actions_raw))
        q2 = self.q2.forward(states, ad.Tensor(batch.actions_raw))
        d1, d2 = q1 - ad.Tensor(y), q2 - ad.Tensor(y)
        critic_loss = ad.mean(iw * (d1 * d1)) + ad.mean(iw * (d2 * d2))
        self._require_finite(critic_loss, "critic loss")
        critic_loss.backward()
        self._step("q1", self.q1.net)
        self._step("q2", self.q2.net)

        td = 0.5 * (np.abs(d1.data) + np.abs(d2.data))[:, 0]
        buffer.update_priorities(batch.indices, td)

        # actor step (reparameterized, critics held fixed)
        for net in (self.q1.net, self.q2.net, self.actor.net):
            net.zero_grad()
        noise = self._rng.standard_normal((n, cfg.k))
        u_new, logp_new = self._policy(batch.states, noise)
        q_min = ad.minimum(
            self.q1.forward(states, u_new),
            self.q2.forward(states, u_new),
        )
        actor_loss = ad.mean(self.alpha * logp_new - q_min)
        self._require_finite(actor_loss, "actor loss")
        actor_loss.backward()
        self._step("actor", self.actor.net)

        # temperature step toward the entropy target
        if cfg.auto_temperature:
            alpha_grad = -float(np.mean(logp_new.data + cfg.target_entropy))
            vec = np.array([self.log_alpha])
            ad.adam_step(self._adam["alpha"], vec, np.array([alpha_grad]))
            self.log_alpha = float(vec[0])

        self._soft_update(self.q1.net, self.q1_target.net)
        self._soft_update(self.q2.net, self.q2_target.net)
        return {
            "critic_loss": critic_loss.item(),
            "actor_loss": actor_loss.item(),
            "alpha": self.alpha,
            "mean_q": float(np.minimum(q1.data, q2.data).mean()),
        }

    def _step(self, key: str, net: ad.Net) -> None:
        grads = ad.clip_global_norm(net.grad_vector(), self.cfg.clip_norm)
        vec = net.get_vector()
        ad.adam_step(self._adam[key], vec, grads)
        net.set_vector(vec)

    def _soft_update(self, src: ad.Net, dst: ad.Net) -> None:
        rho = self.cfg.rho
        dst.set_vector(rho * src.get_vector() + (1.0 - rho) * dst.get_vector())

    @staticmethod
    def _require_finite(loss: ad.Tensor, what: str) -> None:
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite {what}: {loss.item()}")

    # -- checkpointing ----------------------------------------------------------

    def to_model_params(self) -> ModelParams:
        nets = self._role_nets()
        shapes = []
        for role, net in nets.items():
            shapes.extend((f"{role}.{name}", t.data.shape) for name, t in net.params.items())
        shapes.append(("log_alpha", (1,)))
        parts = [net.get_vector() for net in nets.values()] + [[self.log_alpha]]
        if self.obs_norm is not None:
            shapes.append(("obs_norm", (1 + 2 * self.cfg.s_dim,)))
            parts.append(self.obs_norm.state_arrays())
        vec = np.concatenate(parts)
        return ModelParams(vec, layout_from_shapes(shapes))

    def load_model_params(self, params: ModelParams) -> None:
        off = 0
        for net in self._role_nets().values():
            n = net.num_params
            net.set_vector(params.values[off:off + n])
            off += n
        self.log_alpha = float(params.values[off])
        off += 1
        if self.obs_norm is not None:
            self.obs_norm.load_state_arrays(params.values[off:off + 1 + 2 * self.cfg.s_dim])

    def _role_nets(self) -> dict:
        return {
            "actor": self.actor.net,
            "q1": self.q1.net,
            "q2": self.q2.net,
            "q1_target": self.q1_target.net,
            "q2_target": self.q2_target.net,
        }
