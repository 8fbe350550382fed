"""Policy heads on top of the shared encoder: double-Q for discrete control,
a simplified soft actor-critic for continuous control."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nets import MLP, Encoder, ema_update
from .replay import RLBatch
from .tensor import Tensor

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_LOG2 = math.log(2.0)


@dataclass
class LossBreakdown:
    rl: float
    pred: float
    cyc: float
    total: float
    step: int = 0

    def identity_gap(self, lambda_pred: float, lambda_cyc: float) -> float:
        """Relative violation of total = rl + lp*pred + lc*cyc."""
        expect = self.rl + lambda_pred * self.pred + lambda_cyc * self.cyc
        return abs(self.total - expect) / max(abs(expect), 1e-12)


def linear_epsilon(step: int, total_steps: int, start: float = 1.0, end: float = 0.05,
                   fraction: float = 0.2) -> float:
    horizon = max(1, int(fraction * total_steps))
    if step >= horizon:
        return end
    return start + (end - start) * step / horizon


class QHead:
    """Online and EMA-target Q networks over the latent state."""

    def __init__(self, d_z: int, n_actions: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (128,), gamma: float = 0.99):
        self.n_actions = n_actions
        self.gamma = gamma
        self.q = MLP([d_z, *hidden, n_actions], rng, "q")
        self.q_target = self.q.frozen_copy("q_target")

    def parameters(self) -> list[Tensor]:
        return self.q.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.q.named_parameters(), **self.q_target.named_parameters()}

    def ema_update(self, tau: float) -> None:
        ema_update(self.q.parameters(), self.q_target.parameters(), tau)


class SacHead:
    """Tanh-squashed diagonal Gaussian actor and twin critics with EMA targets."""

    def __init__(self, d_z: int, d_a: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (128, 128), gamma: float = 0.99, alpha: float = 0.1):
        self.d_a = d_a
        self.gamma = gamma
        self.alpha = alpha
        self.actor = MLP([d_z, *hidden, 2 * d_a], rng, "actor")
        self.q1 = MLP([d_z + d_a, *hidden, 1], rng, "q1")
        self.q2 = MLP([d_z + d_a, *hidden, 1], rng, "q2")
        self.q1_target = self.q1.frozen_copy("q1_target")
        self.q2_target = self.q2.frozen_copy("q2_target")

    def parameters(self) -> list[Tensor]:
        return self.actor.parameters() + self.q1.parameters() + self.q2.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for net in (self.actor, self.q1, self.q2, self.q1_target, self.q2_target):
            out.update(net.named_parameters())
        return out

    def ema_update(self, tau: float) -> None:
        ema_update(self.q1.parameters(), self.q1_target.parameters(), tau)
        ema_update(self.q2.parameters(), self.q2_target.parameters(), tau)

    def gaussian(self, z: Tensor) -> tuple[Tensor, Tensor]:
        out = self.actor(z)
        mu = out[..., : self.d_a]
        log_std = T.clip(out[..., self.d_a:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def sample(self, z: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reparameterised draw ``tanh(mu + std * noise)`` and its log-density."""
        mu, log_std = self.gaussian(z)
        return squashed_sample(mu, log_std, noise)

    def critics(self, z: Tensor, a: Tensor, detach_params: bool = False) -> tuple[Tensor, Tensor]:
        za = T.concat([z, a], axis=-1)
        if detach_params:
            return (self.q1(za, self.q1.detached_params()).reshape(-1),
                    self.q2(za, self.q2.detached_params()).reshape(-1))
        return self.q1(za).reshape(-1), self.q2(za).reshape(-1)


def squashed_sample(mu: Tensor, log_std: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    eps = T.tensor(noise)
    u = mu + T.exp(log_std) * eps
    a = T.tanh(u)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_jac = 2.0 * (_LOG2 - u - T.softplus(-2.0 * u))
    log_prob = -0.5 * T.square(eps) - log_std - _HALF_LOG_2PI - log_jac
    return a, T.sum(log_prob, axis=-1)


def act(head, z: Tensor, mode: str, rng: np.random.Generator, epsilon: float = 0.0):
    """Discrete: epsilon-greedy (train) / greedy (eval). Continuous: squashed
    Gaussian sample (train) / tanh(mean) (eval)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    with T.no_grad():
        if isinstance(head, QHead):
            if mode == "train" and rng.random() < epsilon:
                return int(rng.integers(head.n_actions))
            return int(np.argmax(head.q(z).data))
        mu, log_std = head.gaussian(z)
        if mode == "eval":
            return np.tanh(mu.data).astype(float)
        a, _ = squashed_sample(mu, log_std, rng.standard_normal(mu.shape))
        return a.data.astype(float)


def q_loss(head: QHead, batch: RLBatch, encoder: Encoder, target_encoder: Encoder | None = None) -> Tensor:
    """Mean squared double-Q TD error.

    y = R_n + gamma^n (1 - done) Q_target(z'_tgt, argmax_a Q(z'_online, a)),
    where z'_tgt comes from the target encoder (the online one when absent).
    """
    z = encoder(T.tensor(batch.obs))
    q_sa = T.pick(head.q(z), batch.actions)
    with T.no_grad():
        nxt = T.tensor(batch.next_obs)
        a_star = np.argmax(head.q(encoder(nxt)).data, axis=1)
        z_tgt = (target_encoder or encoder)(nxt)
        q_next = head.q_target(z_tgt).data[np.arange(len(a_star)), a_star]
        y = batch.returns + batch.discount * (1.0 - batch.done) * q_next
    return T.mean(T.square(q_sa - T.tensor(y)))


def sac_losses(head: SacHead, batch: RLBatch, encoder: Encoder, target_encoder: Encoder | None,
               rng: np.random.Generator | None = None,
               noise: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
    """Critic and actor losses. Only the critic loss reaches the encoder; the
    actor loss sees detached latents and detached critic weights."""
    b = len(batch)
    if noise is None:
        noise = (rng.standard_normal((b, head.d_a)), rng.standard_normal((b, head.d_a)))
    z = encoder(T.tensor(batch.obs))
    with T.no_grad():
        nxt = T.tensor(batch.next_obs)
        a_next, logp_next = head.sample(encoder(nxt), noise[0])
        z_tgt = (target_encoder or encoder)(nxt)
        za = T.concat([z_tgt, a_next], axis=-1)
        q_next = np.minimum(head.q1_target(za).data, head.q2_target(za).data).reshape(-1)
        soft = q_next - head.alpha * logp_next.data
        y = T.tensor(batch.returns + batch.discount * (1.0 - batch.done) * soft)
    q1, q2 = head.critics(z, T.tensor(batch.actions))
    critic = T.mean(T.square(q1 - y)) + T.mean(T.square(q2 - y))

    zd = z.detach()
    a, logp = head.sample(zd, noise[1])
    c1, c2 = head.critics(zd, a, detach_params=True)
    actor = T.mean(head.alpha * logp - T.minimum(c1, c2))
    return critic, actor
