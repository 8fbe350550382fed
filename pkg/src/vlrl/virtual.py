"""Forward/backward latent unrolls, prediction and cycle-consistency losses.

A virtual trajectory starts from a real latent ``z_t``, runs the forward
dynamics model over K sampled actions, then runs the backward model over the
same actions in reverse. The end point ``z'_t`` is pulled toward ``z_t``;
no future observation is consumed on that path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .agents import LossBreakdown
from .envs import ActionSpace
from .nets import ProjectionStack, distance_latent, distance_projection, encode_actions
from .replay import SegmentBatch
from .tensor import ContractError, Tensor

Dynamics = Callable[[Tensor, Tensor], Tensor]


@dataclass
class AuxConfig:
    k: int = 9
    m: int = 10
    lambda_pred: float = 1.0
    lambda_cyc: float = 1.0
    metric: str = "projection"  # or "latent"
    nd_mode: bool = False
    # Baseline+BDM: train the backward model on real segments, no virtual actions
    real_bdm: bool = False
    # how many of the batch's start states spawn M virtual trajectories (None: all)
    cycle_starts: int | None = 16

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.cycle_starts is not None and self.cycle_starts < 1:
            raise ValueError("cycle_starts must be positive or None")
        if self.metric not in ("projection", "latent"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @classmethod
    def defaults_for(cls, space: ActionSpace, **overrides) -> "AuxConfig":
        base = dict(k=9, m=2 * space.n) if space.discrete else dict(k=6, m=10)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass
class VirtualActionSet:
    actions: np.ndarray  # (M, K) ints or (M, K, d_a) reals
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.actions.shape[0]

    @property
    def k(self) -> int:
        return self.actions.shape[1]


def sample_virtual_actions(space: ActionSpace, m: int, k: int, rng: np.random.Generator,
                           batch: int | None = None, seed: int | None = None):
    """Uniform i.i.d. actions: M sequences of K (per start state when ``batch``
    is given, shape (batch, M, K[, d_a]))."""
    if m < 1 or k < 1:
        raise ValueError("m and k must be >= 1")
    lead = (m, k) if batch is None else (batch, m, k)
    if space.discrete:
        acts = rng.integers(space.n, size=lead)
    else:
        acts = rng.uniform(space.low, space.high, size=(*lead, space.dim))
    return VirtualActionSet(acts, seed) if batch is None else acts


def _check_count(actions: Sequence[Tensor], k: int | None) -> None:
    if k is not None and len(actions) != k:
        raise ContractError(f"expected {k} actions, got {len(actions)}")


def forward_unroll(z_t: Tensor, actions: Sequence[Tensor], dm: Dynamics,
                   k: int | None = None) -> list[Tensor]:
    """z^_{t+1} = h(z_t, a_t), z^_{t+k+1} = h(z^_{t+k}, a_{t+k})."""
    _check_count(actions, k)
    out = []
    z = z_t
    for a in actions:
        z = dm(z, a)
        out.append(z)
    return out


def backward_unroll(z_end: Tensor, actions: Sequence[Tensor], bdm: Dynamics,
                    k: int | None = None) -> Tensor:
    """z'_{t+K} = z_end, z'_{t+k-1} = b(z'_{t+k}, a_{t+k-1}) for k = K..1.

    ``actions`` is the forward-ordered list; it is consumed in reverse.
    """
    _check_count(actions, k)
    z = z_end
    for a in reversed(actions):
        z = bdm(z, a)
    return z


def _encoded_steps(space: ActionSpace, actions: np.ndarray) -> list[Tensor]:
    """(N, K[, d_a]) raw actions -> K encoded (N, d_a) tensors."""
    return [encode_actions(space, actions[:, j]) for j in range(actions.shape[1])]


def prediction_loss(z_t: Tensor, seg: SegmentBatch, dm: Dynamics, stack: ProjectionStack,
                    space: ActionSpace) -> Tensor:
    """Batch mean of sum_k d(z^_{t+k}, z~_{t+k}) in projection space, with
    z~ from the target encoder on the observed frames."""
    b, k = len(seg), seg.k
    if k == 0:
        return T.tensor(0.0)
    preds = forward_unroll(z_t, _encoded_steps(space, seg.actions), dm)
    stacked = T.concat(preds, axis=0)  # (K*B, d_z), step-major
    future = seg.obs[:, 1:].transpose(1, 0, 2).reshape(k * b, -1)
    with T.no_grad():
        z_obs = stack.target_encoder(T.tensor(future))
    d = distance_projection(stack, stacked, z_obs)
    return T.sum(d) / b


def cycle_distance(metric: str, stack: ProjectionStack | None) -> Callable[[Tensor, Tensor], Tensor]:
    if metric == "latent":
        return distance_latent
    return lambda zp, zr: distance_projection(stack, zp, zr)


def cycle_loss(z_t: Tensor, z_ref: Tensor, actions: np.ndarray, dm, bdm, space: ActionSpace,
               distance: Callable[[Tensor, Tensor], Tensor], nd_mode: bool = False) -> Tensor:
    """Mean over start states and M virtual trajectories of d_M(z'_t, z_t).

    ``actions`` is (B, M, K[, d_a]) or, for a single start state, (M, K[, d_a]).
    ``z_ref`` is the reference latent for each start (target-encoded for the
    projection metric, the online latent for the latent metric). With
    ``nd_mode`` the forward model runs on detached weights, so this loss
    leaves its parameters untouched while still reaching the encoder.
    """
    actions = np.asarray(actions)
    single = z_t.ndim == 1
    if single:
        z_t, z_ref, actions = z_t.reshape(1, -1), z_ref.reshape(1, -1), actions[None]
    b, m, k = actions.shape[:3]
    if z_t.shape[0] != b:
        raise ContractError(f"{z_t.shape[0]} start states but actions for {b}")
    if k == 0:
        return T.tensor(0.0)
    rows = np.repeat(np.arange(b), m)
    z_rep = T.take_rows(z_t, rows)
    flat = actions.reshape(b * m, k, *actions.shape[3:])
    steps = _encoded_steps(space, flat)
    h = dm
    if nd_mode:
        frozen = [p.detach() for p in dm.parameters()]
        h = lambda z, a: dm(z, a, frozen)  # noqa: E731
    z_end = forward_unroll(z_rep, steps, h)[-1]
    z_back = backward_unroll(z_end, steps, bdm)
    with T.no_grad():
        ref = T.take_rows(z_ref, rows)
    return T.mean(distance(z_back, ref))


def real_backward_loss(seg: SegmentBatch, encoder, bdm, stack: ProjectionStack,
                       space: ActionSpace) -> Tensor:
    """Backward prediction on real segments (Baseline+BDM).

    Starts from the online latent of o_{t+K}, runs b with the recorded actions
    and compares each z'_{t+k-1} with the target-encoded o_{t+k-1}. Averaged
    over the K steps so the value lives in [0, 4] like the cycle loss.
    """
    b, k = len(seg), seg.k
    if k == 0:
        return T.tensor(0.0)
    steps = _encoded_steps(space, seg.actions)
    z = encoder(T.tensor(seg.obs[:, k]))
    preds = []
    for j in range(k - 1, -1, -1):
        z = bdm(z, steps[j])
        preds.append(z)
    stacked = T.concat(preds, axis=0)
    earlier = seg.obs[:, k - 1::-1].transpose(1, 0, 2).reshape(k * b, -1)
    with T.no_grad():
        z_obs = stack.target_encoder(T.tensor(earlier))
    return T.sum(distance_projection(stack, stacked, z_obs)) / (b * k)


def total_loss(l_rl: Tensor, l_pred: Tensor, l_cyc: Tensor, cfg: AuxConfig,
               step: int = 0) -> tuple[Tensor, LossBreakdown]:
    """L_total = L_rl + lambda_pred L_pred + lambda_cyc L_cyc."""
    total = l_rl + cfg.lambda_pred * l_pred + cfg.lambda_cyc * l_cyc
    return total, LossBreakdown(l_rl.item(), l_pred.item(), l_cyc.item(), total.item(), step)
