"""Encoder, forward/backward dynamics models, projection heads and EMA targets."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import tensor as T
from .envs import ActionSpace
from .tensor import ContractError, DimensionError, Tensor


def _init_linear(rng: np.random.Generator, n_in: int, n_out: int, name: str) -> list[Tensor]:
    bound = 1.0 / np.sqrt(n_in)
    w = T.tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=f"{name}.w")
    b = T.tensor(rng.uniform(-bound, bound, size=(n_out,)), requires_grad=True, name=f"{name}.b")
    return [w, b]


class MLP:
    """Affine layers with relu between them and a linear output.

    ``params`` passed to ``__call__`` replace the module's own tensors for that
    call only; used to evaluate the same function with detached weights.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        self.params: list[Tensor] = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params += _init_linear(rng, a, b, f"{name}.{i}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def __call__(self, x: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        ps = self.params if params is None else params
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != {self.n_in}")
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        n_layers = len(ps) // 2
        for i in range(n_layers):
            h = T.affine(h, ps[2 * i], ps[2 * i + 1], relu=i < n_layers - 1)
        return h.reshape(-1) if squeeze else h

    def detached_params(self) -> list[Tensor]:
        return [p.detach() for p in self.params]

    def frozen_copy(self, name: str) -> "MLP":
        """Deep copy whose tensors never require grad (EMA targets)."""
        other = copy.copy(self)
        other.name = name
        other.params = [
            T.tensor(p.data.copy(), name=p.name.replace(self.name, name, 1)) for p in self.params
        ]
        return other


class Encoder(MLP):
    """Observation vector -> latent state z. Counts forward passes."""

    def __init__(self, d_obs: int, d_z: int, hidden: Sequence[int], rng: np.random.Generator,
                 name: str = "encoder"):
        super().__init__([d_obs, *hidden, d_z], rng, name)
        self.calls = 0
        self.rows = 0

    def __call__(self, x: Tensor, params=None) -> Tensor:
        self.calls += 1
        self.rows += 1 if x.ndim == 1 else x.shape[0]
        return super().__call__(x, params)

    def frozen_copy(self, name: str) -> "Encoder":
        other = super().frozen_copy(name)
        other.calls = other.rows = 0
        return other


class DynamicsModel:
    """Residual latent transition ``z + net(concat(z, a))``.

    The net has two relu hidden layers of width ``2*d_z`` and a linear output.
    The backward model uses the identical architecture.
    """

    def __init__(self, d_z: int, d_a: int, rng: np.random.Generator, name: str = "dm",
                 hidden: int | None = None):
        hidden = 2 * d_z if hidden is None else hidden
        self.d_z, self.d_a = d_z, d_a
        self.name = name
        self.net = MLP([d_z + d_a, hidden, hidden, d_z], rng, name)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return self.net.named_parameters()

    def __call__(self, z: Tensor, a: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        if z.shape[-1] != self.d_z or a.shape[-1] != self.d_a:
            raise DimensionError(
                f"{self.name}: got z{z.shape} a{a.shape}, expected widths {self.d_z}/{self.d_a}")
        return z + self.net(T.concat([z, a], axis=-1), params)


class BackwardDynamicsModel(DynamicsModel):
    def __init__(self, d_z: int, d_a: int, rng: np.random.Generator, name: str = "bdm",
                 hidden: int | None = None):
        super().__init__(d_z, d_a, rng, name, hidden)


def dm_step(dm, z: Tensor, a: Tensor) -> Tensor:
    return dm(z, a)


def bdm_step(bdm, z: Tensor, a: Tensor) -> Tensor:
    return bdm(z, a)


def encode_actions(space: ActionSpace, actions) -> Tensor:
    """One-hot rows for discrete spaces, the raw clipped vector for continuous ones."""
    actions = np.asarray(actions)
    if space.discrete:
        idx = actions.astype(np.intp)
        if np.any(idx < 0) or np.any(idx >= space.n):
            raise ContractError(f"discrete action out of range 0..{space.n - 1}")
        return T.tensor(np.eye(space.n)[idx])
    if actions.shape[-1] != space.dim:
        raise DimensionError(f"continuous action width {actions.shape[-1]} != {space.dim}")
    return T.tensor(np.clip(actions, space.low, space.high))


def ema_update(online: Sequence[Tensor], target: Sequence[Tensor], tau: float) -> None:
    """theta_target <- tau * theta_target + (1 - tau) * theta_online, in place."""
    if len(online) != len(target):
        raise ContractError(f"EMA over mismatched lists ({len(online)} vs {len(target)})")
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    for o, t in zip(online, target):
        if o.shape != t.shape:
            raise ContractError(f"EMA shape mismatch {o.shape} vs {t.shape}")
        if tau == 0.0:
            t.data[...] = o.data
        elif tau != 1.0:
            t.data *= tau
            t.data += (1.0 - tau) * o.data


class ProjectionStack:
    """Online projector g and predictor q, plus EMA copies of g and the encoder."""

    def __init__(self, encoder: Encoder, d_p: int, rng: np.random.Generator):
        d_z = encoder.n_out
        self.projector = MLP([d_z, d_p], rng, "projector")
        self.predictor = MLP([d_p, d_p], rng, "predictor")
        self.target_projector = self.projector.frozen_copy("target_projector")
        self.target_encoder = encoder.frozen_copy("target_encoder")
        self.online_encoder = encoder

    def online_parameters(self) -> list[Tensor]:
        return self.projector.parameters() + self.predictor.parameters()

    def ema_update(self, tau: float) -> None:
        ema_update(self.online_encoder.parameters(), self.target_encoder.parameters(), tau)
        ema_update(self.projector.parameters(), self.target_projector.parameters(), tau)


def encode(encoder: Encoder, stack: ProjectionStack | None, obs, branch: str = "online") -> Tensor:
    obs = T.as_tensor(obs)
    if branch == "online":
        return encoder(obs)
    if branch == "target":
        if stack is None:
            raise ContractError("target branch needs a projection stack")
        with T.no_grad():
            return stack.target_encoder(obs)
    raise ContractError(f"unknown branch {branch!r}")


def project_predict(stack: ProjectionStack, z: Tensor) -> Tensor:
    return stack.predictor(stack.projector(z))


def project_target(stack: ProjectionStack, z: Tensor) -> Tensor:
    with T.no_grad():
        return stack.target_projector(z.detach())


def distance_projection(stack: ProjectionStack, z_pred: Tensor, z_ref: Tensor) -> Tensor:
    """2 - 2 cos(q(g(z_pred)), g~(z_ref)); no gradient through the reference side."""
    if z_pred.shape != z_ref.shape:
        raise DimensionError(f"distance: shapes {z_pred.shape} and {z_ref.shape} differ")
    return 2.0 - 2.0 * T.cosine_similarity(project_predict(stack, z_pred), project_target(stack, z_ref))


def distance_latent(z_pred: Tensor, z_ref: Tensor) -> Tensor:
    """2 - 2 cos(z_pred, z_ref) on raw latents; reference side is stop-gradient."""
    if z_pred.shape != z_ref.shape:
        raise DimensionError(f"distance: shapes {z_pred.shape} and {z_ref.shape} differ")
    return 2.0 - 2.0 * T.cosine_similarity(z_pred, z_ref.detach())
