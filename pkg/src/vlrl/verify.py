"""Finite-difference verification suite for every tape op and every loss.

Each case builds a fresh random instance and returns ``(f, inputs)`` for
:func:`grad_check`. Loss cases perturb only parameters the loss is meant to
differentiate; quantities computed under stop-gradient (TD targets, EMA
references) would otherwise show up in the numeric slope but not the
analytic one.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .agents import QHead, SacHead, q_loss, sac_losses
from .envs import ActionSpace
from .gradcheck import GradCheckReport, grad_check
from .nets import BackwardDynamicsModel, DynamicsModel, Encoder, ProjectionStack, distance_latent
from .replay import RLBatch, SegmentBatch
from .virtual import cycle_distance, cycle_loss, prediction_loss, sample_virtual_actions

Case = Callable[[np.random.Generator], tuple[Callable, list[T.Tensor]]]


@contextmanager
def precision(name: str):
    old = "f64" if T.get_dtype() == np.float64 else "f32"
    T.set_precision(name)
    try:
        yield
    finally:
        T.set_precision(old)


def _param(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.tensor(x, requires_grad=True)


def _shape(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def _unary(fn, positive=False) -> Case:
    def case(rng):
        x = _param(rng, *_shape(rng), positive=positive)
        w = rng.standard_normal(x.shape)
        return (lambda x: T.sum(fn(x) * T.tensor(w))), [x]
    return case


def _binary(fn) -> Case:
    def case(rng):
        shape = _shape(rng)
        a, b = _param(rng, *shape), _param(rng, *shape)
        w = rng.standard_normal(shape)
        return (lambda a, b: T.sum(fn(a, b) * T.tensor(w))), [a, b]
    return case


def _scalar_broadcast(rng):
    x, s = _param(rng, *_shape(rng)), _param(rng)
    return (lambda x, s: T.sum(T.tanh(x * s + s))), [x, s]


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    a, b = _param(rng, m, k), _param(rng, k, n)
    w = rng.standard_normal((m, n))
    return (lambda a, b: T.sum(T.matmul(a, b) * T.tensor(w))), [a, b]


def _affine(relu):
    def case(rng):
        m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
        x, w, b = _param(rng, m, k), _param(rng, k, n), _param(rng, n)
        c = rng.standard_normal((m, n))
        return (lambda x, w, b: T.sum(T.affine(x, w, b, relu=relu) * T.tensor(c))), [x, w, b]
    return case


def _reductions(rng):
    x = _param(rng, *_shape(rng))
    axis = int(rng.integers(0, 2))
    return (lambda x: T.sum(T.square(T.sum(x, axis))) + T.mean(x) * 3.0), [x]


def _reshape_concat(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, int(rng.integers(1, 4)))
    w = rng.standard_normal(6)
    return (lambda a, b: T.sum(T.tanh(T.concat([a, b], axis=-1)))
            + T.sum(T.reshape(a, (6,)) * T.tensor(w))), [a, b]


def _indexing(rng):
    x = _param(rng, 5, 3)
    rows = rng.integers(0, 5, size=7)
    cols = rng.integers(0, 3, size=5)
    return (lambda x: T.sum(T.square(T.take_rows(x, rows))) + T.sum(T.pick(x, cols))
            + T.sum(T.tanh(x[1:4, ..., :2]))), [x]


def _cosine(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    x, y = _param(rng, n, d), _param(rng, n, d)
    w = rng.standard_normal(n)
    return (lambda x, y: T.sum(T.cosine_similarity(x, y) * T.tensor(w))), [x, y]


def _two_layer(rng):
    x = T.tensor(rng.standard_normal((4, 3)))
    w1, b1, w2, b2 = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5, 2), _param(rng, 2)
    y = rng.standard_normal((4, 2))
    return (lambda w1, b1, w2, b2:
            T.mean(T.square(T.affine(T.affine(x, w1, b1, relu=True), w2, b2) - T.tensor(y)))), \
        [w1, b1, w2, b2]


def _rl_batch(rng, b, d_obs, actions):
    return RLBatch(obs=rng.standard_normal((b, d_obs)), actions=actions,
                   returns=rng.standard_normal(b), next_obs=rng.standard_normal((b, d_obs)),
                   done=(rng.random(b) < 0.3).astype(float),
                   discount=np.full(b, 0.99 ** 3))


def _q_loss(rng):
    enc = Encoder(6, 4, (8,), rng)
    head = QHead(4, 3, rng, hidden=(8,))
    target = enc.frozen_copy("target_encoder")
    batch = _rl_batch(rng, 5, 6, rng.integers(0, 3, size=5))
    params = enc.parameters() + head.parameters()
    return (lambda *_: q_loss(head, batch, enc, target)), params


def _sac(which):
    def case(rng):
        enc = Encoder(6, 4, (8,), rng)
        head = SacHead(4, 2, rng, hidden=(8,))
        target = enc.frozen_copy("target_encoder")
        batch = _rl_batch(rng, 5, 6, rng.uniform(-1, 1, size=(5, 2)))
        noise = (rng.standard_normal((5, 2)), rng.standard_normal((5, 2)))
        if which == "critic":
            params = head.q1.parameters() + head.q2.parameters()
            return (lambda *_: sac_losses(head, batch, enc, target, noise=noise)[0]), params
        return (lambda *_: sac_losses(head, batch, enc, target, noise=noise)[1]), head.actor.parameters()
    return case


def _aux_parts(rng, discrete):
    space = ActionSpace.discrete_space(3) if discrete else ActionSpace.continuous_space(2)
    d_a = space.encoding_width
    enc = Encoder(6, 4, (8,), rng)
    stack = ProjectionStack(enc, 3, rng)
    dm = DynamicsModel(4, d_a, rng, hidden=8)
    bdm = BackwardDynamicsModel(4, d_a, rng, hidden=8)
    return space, enc, stack, dm, bdm


def _pred_loss(discrete):
    def case(rng):
        space, enc, stack, dm, bdm = _aux_parts(rng, discrete)
        b, k = 3, int(rng.integers(1, 4))
        acts = (rng.integers(0, 3, size=(b, k)) if discrete
                else rng.uniform(-1, 1, size=(b, k, 2)))
        seg = SegmentBatch(rng.standard_normal((b, k + 1, 6)), acts, np.zeros((b, k)),
                           np.zeros((b, k), bool), np.arange(b))
        params = enc.parameters() + dm.parameters() + stack.online_parameters()

        def f(*_):
            return prediction_loss(enc(T.tensor(seg.obs[:, 0])), seg, dm, stack, space)
        return f, params
    return case


def _cyc_loss(discrete, metric="projection", nd_mode=False):
    def case(rng):
        space, enc, stack, dm, bdm = _aux_parts(rng, discrete)
        b, m, k = 2, 3, int(rng.integers(1, 4))
        obs = rng.standard_normal((b, 6))
        acts = sample_virtual_actions(space, m, k, rng, batch=b)
        dist = cycle_distance(metric, stack)
        if metric == "latent":
            # the reference is the detached online latent, so only the models are checked
            params = dm.parameters() + bdm.parameters()
        else:
            params = enc.parameters() + bdm.parameters() + stack.online_parameters()
            if not nd_mode:
                params += dm.parameters()

        def f(*_):
            z = enc(T.tensor(obs))
            with T.no_grad():
                ref = stack.target_encoder(T.tensor(obs)) if metric == "projection" else z.detach()
            return cycle_loss(z, ref, acts, dm, bdm, space, dist, nd_mode)
        return f, params
    return case


def _latent_distance(rng):
    x, y = _param(rng, 3, 4), T.tensor(rng.standard_normal((3, 4)))
    return (lambda x: T.sum(distance_latent(x, y))), [x]


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "negate": _unary(T.neg),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "scalar_broadcast": _scalar_broadcast,
    "relu": _unary(T.relu),
    "tanh": _unary(T.tanh),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "square": _unary(T.square),
    "softplus": _unary(T.softplus),
    "minimum": _binary(T.minimum),
    "clip": _unary(lambda x: T.clip(x, -0.5, 0.7)),
    "sum_mean": _reductions,
    "reshape_concat": _reshape_concat,
    "indexing": _indexing,
    "matmul": _matmul,
    "affine": _affine(False),
    "affine_relu": _affine(True),
    "cosine_similarity": _cosine,
    "latent_distance": _latent_distance,
    "two_layer_net": _two_layer,
}

LOSS_CASES: dict[str, Case] = {
    "q_loss": _q_loss,
    "sac_critic": _sac("critic"),
    "sac_actor": _sac("actor"),
    "pred_loss_discrete": _pred_loss(True),
    "pred_loss_continuous": _pred_loss(False),
    "cyc_loss_discrete": _cyc_loss(True),
    "cyc_loss_continuous": _cyc_loss(False),
    "cyc_loss_latent": _cyc_loss(True, metric="latent"),
    "cyc_loss_nd": _cyc_loss(False, nd_mode=True),
}


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float
    excluded: int
    seconds: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def run_case(name: str, case: Case, instances: int, seed: int = 0, tolerance: float = 1e-4,
             max_coords: int | None = 16) -> SuiteResult:
    rng = np.random.default_rng([seed, sum(name.encode())])
    t0 = time.perf_counter()
    worst, excluded = 0.0, 0
    for _ in range(instances):
        f, inputs = case(rng)
        rep: GradCheckReport = grad_check(f, inputs, tolerance=tolerance, max_coords=max_coords, rng=rng)
        worst = max(worst, rep.max_rel_error)
        excluded += len(rep.excluded)
    return SuiteResult(name, instances, worst, excluded, time.perf_counter() - t0)


def gradient_suite(instances: int = 100, seed: int = 0, tolerance: float = 1e-4,
                   names: list[str] | None = None) -> list[SuiteResult]:
    """Run every op and loss case in 64-bit precision."""
    cases = {**OP_CASES, **LOSS_CASES}
    if names is not None:
        cases = {n: cases[n] for n in names}
    with precision("f64"):
        return [run_case(n, c, instances, seed, tolerance) for n, c in cases.items()]
