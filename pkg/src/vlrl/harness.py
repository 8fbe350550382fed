"""Training loop, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .agents import LossBreakdown, QHead, SacHead, act, linear_epsilon, q_loss, sac_losses
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .envs import GridWorld, make_env, optimal_return_oracle
from .nets import BackwardDynamicsModel, DynamicsModel, Encoder, ProjectionStack
from .optim import Adam
from .replay import NotEnoughData, ReplayBuffer, Transition
from .virtual import (AuxConfig, cycle_distance, cycle_loss, prediction_loss,
                      real_backward_loss, sample_virtual_actions, total_loss)

log = logging.getLogger(__name__)

PAIRING = {"gridworld": "q", "pointmass": "sac"}

# independent RNG streams: drawing from one never shifts another
STREAMS = {name: i for i, name in enumerate((
    "init_encoder", "init_head", "init_dm", "init_bdm", "init_proj",
    "env", "explore", "replay_rl", "replay_seg", "virtual", "sac_noise",
))}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class RunConfig:
    env: str = "gridworld"
    agent: str | None = None
    total_steps: int = 50_000
    warmup_steps: int = 1_000
    updates_per_step: int = 1
    batch_size: int = 64
    seed: int = 0
    k: int | None = None
    m: int | None = None
    lambda_pred: float = 1.0
    lambda_cyc: float = 1.0
    metric: str = "projection"
    nd_mode: bool = False
    real_bdm: bool = False
    lr: float = 3e-4
    tau: float = 0.99
    eval_every: int = 2_500
    eval_episodes: int = 20
    eval_seed: int = 1_000_003
    gamma: float = 0.99
    n_step: int | None = None
    capacity: int = 100_000
    d_z: int = 64
    d_p: int = 32
    hidden: tuple[int, ...] = (128, 128)
    alpha: float = 0.1
    eps_fraction: float = 0.2
    log_every: int = 1
    joint_sampling: bool = False
    cycle_starts: int | None = 16
    # skip aux terms whose weight is exactly zero (they cannot change any update)
    skip_zero_weight: bool = True

    def __post_init__(self):
        if self.agent is None:
            self.agent = PAIRING.get(self.env)
        if self.n_step is None:
            self.n_step = 3 if self.agent == "q" else 1
        self.hidden = tuple(self.hidden)

    def validate(self) -> None:
        if self.env not in PAIRING:
            raise ValueError(f"unknown env {self.env!r}")
        if PAIRING[self.env] != self.agent:
            raise ValueError(f"env {self.env} pairs with agent {PAIRING[self.env]!r}, not {self.agent!r}")
        for name in ("total_steps", "updates_per_step", "batch_size", "eval_every",
                     "eval_episodes", "n_step", "capacity", "d_z", "d_p", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.aux()

    def aux(self) -> AuxConfig:
        space = make_env(self.env).action_space
        return AuxConfig.defaults_for(space, k=self.k, m=self.m, lambda_pred=self.lambda_pred,
                                      lambda_cyc=self.lambda_cyc, metric=self.metric,
                                      nd_mode=self.nd_mode, real_bdm=self.real_bdm,
                                      cycle_starts=self.cycle_starts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Model:
    """Everything with parameters for one run, plus its optimizer."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.env_proto = make_env(cfg.env)
        self.space = self.env_proto.action_space
        self.aux = cfg.aux()
        d_a = self.space.encoding_width
        self.encoder = Encoder(self.env_proto.obs_dim, cfg.d_z, cfg.hidden, stream(cfg.seed, "init_encoder"))
        self.stack = ProjectionStack(self.encoder, cfg.d_p, stream(cfg.seed, "init_proj"))
        self.dm = DynamicsModel(cfg.d_z, d_a, stream(cfg.seed, "init_dm"))
        self.bdm = BackwardDynamicsModel(cfg.d_z, d_a, stream(cfg.seed, "init_bdm"))
        rng = stream(cfg.seed, "init_head")
        if cfg.agent == "q":
            self.head = QHead(cfg.d_z, self.space.n, rng, hidden=(128,), gamma=cfg.gamma)
        else:
            self.head = SacHead(cfg.d_z, self.space.dim, rng, hidden=(128, 128),
                                gamma=cfg.gamma, alpha=cfg.alpha)
        self.opt = Adam(self.online_parameters(), lr=cfg.lr)
        self.distance = cycle_distance(self.aux.metric, self.stack)

    def online_parameters(self) -> list[T.Tensor]:
        return (self.encoder.parameters() + self.head.parameters() + self.dm.parameters()
                + self.bdm.parameters() + self.stack.online_parameters())

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {}
        for mod in (self.encoder, self.stack.target_encoder, self.stack.projector,
                    self.stack.predictor, self.stack.target_projector, self.dm, self.bdm, self.head):
            out.update(mod.named_parameters())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise CheckpointError(f"checkpoint/config mismatch: missing {sorted(missing)[:3]}, "
                                  f"unexpected {sorted(extra)[:3]}")
        for name, t in named.items():
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data[...] = arrays[name]

    def policy_action(self, obs, mode: str, rng, epsilon: float = 0.0):
        with T.no_grad():
            z = self.encoder(T.tensor(obs))
        return act(self.head, z, mode, rng, epsilon)

    def update(self, buffer: ReplayBuffer, rngs: dict, step: int) -> LossBreakdown:
        cfg, aux = self.cfg, self.aux
        self.opt.zero_grad()
        seg = None
        k = aux.k
        want_pred = k > 0 and not (cfg.skip_zero_weight and aux.lambda_pred == 0)
        want_cyc = k > 0 and not (cfg.skip_zero_weight and aux.lambda_cyc == 0)
        if k > 0 and (want_pred or want_cyc or cfg.joint_sampling):
            try:
                seg = buffer.sample_segments(cfg.batch_size, k, rngs["replay_seg"])
            except NotEnoughData:
                seg = None
        if cfg.joint_sampling and seg is not None:
            batch = buffer.rl_batch_at(seg.slots, cfg.n_step, cfg.gamma)
        else:
            batch = buffer.sample_rl_batch(cfg.batch_size, cfg.n_step, cfg.gamma, rngs["replay_rl"])
        target_enc = self.stack.target_encoder
        if cfg.agent == "q":
            l_rl = q_loss(self.head, batch, self.encoder, target_enc)
        else:
            critic, actor = sac_losses(self.head, batch, self.encoder, target_enc, rngs["sac_noise"])
            l_rl = critic + actor

        zero = T.tensor(0.0)
        l_pred = l_cyc = zero
        if seg is not None and (want_pred or want_cyc):
            z_t = self.encoder(T.tensor(seg.obs[:, 0]))
            if want_pred:
                l_pred = prediction_loss(z_t, seg, self.dm, self.stack, self.space)
            if want_cyc:
                if aux.real_bdm:
                    l_cyc = real_backward_loss(seg, self.encoder, self.bdm, self.stack, self.space)
                else:
                    n = len(seg) if aux.cycle_starts is None else min(aux.cycle_starts, len(seg))
                    z_c = z_t if n == len(seg) else z_t[:n]
                    acts = sample_virtual_actions(self.space, aux.m, k, rngs["virtual"], batch=n)
                    if aux.metric == "projection":
                        with T.no_grad():
                            z_ref = self.stack.target_encoder(T.tensor(seg.obs[:n, 0]))
                    else:
                        z_ref = z_c.detach()
                    l_cyc = cycle_loss(z_c, z_ref, acts, self.dm, self.bdm, self.space,
                                       self.distance, aux.nd_mode)
        total, breakdown = total_loss(l_rl, l_pred, l_cyc, aux, step)
        T.backward(total)
        self.opt.step()
        self.stack.ema_update(cfg.tau)
        self.head.ema_update(cfg.tau)
        return breakdown


def evaluate(model: Model, episodes: int, seed: int) -> tuple[float, float, list[float]]:
    """Mean and std of deterministic-policy episode returns; no side effects
    on the model."""
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    env = make_env(model.cfg.env)
    rng = np.random.default_rng(seed)
    returns = []
    for ep in range(episodes):
        obs = env.reset(seed=seed + ep)
        total, done = 0.0, False
        while not done:
            a = model.policy_action(obs, "eval", rng)
            obs, r, term, trunc = env.step(a)
            total += r
            done = term or trunc
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns)), returns


def oracle_return(cfg: RunConfig) -> float | None:
    env = make_env(cfg.env)
    return optimal_return_oracle(env) if isinstance(env, GridWorld) else None


@dataclass
class RunResult:
    config: RunConfig
    evals: list[dict] = field(default_factory=list)
    losses: list[LossBreakdown] = field(default_factory=list)
    model: Model | None = None
    out_dir: Path | None = None

    @property
    def final_return(self) -> float:
        return self.evals[-1]["mean_return"]

    @property
    def auc(self) -> float:
        return learning_curve_area(self.evals)


def learning_curve_area(evals: list[dict]) -> float:
    """Step-weighted mean eval return (trapezoidal area / span)."""
    steps = np.array([e["step"] for e in evals], dtype=float)
    vals = np.array([e["mean_return"] for e in evals], dtype=float)
    if len(vals) == 1 or steps[-1] == steps[0]:
        return float(vals.mean())
    return float(np.trapezoid(vals, steps) / (steps[-1] - steps[0]))


def train(cfg: RunConfig, out_dir: str | Path | None = None, keep_losses: bool = True) -> RunResult:
    """Collect -> store -> sample -> losses -> backward -> Adam -> EMA, repeated."""
    cfg.validate()
    t0 = time.perf_counter()
    model = Model(cfg)
    rngs = {name: stream(cfg.seed, name) for name in ("explore", "replay_rl", "replay_seg",
                                                      "virtual", "sac_noise")}
    env_seeds = stream(cfg.seed, "env")
    env = make_env(cfg.env)
    is_q = cfg.agent == "q"
    buffer = ReplayBuffer(cfg.capacity, env.obs_dim, None if is_q else env.action_space.dim)
    oracle = oracle_return(cfg)
    result = RunResult(cfg, model=model)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        metrics_fh = open(out / "metrics.jsonl", "w")

    def emit(rec: dict) -> None:
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(rec) + "\n")

    def run_eval(step: int, extra: dict) -> None:
        mean, std, _ = evaluate(model, cfg.eval_episodes, cfg.eval_seed)
        rec = {"kind": "eval", "step": step, "mean_return": mean, "std_return": std,
               "wall": round(time.perf_counter() - t0, 3), **extra}
        if oracle:
            rec["oracle_normalized"] = mean / oracle
        result.evals.append(rec)
        emit(rec)
        log.info("step %d eval %.4f +- %.4f", step, mean, std)

    episode, ep_step = 0, 0
    obs = env.reset(seed=int(env_seeds.integers(2**31)))
    n_updates = 0
    try:
        for step in range(1, cfg.total_steps + 1):
            eps = linear_epsilon(step, cfg.total_steps, fraction=cfg.eps_fraction) if is_q else 0.0
            if step <= cfg.warmup_steps:
                action = env.action_space.sample(rngs["explore"])
            else:
                action = model.policy_action(obs, "train", rngs["explore"], eps)
            nxt, reward, term, trunc = env.step(action)
            buffer.push(Transition(obs, action, reward, term, episode, ep_step, nxt))
            ep_step += 1
            obs = nxt
            if term or trunc:
                episode += 1
                ep_step = 0
                obs = env.reset(seed=int(env_seeds.integers(2**31)))

            if step > cfg.warmup_steps:
                for _ in range(cfg.updates_per_step):
                    br = model.update(buffer, rngs, step)
                    n_updates += 1
                    if keep_losses:
                        result.losses.append(br)
                    if n_updates % cfg.log_every == 0:
                        emit({"kind": "update", "step": step, "rl": br.rl, "pred": br.pred,
                              "cyc": br.cyc, "total": br.total,
                              **({"epsilon": eps} if is_q else {"alpha": cfg.alpha})})
            if step % cfg.eval_every == 0 and step != cfg.total_steps:
                run_eval(step, {"epsilon": eps} if is_q else {"alpha": cfg.alpha})
        run_eval(cfg.total_steps, {"updates": n_updates})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        save_tensors(out / "final.ckpt", model.state_arrays())
        write_summary(out / "summary.csv", [summary_row(cfg, result)])
        result.out_dir = out
    return result


def summary_row(cfg: RunConfig, res: RunResult) -> dict:
    aux = cfg.aux()
    row = {"env": cfg.env, "seed": cfg.seed, "k": aux.k, "m": aux.m,
           "lambda_pred": aux.lambda_pred, "lambda_cyc": aux.lambda_cyc, "metric": aux.metric,
           "nd_mode": aux.nd_mode, "real_bdm": aux.real_bdm,
           "final_return": res.final_return, "auc": res.auc}
    oracle = oracle_return(cfg)
    row["oracle_normalized"] = res.final_return / oracle if oracle else ""
    return row


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def load_model(ckpt: str | Path) -> Model:
    """Rebuild a model from ``final.ckpt`` and the ``config.json`` beside it."""
    ckpt = Path(ckpt)
    cfg_path = ckpt.parent / "config.json"
    if not cfg_path.exists():
        raise CheckpointError(f"no config.json next to {ckpt}")
    cfg = RunConfig.from_dict(json.loads(cfg_path.read_text()))
    model = Model(cfg)
    model.load_arrays(load_tensors(ckpt))
    return model


# ---------------------------------------------------------------------------
# ablations

VARIANTS = {
    "baseline-wo-pred": dict(k=0),
    "baseline": dict(lambda_cyc=0.0),
    "baseline+bdm": dict(real_bdm=True),
    "playvirtual": {},
    "playvirtual-nd": dict(nd_mode=True),
}

SWEEPS = {
    "k": [dict(k=k) for k in (0, 3, 6, 9, 12)],
    "m": [dict(m=m) for m in (1, 2, 5, 10, 20)],
    "variant": [dict(variant=v) for v in ("baseline-wo-pred", "baseline", "baseline+bdm",
                                          "playvirtual", "playvirtual-nd")],
    "metric": [dict(metric=m) for m in ("projection", "latent")],
}


def setting_label(setting: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in setting.items())


def apply_setting(base: RunConfig, setting: dict, seed: int) -> RunConfig:
    over = dict(setting)
    variant = over.pop("variant", None)
    if variant is not None:
        over.update(VARIANTS[variant])
    return dataclasses.replace(base, seed=seed, **over)


def _finished_run(cfg: RunConfig, out_dir: Path) -> RunResult | None:
    """A previous run in ``out_dir`` with the same config, if it completed."""
    try:
        if json.loads((out_dir / "config.json").read_text()) != cfg.to_dict():
            return None
        if not (out_dir / "summary.csv").exists():
            return None
        with open(out_dir / "metrics.jsonl") as fh:
            evals = [r for r in map(json.loads, fh) if r["kind"] == "eval"]
    except (OSError, ValueError, KeyError):
        return None
    return RunResult(cfg, evals=evals, out_dir=out_dir) if evals else None


def _run_one(args) -> dict:
    cfg, out_dir, label, resume = args
    res = _finished_run(cfg, out_dir) if resume else None
    if res is None:
        res = train(cfg, out_dir, keep_losses=False)
    else:
        log.info("reusing finished run in %s", out_dir)
    return {"setting": label, **summary_row(cfg, res),
            "curve": json.dumps([[e["step"], e["mean_return"]] for e in res.evals])}


def ablation_run(base: RunConfig, settings: Iterable[dict], seeds: Iterable[int],
                 out_dir: str | Path, workers: int = 1, resume: bool = False) -> list[dict]:
    """One training run per (setting, seed); writes ``runs.csv`` (per run) and
    ``table.csv`` (median over seeds per setting).

    With ``resume`` a run directory holding a finished run of the identical
    config is read back instead of retrained.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = list(settings)
    seeds = list(seeds)
    jobs = []
    for setting in settings:
        label = setting_label(setting)
        for seed in seeds:
            cfg = apply_setting(base, setting, seed)
            cfg.validate()
            jobs.append((cfg, out / label.replace("=", "-").replace(",", "_") / f"seed{seed}", label, resume))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    write_summary(out / "runs.csv", rows)
    table = []
    for setting in settings:
        label = setting_label(setting)
        mine = [r for r in rows if r["setting"] == label]
        table.append({
            "setting": label,
            "seeds": len(mine),
            "median_final_return": statistics.median(r["final_return"] for r in mine),
            "median_auc": statistics.median(r["auc"] for r in mine),
            "finals": " ".join(f"{r['final_return']:.6g}" for r in mine),
        })
    write_summary(out / "table.csv", table)
    return table
