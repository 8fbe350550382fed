"""Command-line entry point: ``vlrl {train,eval,ablate,gradcheck}``.

Numeric precision follows ``VLRL_PRECISION`` (f32 or f64, default f64).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import tensor as T
from .harness import SWEEPS, RunConfig, ablation_run, evaluate, load_model, train


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", choices=["gridworld", "pointmass"], default="gridworld")
    p.add_argument("--agent", choices=["q", "sac"], default=None,
                   help="defaults to the env's pairing (gridworld->q, pointmass->sac)")
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--warmup", type=int, default=1_000)
    p.add_argument("--k", type=int, default=None, help="prediction steps (env default when omitted)")
    p.add_argument("--m", type=int, default=None, help="virtual trajectories per start state")
    p.add_argument("--lambda-pred", type=float, default=1.0)
    p.add_argument("--lambda-cyc", type=float, default=1.0)
    p.add_argument("--metric", choices=["projection", "latent"], default="projection")
    p.add_argument("--nd", action="store_true", help="cycle loss leaves the forward model untouched")
    p.add_argument("--real-bdm", action="store_true", help="Baseline+BDM: backward model on real segments")
    p.add_argument("--cycle-starts", type=int, default=16,
                   help="start states per batch that spawn virtual trajectories (0: all)")
    p.add_argument("--eval-every", type=int, default=2_500)
    p.add_argument("--eval-episodes", type=int, default=20)
    p.add_argument("--log-every", type=int, default=1, help="updates between loss records")
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> RunConfig:
    return RunConfig(env=args.env, agent=args.agent, total_steps=args.steps, warmup_steps=args.warmup,
                     k=args.k, m=args.m, lambda_pred=args.lambda_pred, lambda_cyc=args.lambda_cyc,
                     metric=args.metric, nd_mode=args.nd, real_bdm=args.real_bdm,
                     cycle_starts=args.cycle_starts or None, eval_every=args.eval_every,
                     eval_episodes=args.eval_episodes, log_every=args.log_every, lr=args.lr,
                     seed=args.seed)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg, args.out, keep_losses=False)
    print(json.dumps({"final_return": res.final_return, "auc": res.auc, "out": str(args.out)}))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    mean, std, _ = evaluate(model, args.episodes, args.seed)
    print(json.dumps({"mean_return": mean, "std_return": std, "episodes": args.episodes}))
    return 0


def cmd_ablate(args) -> int:
    base = _config(args)
    settings = SWEEPS[args.sweep]
    if args.only:
        keep = set(args.only.split(","))
        settings = [s for s in settings if str(next(iter(s.values()))) in keep]
    table = ablation_run(base, settings, range(args.seeds), args.out, workers=args.workers,
                         resume=args.resume)
    for row in table:
        print(f"{row['setting']:<28} median final {row['median_final_return']:.4f}  "
              f"median auc {row['median_auc']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import gradient_suite

    results = gradient_suite(args.instances, args.seed, args.tolerance)
    ok = True
    for r in results:
        flag = "PASS" if r.passed(args.tolerance) else "FAIL"
        ok &= r.passed(args.tolerance)
        print(f"{flag} {r.name:<22} max rel err {r.max_rel_error:.2e}  "
              f"({r.instances} instances, {r.excluded} kink coords, {r.seconds:.1f}s)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one training run")
    _add_run_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=1_000_003)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one knob over seeds 0..N-1")
    _add_run_args(p)
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--only", default="", help="comma list restricting the sweep values")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="reuse finished runs with identical configs")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    T.set_precision(os.environ.get("VLRL_PRECISION", "f64"))
    try:
        return args.fn(args)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
