"""Command-line entry point: solve, verify, train, sweep, and score runs into an output directory."""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from .closed_form import ClosedFormResult, Method, MethodParams, optimal_policy
from .errors import InvalidArgument, QempoError, ScenarioError, TrainingFailure
from .metrics import frontier_sweep, frontier_to_csv, pass_at_k, preset_grid
from .offline import OfflineConfig, train_offline
from .online import OnlineConfig, train_online
from .scenario import _parse_json, dumps, policy_to_dict, resolve_suite
from .solver import (DEFAULT_MAX_ITERS, DEFAULT_TOL, ConstraintSpec, SolveReport,
                     constraint_levels, solve_min_kl_multiplier, solve_qempo_kl_multipliers,
                     solve_qempo_multiplier)
from .verify import VerifyOptions, run_checks

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
MANIFEST = "manifest.json"


def _num(v: float):
    # strict JSON has no infinities
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    versions: dict = field(default_factory=lambda: {
        "qempo": __version__, "numpy": np.__version__, "python": platform.python_version()})
    outputs: list[dict] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed,
                "versions": self.versions, "outputs": self.outputs,
                "wall_clock_seconds": self.wall_clock_seconds}


class RunDir:
    """Owns one output directory; every file written through it lands in the manifest."""

    def __init__(self, root: str | Path, command: str, config: dict, seed: int | None):
        self.root = Path(root)
        prior = self.root / MANIFEST
        if prior.exists():
            try:
                other = json.loads(prior.read_text(encoding="utf-8")).get("command")
            except (OSError, ValueError, AttributeError):
                other = None
            if other != command:
                raise InvalidArgument(f"{self.root} already holds output of {other!r}; "
                                      f"use a separate --out-dir")
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, config, seed)
        self._t0 = time.perf_counter()

    def write(self, name: str, text: str) -> Path:
        path = self.root / name
        data = text.encode("utf-8")
        path.write_bytes(data)
        self.manifest.outputs.append({"path": name, "sha256": hashlib.sha256(data).hexdigest()})
        return path

    def close(self) -> Path:
        self.manifest.wall_clock_seconds = round(time.perf_counter() - self._t0, 6)
        path = self.root / MANIFEST
        path.write_text(dumps(self.manifest.to_dict()), encoding="utf-8")
        return path


def load_config(spec: str) -> dict:
    """A config document from a path or ``bundled:<name>``."""
    if spec.startswith("bundled:"):
        name = spec.split(":", 1)[1]
        res = files("qempo").joinpath("data", "configs", f"{name}.json")
        if not res.is_file():
            raise InvalidArgument(f"no bundled config named {name!r}")
        text, source = res.read_text(encoding="utf-8"), spec
    else:
        try:
            text = Path(spec).read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioError(f"cannot read file: {exc.strerror}", source=spec) from exc
        source = spec
    data = _parse_json(text, source)
    if not isinstance(data, dict):
        raise ScenarioError("config must be an object", source=source)
    return data


# --- solve -------------------------------------------------------------------------------

def closed_form_to_dict(res: ClosedFormResult) -> dict:
    return {
        "params": {k: _num(v) for k, v in res.params.as_dict().items()},
        "probs": [float(p) for p in res.dist.probs],
        "log_partition": _num(res.log_partition),
        "entropy": _num(res.entropy),
        "expected_reward": _num(res.expected_reward),
        "kl_to_ref": _num(res.kl_to_ref),
        "excluded": list(res.excluded),
    }


def _direct_params(args) -> MethodParams | None:
    m = Method(args.method)
    if m is Method.RLHF:
        return MethodParams.rlhf(args.beta) if args.beta is not None else None
    if m is Method.QEMPO:
        if args.lam is not None and args.inv_lambda is not None:
            raise InvalidArgument("give --lambda or --inv-lambda, not both")
        if args.lam is not None:
            return MethodParams.qempo(args.lam)
        if args.inv_lambda is not None:
            return MethodParams.qempo_inverse(args.inv_lambda)
        return None
    if args.lambda1 is not None or args.lambda2 is not None:
        if args.lambda1 is None or args.lambda2 is None:
            raise InvalidArgument("--lambda1 and --lambda2 go together")
        return MethodParams.qempo_kl(args.lambda1, args.lambda2)
    if args.inv_lambda1 is not None:
        ratio = 1e-2 if args.ratio21 is None else args.ratio21
        return MethodParams.qempo_kl_inverse(args.inv_lambda1, ratio)
    return None


def _constraints(args, inst) -> ConstraintSpec | None:
    if args.levels_beta is not None:
        if args.reward_floor is not None or args.kl_budget is not None:
            raise InvalidArgument("--levels-beta replaces --reward-floor/--kl-budget")
        return constraint_levels(inst, args.levels_beta)
    if args.reward_floor is None:
        if args.kl_budget is not None:
            raise InvalidArgument("--kl-budget needs --reward-floor")
        return None
    return ConstraintSpec(args.reward_floor, args.kl_budget)


def _solve_one(args, inst, params: MethodParams | None) -> tuple[dict, bool]:
    """(entry, feasible) for one instance."""
    entry: dict = {"id": inst.id}
    if params is not None:
        entry["closed_form"] = closed_form_to_dict(optimal_policy(inst, params))
        entry["solve"] = None
        return entry, True
    spec = _constraints(args, inst)
    if spec is None:
        raise InvalidArgument(f"method {args.method} needs multipliers or constraint levels")
    m = Method(args.method)
    report: SolveReport
    if m is Method.RLHF:
        report = solve_min_kl_multiplier(inst, spec.reward_floor, args.tol)
    elif m is Method.QEMPO:
        report = solve_qempo_multiplier(inst, spec.reward_floor, args.tol)
    else:
        report = solve_qempo_kl_multipliers(inst, spec, args.tol, args.max_iters, args.step_rule)
    entry["constraints"] = {"reward_floor": _num(spec.reward_floor),
                            "kl_budget": None if spec.kl_budget is None else _num(spec.kl_budget)}
    entry["closed_form"] = None
    mult = report.multipliers
    # closed forms need strictly positive finite multipliers; otherwise the solver's policy stands
    if report.feasible and mult and all(0.0 < v < math.inf for v in mult.values()):
        if m is Method.RLHF:
            params = MethodParams.rlhf(1.0 / mult["lambda"])
        elif m is Method.QEMPO:
            params = MethodParams.qempo(mult["lambda"])
        else:
            params = MethodParams.qempo_kl(mult["lambda1"], mult["lambda2"])
        entry["closed_form"] = closed_form_to_dict(optimal_policy(inst, params))
    entry["solve"] = report.to_dict()
    return entry, report.feasible


def cmd_solve(args) -> int:
    suite = resolve_suite(args.scenario)
    params = _direct_params(args)
    config = {k: getattr(args, k) for k in
              ("scenario", "method", "beta", "lam", "inv_lambda", "lambda1", "lambda2",
               "inv_lambda1", "ratio21", "reward_floor", "kl_budget", "levels_beta", "tol",
               "max_iters", "step_rule")}
    run = RunDir(args.out_dir, "solve", config, suite.seed)
    entries, infeasible = [], []
    for inst in suite:
        entry, ok = _solve_one(args, inst, params)
        entries.append(entry)
        if not ok:
            infeasible.append(inst.id)
    run.write("solve.json", dumps({"method": args.method, "instances": entries,
                                   "infeasible": infeasible}))
    run.close()
    for e in entries:
        cf = e["closed_form"]
        status = e["solve"]["status"] if e["solve"] else "closed_form"
        ent = f" entropy={cf['entropy']!r}" if cf else ""
        print(f"{e['id']}: {status}{ent}")
    if infeasible:
        print("infeasible: " + ", ".join(infeasible), file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# --- verify ------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    suite = resolve_suite(args.scenario)
    opts = VerifyOptions(beta=args.beta, epsilon=args.epsilon, grid_step=args.grid_step,
                         tol=args.tol, perturb=args.perturb, workers=args.threads)
    config = {"scenario": args.scenario, "beta": opts.beta, "epsilon": opts.epsilon,
              "grid_step": opts.grid_step, "tol": opts.tol, "perturb": opts.perturb}
    run = RunDir(args.out_dir, "verify", config, suite.seed)
    results = run_checks(suite.instances, opts)
    counts = {s: sum(r.status == s for r in results) for s in ("pass", "fail", "skip")}
    run.write("verify.json", dumps({"results": [r.to_dict() for r in results],
                                    "summary": counts}))
    run.close()
    for r in results:
        reason = r.detail.get("reason") or r.detail.get("error") or ""
        print(f"{r.status.upper():4s} {r.check} {r.instance_id}" + (f" ({reason})" if reason else ""))
    print(f"{counts['pass']} passed, {counts['fail']} failed, {counts['skip']} skipped")
    return EXIT_ERROR if counts["fail"] else EXIT_OK


# --- training ----------------------------------------------------------------------------

def _train_config(args, cls):
    data = load_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.steps is not None:
        data["steps"] = args.steps
    return cls.from_dict(data)


def cmd_train_offline(args) -> int:
    suite = resolve_suite(args.scenario)
    cfg = _train_config(args, OfflineConfig)
    run = RunDir(args.out_dir, "train-offline",
                 {"scenario": args.scenario, **cfg.to_dict()}, cfg.seed)
    res = train_offline(suite, cfg)
    run.write("history.csv", res.history_csv())
    meta = {"method": cfg.method.value, "best_step": res.best_step}
    run.write("policy.json", dumps(policy_to_dict(res.policy, seed=cfg.seed, metadata=meta)))
    run.close()
    last = res.history[-1]
    print(f"{cfg.method.value}: step {last.step} loss={last.loss!r} "
          f"entropy_mean={last.entropy_mean!r} best_step={res.best_step}")
    return EXIT_OK


def cmd_train_online(args) -> int:
    suite = resolve_suite(args.scenario)
    cfg = _train_config(args, OnlineConfig)
    run = RunDir(args.out_dir, "train-online",
                 {"scenario": args.scenario, **cfg.to_dict()}, cfg.seed)
    res = train_online(suite, cfg)
    run.write("history.csv", res.history_csv())
    meta = {"method": cfg.method.value, "steps": cfg.steps}
    run.write("policy.json", dumps(policy_to_dict(res.policy, seed=cfg.seed, metadata=meta)))
    run.close()
    last = res.history[-1]
    passes = " ".join(f"pass@{k}={last.pass_at[k]!r}" for k in cfg.pass_k)
    print(f"{cfg.method.value}: step {last.step} entropy_mean={last.entropy_mean!r} {passes}")
    return EXIT_OK


# --- frontier / pass@k -------------------------------------------------------------------

def parse_grid(method: Method, text: str) -> list:
    """Comma-separated values; QEMPO-KL entries are ``lambda1:lambda2``."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            if method is Method.QEMPO_KL:
                a, b = tok.split(":")
                out.append((float(a), float(b)))
            else:
                out.append(float(tok))
        except ValueError:
            raise InvalidArgument(f"bad grid entry {tok!r}") from None
    if not out:
        raise InvalidArgument("multiplier grid is empty")
    return out


def cmd_frontier(args) -> int:
    suite = resolve_suite(args.scenario)
    method = Method(args.method)
    if (args.grid is None) == (args.preset is None):
        raise InvalidArgument("give exactly one of --grid or --preset")
    grid = parse_grid(method, args.grid) if args.grid else preset_grid(args.preset)
    if args.preset and ((args.preset == "qempo-offline") != (method is Method.QEMPO)
                        or (args.preset == "qempo-kl-offline") != (method is Method.QEMPO_KL)):
        raise InvalidArgument(f"preset {args.preset!r} does not fit method {method.value}")
    config = {"scenario": args.scenario, "method": method.value, "grid": grid}
    run = RunDir(args.out_dir, "frontier", config, suite.seed)
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        per_inst = list(pool.map(lambda inst: frontier_sweep(inst, method, grid), suite))
    points = [p for pts in per_inst for p in pts]
    run.write("frontier.csv", frontier_to_csv(points))
    run.close()
    print(f"{len(points)} frontier points")
    return EXIT_OK


def cmd_pass_at_k(args) -> int:
    value = pass_at_k(n=args.n, c=args.c, k=args.k)
    run = RunDir(args.out_dir, "pass-at-k", {"n": args.n, "c": args.c, "k": args.k}, None)
    run.write("pass_at_k.json", dumps({"n": args.n, "c": args.c, "k": args.k, "pass_at_k": value}))
    run.close()
    print(repr(value))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, top: bool):
    # accepted before or after the subcommand; subcommand copies never clobber earlier values
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--tol", type=float, default=d(DEFAULT_TOL), help="solver / KKT tolerance")
    p.add_argument("--out-dir", default=d(None), help="output directory (default qempo-out/<command>)")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qempo", description=__doc__)
    _global_flags(parser, True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="closed-form policies or constrained multipliers")
    _global_flags(p, False)
    p.add_argument("scenario", help="scenario path or bundled:<name>")
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--inv-lambda", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--inv-lambda1", type=float)
    p.add_argument("--ratio21", type=float, help="lambda2/lambda1 (default 1e-2)")
    p.add_argument("--reward-floor", type=float)
    p.add_argument("--kl-budget", type=float)
    p.add_argument("--levels-beta", type=float,
                   help="per-instance reward floor and KL budget realized by RLHF at this beta")
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--step-rule", choices=["newton", "gradient"], default="newton")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="check the optimality and entropy-ordering results")
    _global_flags(p, False)
    p.add_argument("scenario", nargs="?", default="bundled:default")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="tamper closed-form outputs by this relative amount (self-test)")
    p.set_defaults(func=cmd_verify)

    for name, func in (("train-offline", cmd_train_offline), ("train-online", cmd_train_online)):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} training on a tabular policy")
        _global_flags(p, False)
        p.add_argument("scenario")
        p.add_argument("--config", required=True, help="config path or bundled:<name>")
        p.add_argument("--steps", type=int, help="override the config step count")
        p.set_defaults(func=func)

    p = sub.add_parser("frontier", help="entropy / reward sweep over a multiplier grid")
    _global_flags(p, False)
    p.add_argument("scenario")
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--grid", help="comma list; qempo_kl entries as lambda1:lambda2")
    p.add_argument("--preset", choices=["qempo-offline", "qempo-kl-offline"])
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("pass-at-k", help="unbiased pass@k from n samples with c correct")
    _global_flags(p, False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_pass_at_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out_dir is None:
        args.out_dir = str(Path("qempo-out") / args.command)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except TrainingFailure as exc:
        print(f"error: training failed at step {exc.step}; last finite loss "
              f"{exc.last_finite_loss!r}", file=sys.stderr)
    except QempoError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
