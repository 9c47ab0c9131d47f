"""Command-line experiment runner with an append-only JSONL run ledger."""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ScenarioError, load_scenario

OUT_ENV = "MFSINGULAR_OUT"
DEFAULT_OUT = "mfsingular-runs"
POLICY_SEPARATOR = "%%"

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class RunRecord:
    subcommand: str
    scenario_hash: str | None
    seed: int
    parameters: dict
    outputs: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    wall_time: float = 0.0
    version: str = __version__


class ValidationError(ValueError):
    pass


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    return v


def append_record(out_dir, record):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ledger.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(_jsonable(asdict(record)), sort_keys=True) + "\n")


def read_ledger(out_dir):
    p = Path(out_dir) / "ledger.jsonl"
    if not p.exists():
        return []
    return [json.loads(ln) for ln in p.read_text().splitlines() if ln.strip()]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v) + 0.0)
    return str(v)


def emit(outputs, stream):
    """Scalars as ``key = value`` lines in insertion order; tables are printed by the callers."""
    for k, v in outputs.items():
        if isinstance(v, (int, float, str, bool, np.floating, np.integer, np.bool_)) or v is None:
            print(f"{k} = {_fmt(v)}", file=stream)


def _table(rows, stream, keys=None):
    if not rows:
        return
    keys = keys or list(dict.fromkeys(k for r in rows for k in r))
    print("\t".join(keys), file=stream)
    for r in rows:
        print("\t".join(_fmt(r.get(k, "")) if not isinstance(r.get(k), (list, dict)) else json.dumps(_jsonable(r[k]))
                        for k in keys), file=stream)


# --------------------------------------------------------------------------
# scenario resolution

def resolve_scenario(where, args):
    """Load a scenario from a file, or a bundled one by name, then apply command-line overrides."""
    from .pack import bundled_names, bundled_scenario

    p = Path(where)
    if p.exists():
        scen = load_scenario(p)
    elif where in bundled_names():
        scen = bundled_scenario(where)
    else:
        raise ValidationError(f"scenario {where!r} is neither a file nor a bundled name "
                              f"({', '.join(bundled_names())})")
    scen = copy.deepcopy(scen)
    if getattr(args, "particles", None):
        if scen.initial.points is not None:
            raise ValidationError("--particles cannot resize an explicit point list")
        scen.disc.particles = int(args.particles)
    if getattr(args, "steps", None):
        scen.disc.steps = int(args.steps)
    refine = getattr(args, "grid_refine", 1) or 1
    if refine < 1:
        raise ValidationError("--grid-refine must be at least 1")
    scen.disc.steps *= int(refine)
    return scen


def read_policy_file(path, scen):
    from .paths import CadlagPath, MonotoneControlPath
    from .simulate import ControlPolicy

    text = Path(path).read_text()
    blocks = [b for b in text.split(POLICY_SEPARATOR) if b.strip()]
    if not blocks:
        raise ValidationError("policy file holds no path")
    paths = []
    for b in blocks:
        c = CadlagPath.from_text(b)
        if c.k != scen.coefficients.l:
            raise ValidationError(f"policy paths need {scen.coefficients.l} component(s)")
        paths.append(MonotoneControlPath(c.grid, c.left, c.right))
    if len(paths) not in (1, scen.N):
        raise ValidationError(f"policy file needs 1 or {scen.N} paths, found {len(paths)}")
    return ControlPolicy.prescribed(paths, label=f"file:{Path(path).name}")


def write_policy_file(path, paths):
    Path(path).write_text(f"\n{POLICY_SEPARATOR}\n".join(p.to_text() for p in paths))


def _policy(args, scen):
    from .pack import scenario_policy

    if getattr(args, "policy_file", None):
        return read_policy_file(args.policy_file, scen)
    return scenario_policy(scen)


def _artifact_dir(out, sub, scen_hash, seed):
    d = out / "artifacts" / f"{sub}-{scen_hash or 'none'}-s{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# subcommands; each returns (scenario hash, parameters, outputs, artifacts, tables)

def cmd_simulate(args, out):
    from .reward import reward_continuous, reward_explicit
    from .simulate import simulate

    scen = resolve_scenario(args.scenario, args)
    pol = _policy(args, scen)
    sim = simulate(scen, pol, args.seed)
    h = scen.hash()
    art = _artifact_dir(out, "simulate", h, args.seed) / "trajectory.npz"
    sim.save(art)
    outputs = {"particles": sim.N, "steps": len(sim.grid) - 1, "jumps": sim.has_jumps(),
               "mean_x_T": float(sim.X_right[-1].mean()), "mean_xi_T": float(sim.xi_right[-1].mean()),
               "config_hash": sim.config_hash}
    outputs["reward"] = reward_explicit(sim).total if sim.has_jumps() else reward_continuous(sim)
    return h, {"policy": pol.label}, outputs, [str(art)], []


def cmd_jumpcost(args, out):
    from .jump_cost import (JumpCostError, PathwiseJumpQuery, distributional_jump_cost, pathwise_jump_cost,
                            pathwise_jump_cost_oracle, schedule_enumeration_oracle)
    from .measures import EmpiricalMeasure

    scen = resolve_scenario(args.scenario, args)
    q = scen.extra.get("query")
    if not q:
        raise ValidationError("scenario has no [query] section")
    co = scen.coefficients
    M = args.M or scen.disc.path_grid
    t = float(q.get("t", scen.t0))
    outputs = {}
    params = {"M": M, "oracle": args.oracle}
    if "xi_new" in q:
        query = PathwiseJumpQuery(t, q["x"], q["xi"], q["xi_new"])
        r = pathwise_jump_cost(query, co, M=M, seed=args.seed)
        outputs["kind"] = "pathwise"
        outputs["value"] = r.value
        if args.oracle:
            G = args.grid_size * (args.grid_refine or 1)
            o = pathwise_jump_cost_oracle(query, co, grid_size=G)
            outputs.update({"oracle": o, "oracle_gap": r.value - o, "oracle_grid": G})
    elif "before" in q and "after" in q:
        b = EmpiricalMeasure(np.asarray(q["before"], float), co.d, co.l)
        a = EmpiricalMeasure(np.asarray(q["after"], float), co.d, co.l)
        S = args.lambda_steps or scen.disc.lambda_steps
        r = distributional_jump_cost(t, b, a, co, M=M, lambda_steps=S, seed=args.seed)
        params["lambda_steps"] = S
        outputs.update({"kind": "distributional", "value": r.value, "route": r.diagnostics["route"],
                        "simultaneous": r.diagnostics["straight_value"]})
        if args.oracle:
            sub = max(1, -(-M // S))
            try:
                o = schedule_enumeration_oracle(t, b, a, co, steps=S, quanta=r.diagnostics["quanta"], sub=sub)
            except JumpCostError as err:
                raise ValidationError(f"oracle: {err}") from err
            outputs.update({"oracle": o, "oracle_gap": r.value - o})
    else:
        raise ValidationError("[query] needs x, xi, xi_new or before, after")
    return scen.hash(), params, outputs, [], []


def _source(args, scen):
    from .simulate import SimulationResult, simulate

    if getattr(args, "sim", None):
        return SimulationResult.load(args.sim, scen.coefficients)
    return simulate(scen, _policy(args, scen), args.seed)


def cmd_reward(args, out):
    from .reward import reward_explicit, reward_naive

    scen = resolve_scenario(args.scenario, args)
    sim = _source(args, scen)
    b = reward_explicit(sim, M=args.M or scen.disc.path_grid, lambda_steps=scen.disc.lambda_steps, seed=args.seed)
    outputs = dict(b.as_dict())
    if args.naive:
        n = reward_naive(sim)
        outputs.update({"naive_total": n.total, "naive_jump_cost": n.cost_first_kind,
                        "naive_gap": n.total - b.total})
    rows = [{"stamp": k, "t": float(sim.grid[k]), "kind": kind, "cost": v}
            for k, (kind, v) in sorted(b.details["stamps"].items())]
    return scen.hash(), {"naive": args.naive}, outputs, [], rows


def cmd_parametrise(args, out):
    from .parametrise import (ApproximationParams, bounded_velocity_approximation, build_parametrisation,
                              first_layer_modulus, layer_consistency_errors, lipschitz_approximation,
                              roundtrip_error)
    from .reward import reward_continuous, reward_explicit, reward_parametrisation
    from .simulate import simulate

    scen = resolve_scenario(args.scenario, args)
    sim = _source(args, scen)
    p = build_parametrisation(sim, seed=args.seed)
    h = scen.hash()
    e1, e2 = layer_consistency_errors(p, sim)
    outputs = {"roundtrip_error": roundtrip_error(p, sim), "consistency_first": e1, "consistency_second": e2,
               "first_layer_modulus": first_layer_modulus(p), "reward_parametrisation": reward_parametrisation(p),
               "macroscopic_stamps": len(p.diagnostics.get("macroscopic_stamps", []))}
    params = {"action": args.action}
    arts = []
    if args.action == "approx":
        eps = args.eps if args.eps is not None else args.delta / 2
        params.update({"eps": eps, "delta": args.delta, "trunc": args.trunc})
        q = lipschitz_approximation(p, ApproximationParams(args.trunc, eps, args.delta))
        bv = bounded_velocity_approximation(q, eps, args.delta, refine=args.grid_refine or 1)
        approx = simulate(scen, bv.policy, args.seed)
        ref = reward_explicit(sim).total if sim.has_jumps() else reward_continuous(sim)
        v = reward_continuous(approx)
        pf = _artifact_dir(out, "parametrise", h, args.seed) / f"policy-delta{args.delta:g}.txt"
        write_policy_file(pf, bv.paths)
        arts.append(str(pf))
        outputs.update({"K": bv.K, "reward_source": ref, "reward_approximation": v, "gap": abs(v - ref),
                        **{k: float(x) for k, x in q.diagnostics.items() if np.isscalar(x)}})
    return h, params, outputs, arts, []


def _Ks(args, scen):
    if args.K:
        return [float(k) for k in args.K]
    return [float(k) for k in scen.extra.get("run", {}).get("K", [1.0])]


def cmd_value(args, out):
    from .value import PolicyClass, dpp_check, vk_monotone_sweep

    scen = resolve_scenario(args.scenario, args)
    run = scen.extra.get("run", {})
    budget = args.budget or int(run.get("budget", 64))
    pc = PolicyClass(pieces=int(run.get("pieces", 1)))
    params = {"action": args.action, "budget": budget, "pieces": pc.pieces}
    if args.action == "sweep":
        Ks = _Ks(args, scen)
        ests, viol = vk_monotone_sweep(scen, Ks, pc, budget, args.seed)
        rows = [{"K": e.K, "value": e.value, "std_error": e.std_error, "mean_rate": e.mean_rate,
                 "flagged": e.flagged} for e in ests]
        outputs = {"violations": len(viol), **{f"V[K={e.K:g}]": e.value for e in ests}}
        params["K"] = Ks
        return scen.hash(), params, outputs, [], rows
    s = args.split if args.split is not None else float(run.get("split", 0.5 * (scen.t0 + scen.T)))
    K = _Ks(args, scen)[-1] if args.K else float(run.get("dpp_K", _Ks(args, scen)[0]))
    jumps = [tuple(map(float, j)) for j in run.get("jump_candidates", [])]
    rep = dpp_check(scen, s, K, pc, budget, args.seed, jump_candidates=jumps)
    params.update({"split": s, "K": K})
    return scen.hash(), params, rep.record(), [], []


def cmd_qvi(args, out):
    from .measures import EmpiricalMeasure
    from .qvi import CylinderFunctional, key_lemma_check, qvi_residual

    scen = resolve_scenario(args.scenario, args)
    fn = scen.extra.get("functional")
    if not fn:
        raise ValidationError("scenario has no [functional] section")
    co = scen.coefficients
    u = CylinderFunctional(fn["psi"], fn["F"], co.d, co.l)
    x, xi = scen.initial_ensemble()
    m = EmpiricalMeasure.from_xy(x, xi)
    box = np.asarray(fn["box"], float) if "box" in fn else None
    n = int(fn.get("samples", 0))
    rows = []
    worst = np.inf
    for k, t in enumerate(fn.get("times", [scen.t0])):
        r = qvi_residual(u, float(t), m, co, T=scen.T, box=box, n_samples=n, seed=args.seed)
        worst = min(worst, r.residual)
        rows.append({"stamp": k, "t": float(t), "hjb_part": r.hjb_part, "intervention_part": r.intervention_part,
                     "residual": r.residual, "witness": np.concatenate([np.atleast_1d(r.witness.x),
                                                                         np.atleast_1d(r.witness.xi)]).tolist()})
    outputs = {"min_residual": float(worst)}
    if args.key_lemma:
        rep = key_lemma_check(u, float(fn.get("times", [scen.t0])[0]), m, co, seed=args.seed,
                              cost_kw={"M": 8, "lambda_steps": 2})
        outputs.update({"key_lemma_direction": rep.direction, "key_lemma_violation": rep.violation_found})
    return scen.hash(), {"times": fn.get("times"), "samples": n}, outputs, [], rows


def cmd_pack(args, out):
    from .pack import FAMILIES, run_family

    names = list(FAMILIES) if args.name == "all" else [args.name]
    if any(n not in FAMILIES for n in names):
        raise ValidationError(f"unknown pack {args.name!r}; choose from {', '.join(FAMILIES)} or all")
    outputs, rows = {}, []
    for n in names:
        res = run_family(n, seed=args.seed)
        outputs[f"{n}.ok"] = res.ok
        for k, v in res.summary.items():
            if np.isscalar(v):
                outputs[f"{n}.{k}"] = v
        rows.extend({"family": n, **r} for r in res.rows)
    outputs["ok"] = all(outputs[f"{n}.ok"] for n in names)
    return None, {"name": args.name}, outputs, [], rows


COMMANDS = {"simulate": cmd_simulate, "jumpcost": cmd_jumpcost, "reward": cmd_reward,
            "parametrise": cmd_parametrise, "value": cmd_value, "qvi": cmd_qvi, "pack": cmd_pack}


# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="accepted for compatibility; runs single-threaded")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--oracle", action="store_true", help="also run the exhaustive oracle where one exists")
    common.add_argument("--grid-refine", type=int, default=1, metavar="k",
                        help="multiply time steps (and the oracle lattice) by k")

    p = _Parser(prog="mfsingular", description="Mean-field singular control laboratory.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate a particle system")
    s.add_argument("scenario")
    s.add_argument("--particles", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--policy-file")

    s = sub.add_parser("jumpcost", parents=[common], help="interpolated jump cost of a [query]")
    s.add_argument("scenario")
    s.add_argument("--M", type=int)
    s.add_argument("--lambda-steps", type=int)
    s.add_argument("--grid-size", type=int, default=8)

    s = sub.add_parser("reward", parents=[common], help="reward with jumps charged by interpolation")
    s.add_argument("scenario")
    s.add_argument("--sim", help="trajectory file written by simulate")
    s.add_argument("--naive", action="store_true", help="also report the pre-jump-state charge")
    s.add_argument("--particles", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--policy-file")
    s.add_argument("--M", type=int)

    s = sub.add_parser("parametrise", parents=[common], help="two-layer parametrisation and approximations")
    s.add_argument("action", choices=["build", "approx"])
    s.add_argument("scenario")
    s.add_argument("--sim")
    s.add_argument("--particles", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--policy-file")
    s.add_argument("--eps", type=float)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--trunc", type=float, default=10.0)

    s = sub.add_parser("value", parents=[common], help="bounded-velocity values and DPP checks")
    s.add_argument("action", choices=["sweep", "dpp"])
    s.add_argument("scenario")
    s.add_argument("--K", type=float, nargs="+")
    s.add_argument("--budget", type=int)
    s.add_argument("--split", type=float)
    s.add_argument("--particles", type=int)
    s.add_argument("--steps", type=int)

    s = sub.add_parser("qvi", parents=[common], help="QVI residual table of a cylinder functional")
    s.add_argument("action", choices=["check"])
    s.add_argument("scenario")
    s.add_argument("--key-lemma", action="store_true")

    s = sub.add_parser("pack", parents=[common], help="run a curated scenario family")
    s.add_argument("name")
    return p


def run(argv=None, stdout=None):
    """Execute one command; returns ``(exit code, RunRecord or None)``."""
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return (e.code if isinstance(e.code, int) else EXIT_VALIDATION), None
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    t0 = time.perf_counter()
    try:
        h, params, outputs, arts, rows = COMMANDS[args.command](args, out)
    except ArithmeticError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL, None
    except (ValueError, ScenarioError, KeyError, OSError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_VALIDATION, None
    emit(outputs, stdout)
    _table(rows, stdout)
    params = {**params, "threads": args.threads, "grid_refine": args.grid_refine, "oracle": args.oracle,
              "argv": list(argv) if argv is not None else sys.argv[1:]}
    rec = RunRecord(args.command if not hasattr(args, "action") else f"{args.command} {args.action}",
                    h, args.seed, params, outputs, arts, time.perf_counter() - t0)
    append_record(out, rec)
    ok = outputs.get("ok", True)
    return (EXIT_OK if ok is not False else EXIT_NUMERICAL), rec


def main(argv=None):
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
