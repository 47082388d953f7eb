"""Batch command-line runner: simulate, train, evaluate, verify, and bench.

Every run resolves its configuration up front, writes its outputs, and
records a manifest JSON listing the command, the resolved configuration,
the seeds in play, and every file the run produced.  Re-running a command
with the manifest's configuration and seeds reproduces the delimited
outputs byte for byte; only the wall-clock field differs.

Exit codes: 0 on success, 2 on invalid arguments (argparse usage text), 1
on numeric failure (weight overflow, singular systems, malformed inputs
discovered mid-run, or a verify suite failing its tolerance).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .baselines import load_qmodel, qlearn_linear_fit
from .consistency import TwoStageFiniteEnv, exp_loss_demo, hinge_solution, toy_surface, toy_value_at
from .datasets import (
    EnvSpec,
    gen_scheme1,
    gen_scheme2,
    load_dataset_csv,
    mc_policy_value,
    save_dataset_csv,
    stage_feature_dim,
    toy_dataset,
    uniform_random_policy,
    with_reward_shift,
)
from .evaluation import aipw_value, fit_propensity_multinomial, fit_q_nuisance
from .objective import WeightOverflowError, ipw_value_estimate
from .optimizer import OptimConfig, sdss_fit, trace_to_csv
from .policies import PolicyArch, StageArch, load_policy, policy_decide, save_policy
from .surrogates import KernelKind, SurrogateSpec, TauKind, audit_conditions

__all__ = ["RunManifest", "main"]

_FALLBACK_VERSION = "v0.1.0"

_HINGE_REFERENCE = (
    ("1", np.array([[5.0, 1.0], [3.0, 4.0], [4.0, 4.0]]), (0.0, 0.0, 0.0)),
    ("2", np.array([[5.0, 7.0], [3.0, 4.0], [4.0, 4.0]]), (0.0, 0.0, 0.0)),
    ("3", np.array([[1.0, 2.0], [80.0, 1.0], [3.0, 3.0]]), (-1.0, 2.0, -1.0)),
)

_EXP_DEMO_MATRIX = np.array([[4.0, 0.01], [2.5, 2.5]])


def _threads() -> int:
    """Worker cap from SDSS_THREADS (defaults to the CPU count, at least 1)."""
    raw = os.environ.get("SDSS_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        n = 1
    return max(1, n)


def _version() -> str:
    """Git-describe-style version of the running code, with a static fallback."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True,
            text=True, timeout=5.0,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return _FALLBACK_VERSION


@dataclass(frozen=True)
class RunManifest:
    """Reproducibility record of one run; every output file is listed."""

    command: str
    config: dict
    seeds: dict
    artifacts: tuple
    version: str
    wall_clock: float

    def write(self, path: str) -> str:
        doc = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "artifacts": list(self.artifacts),
            "version": self.version,
            "wall_clock": self.wall_clock,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _finish_run(command: str, config: dict, seeds: dict, outputs: list, t0: float) -> None:
    manifest_path = outputs[0] + ".manifest.json" if not os.path.isdir(outputs[0]) \
        else os.path.join(outputs[0], "manifest.json")
    artifacts = [p for p in outputs if not os.path.isdir(p)] + [manifest_path]
    RunManifest(command=command, config=config, seeds=seeds,
                artifacts=tuple(artifacts), version=_version(),
                wall_clock=time.perf_counter() - t0).write(manifest_path)


# ---------------------------------------------------------------------------
# configuration plumbing


def _default_train_config() -> dict:
    return {
        "optim": asdict(OptimConfig()),
        "arch": {
            "kind": "linear", "depth": 1, "width": 32, "activation": "relu",
            "dropout": 0.0, "include_bias": True, "shared_trunk": True,
        },
        "surrogate": {
            "template": "product",
            "tau": {"kind": "tanh", "scale": 1.0, "normalized": False},
            "kernel": "gumbel", "scale": 1.0, "nodes": 128,
        },
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _resolve_train_config(args) -> dict:
    cfg = _default_train_config()
    if args.config:
        with open(args.config) as fh:
            cfg = _merge(cfg, json.load(fh))
    surr = cfg["surrogate"]
    if args.surrogate:
        surr["template"] = args.surrogate
    if args.tau:
        surr["tau"]["kind"] = args.tau
    if args.tau_scale is not None:
        surr["tau"]["scale"] = args.tau_scale
    if args.normalized:
        surr["tau"]["normalized"] = args.normalized == "yes"
    if args.kernel:
        surr["kernel"] = args.kernel
    if args.scale is not None:
        surr["scale"] = args.scale
    if args.nodes is not None:
        surr["nodes"] = args.nodes
    arch = cfg["arch"]
    if args.policy:
        arch["kind"] = args.policy
    if args.width is not None:
        arch["width"] = args.width
    if args.depth is not None:
        arch["depth"] = args.depth
    if args.seed is not None:
        cfg["optim"]["seed"] = args.seed
    return cfg


def _build_arch(arch_cfg: dict, spec) -> PolicyArch:
    stages = tuple(
        StageArch(kind=arch_cfg["kind"], in_dim=stage_feature_dim(spec, t),
                  k=spec[t - 1].k, depth=arch_cfg["depth"], width=arch_cfg["width"],
                  activation=arch_cfg["activation"], dropout=arch_cfg["dropout"])
        for t in range(1, len(spec) + 1)
    )
    return PolicyArch(stages=stages, include_bias=arch_cfg["include_bias"],
                      shared_trunk=arch_cfg["shared_trunk"])


def _build_surrogates(surr_cfg: dict, spec) -> tuple:
    specs = []
    for st in spec:
        if surr_cfg["template"] == "product":
            specs.append(SurrogateSpec(template="product", k=st.k,
                                       tau=TauKind(**surr_cfg["tau"])))
        else:
            specs.append(SurrogateSpec(template="kernel", k=st.k,
                                       kernel=KernelKind(kind=surr_cfg["kernel"]),
                                       scale=surr_cfg["scale"], nodes=surr_cfg["nodes"]))
    return tuple(specs)


# ---------------------------------------------------------------------------
# policy files


def _policy_prefix(path: str) -> str:
    return path[:-5] if path.endswith(".json") else path


def _load_policy_file(path: str):
    """Decision rule from a policy checkpoint (fitted scores or outcome model)."""
    with open(path) as fh:
        doc = json.load(fh)
    fmt = doc.get("format")
    if fmt == "sdss-qmodel-v1":
        return load_qmodel(path).policy()
    if fmt != "sdss-policy-v1":
        raise ValueError(f"unrecognized policy file format {fmt!r}")
    arch, params = load_policy(_policy_prefix(path))

    def rule(stage: int, features, rng=None):
        return np.atleast_1d(policy_decide(params, arch, np.atleast_2d(features), stage))

    return rule


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if args.env == "toy":
        ds = toy_dataset()
    elif args.env == "scheme1":
        ds = gen_scheme1(args.n, omega=args.omega, seed=args.seed)
    else:
        ds = gen_scheme2(args.n, p=args.p, seed=args.seed)
    sidecar = save_dataset_csv(ds, args.out)
    config = {"env": args.env, "n": ds.n, "omega": args.omega, "p": args.p,
              "seed": args.seed}
    _finish_run("simulate", config, {"data": args.seed}, [args.out, sidecar], t0)
    print(f"wrote {ds.n} trajectories to {args.out}")
    return 0


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_train_config(args)
    ds = with_reward_shift(load_dataset_csv(args.data))
    arch = _build_arch(cfg["arch"], ds.spec)
    surrogates = _build_surrogates(cfg["surrogate"], ds.spec)
    ocfg = OptimConfig(**cfg["optim"])
    fit = sdss_fit(ds, arch, surrogates, ocfg)
    prefix = _policy_prefix(args.out)
    trace_path = prefix + ".trace.csv"
    trace_to_csv(fit.trace, trace_path)
    save_policy(prefix, arch, fit.params_best)
    _finish_run("train", cfg, {"optim": ocfg.seed},
                [prefix + ".json", prefix + ".theta.bin", trace_path], t0)
    best = min((rec.ema for rec in fit.trace), default=float("nan"))
    print(f"trained on {ds.n} rows ({fit.restarts} restarts, "
          f"best validation EMA {best:.6f}); policy written to {prefix}.json")
    return 0


def _cmd_evaluate(args, parser: argparse.ArgumentParser) -> int:
    t0 = time.perf_counter()
    if args.method == "mc":
        if not args.env:
            parser.error("--method mc requires --env")
    elif not args.data:
        parser.error(f"--method {args.method} requires --data")
    policy = _load_policy_file(args.policy_file)
    seeds = {}
    if args.method == "mc":
        env = EnvSpec.scheme1(omega=args.omega) if args.env == "scheme1" \
            else EnvSpec.scheme2(p=args.p)
        est = mc_policy_value(env, policy, n_eval=args.n_eval, seed=args.seed)
        seeds["eval"] = args.seed
    elif args.method == "ipw":
        est = ipw_value_estimate(load_dataset_csv(args.data), policy)
    else:
        ds = load_dataset_csv(args.data)
        nuis = fit_q_nuisance(ds, policy, lam=args.lam, interactions=True,
                              quadratic=True)
        props = "true"
        if args.fitted_propensities:
            props = tuple(fit_propensity_multinomial(ds, t) for t in (1, 2))
        est = aipw_value(ds, policy, nuis, propensities=props)
    with open(args.out, "w") as fh:
        json.dump(est.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    config = {"method": args.method, "env": args.env, "data": args.data,
              "policy_file": args.policy_file, "n_eval": args.n_eval,
              "omega": args.omega, "p": args.p, "lam": args.lam,
              "fitted_propensities": bool(args.fitted_propensities)}
    _finish_run("evaluate", config, seeds, [args.out], t0)
    print(f"{args.method} value estimate {est.estimate:.6f} (se {est.se:.6f}) -> {args.out}")
    return 0


def _audit_specs() -> list:
    specs = [SurrogateSpec(template="product", k=k,
                           tau=TauKind(kind="tanh", scale=1.0, normalized=True))
             for k in (2, 3, 4)]
    specs.append(SurrogateSpec(template="kernel", k=3,
                               kernel=KernelKind(kind="gumbel"), scale=1.0))
    return specs


def _verify_conditions(outdir: Path) -> tuple:
    rows = []
    ok = True
    for spec in _audit_specs():
        rep = audit_conditions(spec)
        rows.append(rep)
        ok = ok and rep.all_pass
        print(f"{rep.family} k={rep.k}: N1 margin {rep.N1_margin:.3e}, "
              f"N2 dev {rep.N2_max_abs_dev:.3e}, N3 dev {rep.N3_limit_dev:.3e}, "
              f"J {rep.J_empirical:.6f} (>= {rep.J_reference:.6f}), "
              f"symmetry {rep.symmetry_dev:.3e} -> "
              f"{'pass' if rep.all_pass else 'FAIL'}")
    csv_path = str(outdir / "conditions.csv")
    fields = ["family", "k", "c_phi", "N1_margin", "N2_max_abs_dev", "N3_limit_dev",
              "J_empirical", "J_reference", "symmetry_dev", "all_pass"]
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(fields) + "\n")
        for rep in rows:
            doc = rep.to_json()
            doc["all_pass"] = rep.all_pass
            fh.write(",".join(repr(doc[f]) if isinstance(doc[f], float) else str(doc[f])
                              for f in fields) + "\n")
    json_path = str(outdir / "conditions.json")
    with open(json_path, "w") as fh:
        json.dump([rep.to_json() for rep in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ok, [csv_path, json_path]


def _verify_hinge(outdir: Path) -> tuple:
    csv_path = str(outdir / "hinge.csv")
    ok = True
    with open(csv_path, "w", newline="") as fh:
        fh.write("setting,f11,f12,f13,argmax_set,pred_choice,d1_star,value,max_abs_err\n")
        for name, m, want in _HINGE_REFERENCE:
            sol = hinge_solution(TwoStageFiniteEnv(m))
            err = float(np.abs(sol.f1_tilde - np.asarray(want)).max())
            ok = ok and err <= 0.05
            print(f"setting {name}: f1_tilde = ({sol.f1_tilde[0]:+.4f}, "
                  f"{sol.f1_tilde[1]:+.4f}, {sol.f1_tilde[2]:+.4f}), "
                  f"argmax {set(sol.argmax_set)}, pred {sol.pred_choice}, "
                  f"d1* {sol.d1_star} (max abs err {err:.4f})")
            fh.write(f"{name},{sol.f1_tilde[0]!r},{sol.f1_tilde[1]!r},{sol.f1_tilde[2]!r},"
                     f"{'|'.join(map(str, sol.argmax_set))},{sol.pred_choice},"
                     f"{sol.d1_star},{sol.value!r},{err!r}\n")
    return ok, [csv_path]


def _verify_exp(outdir: Path) -> tuple:
    rep = exp_loss_demo(TwoStageFiniteEnv(_EXP_DEMO_MATRIX))
    json_path = str(outdir / "exp_demo.json")
    doc = {
        "matrix": _EXP_DEMO_MATRIX.tolist(),
        "d1_star": rep.d1_star,
        "d1_closed_form": rep.d1_closed,
        "d1_numeric": rep.d1_numeric,
        "d2_star": list(rep.d2_star),
        "d2_numeric": list(rep.d2_numeric),
        "stage1_scores": rep.stage1_scores.tolist(),
        "agree_closed_numeric": rep.agree_closed_numeric,
        "agree_with_optimal": rep.agree,
    }
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"d1* = {rep.d1_star}, surrogate picks {rep.d1_numeric} "
          f"(closed form {rep.d1_closed}); stage-2 rule "
          f"{'matches' if rep.d2_numeric == rep.d2_star else 'MISMATCHES'} the argmax rows; "
          f"inconsistency {'exhibited' if not rep.agree else 'NOT exhibited'}")
    ok = (rep.d1_numeric == rep.d1_closed == 2 and rep.d1_star == 1
          and rep.d2_numeric == rep.d2_star and rep.agree_closed_numeric)
    return ok, [json_path]


def _plot_surface(table, outdir: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for name, grid, label in (
        ("surface.png", table.values, "objective"),
        ("surface_grad.png", table.log10_grad_norm, "log10 gradient norm"),
    ):
        fig, ax = plt.subplots(figsize=(7, 5))
        im = ax.pcolormesh(table.x, table.y, grid, shading="auto")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        path = str(outdir / name)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def _verify_toy_surface(outdir: Path) -> tuple:
    table = toy_surface()
    csv_path = str(outdir / "surface.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write("x,y,value,log10_grad_norm\n")
        for x, y, v, g in table.rows():
            fh.write(f"{x!r},{y!r},{v!r},{g!r}\n")
    far = toy_surface((-1e4, 1e4), (-1e4, 1e4), (41, 41))
    far_sup = float(far.values.max())
    origin = toy_value_at(0.0, 0.0)
    at_10_4 = toy_value_at(10.0, 4.0)
    bound = (3.0 / 7.0) * 3.36 * 4.0
    summary = {
        "value_at_10_4": at_10_4,
        "reference_value_at_10_4": 3.24993,
        "origin_value": origin,
        "far_field_sup": far_sup,
        "upper_bound": bound,
        "grid_max": float(table.values.max()),
    }
    json_path = str(outdir / "surface_summary.json")
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"objective at (10, 4) = {at_10_4:.6f} (reference 3.24993, "
          f"gap {at_10_4 - 3.24993:+.6f}); origin = {origin:.6f}; "
          f"far-field sup = {far_sup:.6f}")
    ok = (abs(origin - 1.44) < 1e-9 and 3.24 <= far_sup <= 3.28
          and table.values.max() <= bound + 1e-9)
    return ok, [csv_path, json_path] + _plot_surface(table, outdir)


def _cmd_verify(args) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    runner = {"conditions": _verify_conditions, "hinge": _verify_hinge,
              "exp": _verify_exp, "toy-surface": _verify_toy_surface}[args.suite]
    ok, artifacts = runner(outdir)
    _finish_run("verify", {"suite": args.suite}, {}, [str(outdir)] + artifacts, t0)
    print(f"suite {args.suite}: {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def _bench_replication(payload: dict) -> list:
    """One benchmark replication; returns rows (replication, method, value, se)."""
    scheme = payload["scheme"]
    if scheme == "scheme1":
        env = EnvSpec.scheme1(omega=payload["omega"])
        ds = gen_scheme1(payload["n"], omega=payload["omega"], seed=payload["data_seed"])
    else:
        env = EnvSpec.scheme2(p=payload["p"])
        ds = gen_scheme2(payload["n"], p=payload["p"], seed=payload["data_seed"])
    rows = []
    for method in payload["methods"]:
        if method == "sdss":
            shifted = with_reward_shift(ds)
            cfg = dict(payload["optim"])
            cfg["seed"] = payload["fit_seed"]
            arch = _build_arch(payload["arch"], shifted.spec)
            surrogates = _build_surrogates(payload["surrogate"], shifted.spec)
            fit = sdss_fit(shifted, arch, surrogates, OptimConfig(**cfg))

            def rule(stage, features, rng=None, _p=fit.params_best, _a=arch):
                return np.atleast_1d(policy_decide(_p, _a, np.atleast_2d(features), stage))

            policy = rule
        elif method == "qlearn":
            policy = qlearn_linear_fit(ds, interactions=True).policy()
        elif method == "random":
            policy = uniform_random_policy(env)
        else:
            raise ValueError(f"unknown benchmark method {method!r}")
        est = mc_policy_value(env, policy, n_eval=payload["n_eval"],
                              seed=payload["eval_seed"])
        rows.append((payload["replication"], method, est.estimate, est.se))
    return rows


def _plot_bench(rows: list, methods: tuple, outdir: Path) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    data = [[r[2] for r in rows if r[1] == m] for m in methods]
    ax.boxplot(data, tick_labels=list(methods))
    ax.set_ylabel("estimated policy value")
    path = str(outdir / "bench_boxplot.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _cmd_bench(args) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for m in methods:
        if m not in ("sdss", "qlearn", "random"):
            raise ValueError(f"unknown benchmark method {m!r}")
    base_cfg = _default_train_config()
    master = np.random.SeedSequence(args.seed)
    payloads = []
    rep_seeds = []
    for rep, child in enumerate(master.spawn(args.replications), start=1):
        data_seed, fit_seed, eval_seed = (int(s.generate_state(1)[0]) for s in child.spawn(3))
        rep_seeds.append({"replication": rep, "data": data_seed,
                          "fit": fit_seed, "eval": eval_seed})
        payloads.append({
            "replication": rep, "scheme": args.scheme, "n": args.n,
            "omega": args.omega, "p": args.p, "methods": methods,
            "n_eval": args.n_eval, "data_seed": data_seed,
            "fit_seed": fit_seed, "eval_seed": eval_seed,
            "optim": base_cfg["optim"], "arch": base_cfg["arch"],
            "surrogate": base_cfg["surrogate"],
        })
    workers = min(_threads(), len(payloads))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_bench_replication, payloads))
        except (OSError, PermissionError):
            results = [_bench_replication(p) for p in payloads]
    else:
        results = [_bench_replication(p) for p in payloads]
    rows = [row for chunk in results for row in chunk]
    csv_path = str(outdir / "values.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write("replication,method,estimate,se\n")
        for rep, method, est, se in rows:
            fh.write(f"{rep},{method},{est!r},{se!r}\n")
    fig_path = _plot_bench(rows, methods, outdir)
    config = {"scheme": args.scheme, "n": args.n, "omega": args.omega, "p": args.p,
              "replications": args.replications, "methods": list(methods),
              "n_eval": args.n_eval, "optim": base_cfg["optim"],
              "arch": base_cfg["arch"], "surrogate": base_cfg["surrogate"]}
    _finish_run("bench", config, {"master": args.seed, "replications": rep_seeds},
                [str(outdir), csv_path, fig_path], t0)
    for m in methods:
        vals = np.array([r[2] for r in rows if r[1] == m])
        print(f"{m}: median value {np.median(vals):.4f} over {vals.size} replications")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdss",
        description="Simulate, fit, evaluate, and verify multi-stage decision rules.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset and write it as CSV")
    p_sim.add_argument("--env", required=True, choices=["scheme1", "scheme2", "toy"],
                       help="generative environment")
    p_sim.add_argument("--n", type=int, default=1000, help="number of trajectories")
    p_sim.add_argument("--omega", type=float, default=10.0,
                       help="curvature amplitude of the first environment")
    p_sim.add_argument("--p", type=int, default=50,
                       help="covariate dimension of the second environment")
    p_sim.add_argument("--seed", type=int, default=0, help="generator seed")
    p_sim.add_argument("--out", required=True, help="output CSV path")
    p_sim.set_defaults(func=_cmd_simulate)

    p_tr = sub.add_parser("train", help="fit a decision rule on a dataset CSV")
    p_tr.add_argument("--data", required=True, help="training dataset CSV")
    p_tr.add_argument("--surrogate", choices=["product", "kernel"],
                      help="surrogate template (default product)")
    p_tr.add_argument("--tau", choices=["tanh", "algebraic_ratio", "abs_ratio",
                                        "arctan", "logistic_cdf"],
                      help="product-template link (default tanh)")
    p_tr.add_argument("--tau-scale", type=float, help="link scale C")
    p_tr.add_argument("--normalized", choices=["yes", "no"],
                      help="normalize the link to range (0, C) instead of (0, 2C)")
    p_tr.add_argument("--kernel", choices=["logistic", "gumbel", "gaussian"],
                      help="kernel-template distribution (default gumbel)")
    p_tr.add_argument("--scale", type=float, help="kernel amplitude C")
    p_tr.add_argument("--nodes", type=int, help="kernel quadrature order")
    p_tr.add_argument("--policy", choices=["linear", "mlp"],
                      help="score-function class (default linear)")
    p_tr.add_argument("--width", type=int, help="hidden width for mlp scores")
    p_tr.add_argument("--depth", type=int, help="hidden depth for mlp scores")
    p_tr.add_argument("--seed", type=int, help="optimizer seed")
    p_tr.add_argument("--config", help="JSON config overriding defaults "
                                       "(optim/arch/surrogate field names)")
    p_tr.add_argument("--out", required=True, help="output policy JSON path")
    p_tr.set_defaults(func=_cmd_train)

    p_ev = sub.add_parser("evaluate", help="estimate the value of a saved policy")
    p_ev.add_argument("--data", help="logged dataset CSV (ipw/aipw)")
    p_ev.add_argument("--env", choices=["scheme1", "scheme2"],
                      help="generative environment (mc)")
    p_ev.add_argument("--policy-file", required=True, help="policy JSON from train "
                      "or a saved outcome-model file")
    p_ev.add_argument("--method", required=True, choices=["mc", "ipw", "aipw"],
                      help="value estimator")
    p_ev.add_argument("--n-eval", type=int, default=100000,
                      help="fresh draws for the mc method")
    p_ev.add_argument("--omega", type=float, default=10.0, help="scheme1 amplitude")
    p_ev.add_argument("--p", type=int, default=50, help="scheme2 dimension")
    p_ev.add_argument("--seed", type=int, default=0, help="mc draw seed")
    p_ev.add_argument("--lam", type=float, default=1e-6,
                      help="ridge penalty of the aipw outcome models")
    p_ev.add_argument("--fitted-propensities", action="store_true",
                      help="aipw: estimate treatment probabilities instead of "
                           "using the logged ones")
    p_ev.add_argument("--out", required=True, help="output report JSON path")
    p_ev.set_defaults(func=lambda a: _cmd_evaluate(a, p_ev))

    p_vf = sub.add_parser("verify", help="run one numeric verification suite")
    p_vf.add_argument("--suite", required=True,
                      choices=["conditions", "hinge", "exp", "toy-surface"],
                      help="which checks to run")
    p_vf.add_argument("--out", required=True, help="output directory")
    p_vf.set_defaults(func=_cmd_verify)

    p_bn = sub.add_parser("bench", help="replicate fit+evaluate and tabulate values")
    p_bn.add_argument("--scheme", choices=["scheme1", "scheme2"], default="scheme1",
                      help="generative environment")
    p_bn.add_argument("--n", type=int, default=15000, help="rows per replication")
    p_bn.add_argument("--omega", type=float, default=10.0, help="scheme1 amplitude")
    p_bn.add_argument("--p", type=int, default=50, help="scheme2 dimension")
    p_bn.add_argument("--replications", type=int, default=10,
                      help="independent replications")
    p_bn.add_argument("--methods", default="sdss,qlearn",
                      help="comma-separated subset of sdss,qlearn,random")
    p_bn.add_argument("--n-eval", type=int, default=100000,
                      help="fresh draws per value estimate")
    p_bn.add_argument("--seed", type=int, default=0, help="master seed")
    p_bn.add_argument("--out", required=True, help="output directory")
    p_bn.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (WeightOverflowError, np.linalg.LinAlgError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
