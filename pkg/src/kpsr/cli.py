"""Batch experiment driver.

Subcommands: generate, fit, train, evaluate, diagnose, run-all.  Common
flags: --config (builtin name or JSON path), --seed (override), --out
(output directory).  The commands form a pipeline sharing the output
directory: generate writes trajectories.csv, fit writes bundle.json and a
fit report, train writes checkpoints and the training log, evaluate and
diagnose write oracle-comparison reports with figures.

Exit codes: 0 success, 2 config error, 3 numerical failure,
4 infeasibility flagged during training.  KPSR_THREADS caps BLAS
parallelism.
"""

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4


def _cap_threads():
    n = os.environ.get("KPSR_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kpsr",
                                description="kernel PSR experiment driver")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "roll exploration episodes and write the trajectory file"),
        ("fit", "fit the operator bundle on a trajectory file"),
        ("train", "run the constrained policy optimization loop"),
        ("evaluate", "compare estimated value/risk against the oracle"),
        ("diagnose", "convergence-rate and consistency diagnostics"),
        ("run-all", "run the full acceptance suite end to end"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=(name != "run-all"),
                        help="experiment config: builtin name or JSON path")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--out", default="kpsr-out", help="output directory")
        if name in ("fit", "train", "evaluate", "diagnose"):
            sp.add_argument("--data", default=None, help="trajectory file path")
        if name in ("train", "evaluate", "diagnose"):
            sp.add_argument("--bundle", default=None, help="operator bundle path")
        if name == "train":
            sp.add_argument("--resume", default=None, help="checkpoint to resume from")
        if name == "evaluate":
            sp.add_argument("--checkpoint", default=None,
                            help="training checkpoint providing the learned policy")
    return p


def _load(args):
    from .config import load_experiment_config
    return load_experiment_config(args.config, seed_override=args.seed)


def _exploration_windows(cfg, path):
    from .config import build_maps
    from .data import load_trajectories, make_windows
    env = cfg.make_env()
    trajs = load_trajectories(path)
    maps = build_maps(env, cfg.W, cfg.L, cfg.features, seed=cfg.seed)
    return env, maps, make_windows(trajs, cfg.W, cfg.L)


def cmd_generate(args) -> int:
    from .data import save_trajectories
    from .envs import rollout
    from .report import ensure_dir, write_sidecar
    from . import __version__
    cfg = _load(args)
    env = cfg.make_env()
    ensure_dir(args.out)
    episodes = int(cfg.datagen.get("episodes", 100))
    steps = int(cfg.datagen.get("steps", 200))
    trajs = rollout(env, episodes=episodes, T=steps, seed=cfg.seed)
    path = os.path.join(args.out, "trajectories.csv")
    save_trajectories(path, trajs, n_risks=env.n_risks, config_hash=cfg.hash,
                      tool_version=__version__)
    write_sidecar(args.out)
    print(f"wrote {path} ({episodes} episodes x {steps} steps)")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .data import featurize_windows
    from .operators import fit_bundle, save_bundle
    from .report import ensure_dir, write_csv, write_sidecar
    cfg = _load(args)
    data_path = args.data or os.path.join(args.out, "trajectories.csv")
    env, maps, windows = _exploration_windows(cfg, data_path)
    blocks = featurize_windows(windows, maps)
    bundle = fit_bundle(blocks, maps, lam=cfg.lam, seed=cfg.seed)
    ensure_dir(args.out)
    bundle_path = os.path.join(args.out, "bundle.json")
    save_bundle(bundle, bundle_path)
    rows = [(name, float(val)) for name, val in sorted(bundle.losses.items())]
    write_csv(os.path.join(args.out, "fit_report.csv"), ["operator", "loss"],
              rows, cfg.hash)
    write_sidecar(args.out)
    print(f"wrote {bundle_path} (K={bundle.sample_count})")
    for name, val in rows:
        print(f"  {name}: {val:.6g}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .operators import load_bundle
    from .report import ensure_dir, training_figure, write_sidecar
    from .training import TrainState, load_checkpoint, train
    cfg = _load(args)
    env = cfg.make_env()
    bundle_path = args.bundle or os.path.join(args.out, "bundle.json")
    bundle, _links = load_bundle(bundle_path)
    resume = load_checkpoint(args.resume) if args.resume else None
    ensure_dir(args.out)
    state = train(env, bundle, cfg.train_settings, seed=cfg.seed, out_dir=args.out,
                  config_hash=cfg.hash, resume_state=resume)
    training_figure(state.log_rows, len(cfg.train_settings.cbar),
                    cfg.train_settings.cbar,
                    os.path.join(args.out, "training_curves.png"))
    write_sidecar(args.out)
    feasible = _final_feasible(state, cfg.train_settings.cbar)
    print(f"trained {state.iteration} iterations; feasible={feasible}; "
          f"infeasible_histories={state.infeasible}")
    if state.infeasible:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _final_feasible(state, cbar) -> bool:
    if not cbar or not state.log_rows:
        return True
    last = state.log_rows[-1]
    n = len(cbar)
    C = last[3:3 + n]
    return all(c <= cb for c, cb in zip(C, cbar))


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_policies
    from .report import ensure_dir, evaluation_figure, write_csv, write_sidecar
    cfg = _load(args)
    ensure_dir(args.out)
    bundle_path = args.bundle or os.path.join(args.out, "bundle.json")
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint.json")
    if not os.path.exists(ckpt):
        ckpt = None
    rows = evaluate_policies(cfg, bundle_path, ckpt)
    header = ["policy", "V_est", "V_exact", "dV"]
    n_risks = len(rows[0]["C_est"]) if rows else 0
    for i in range(n_risks):
        header += [f"C{i + 1}_est", f"C{i + 1}_exact", f"dC{i + 1}"]
    table = []
    for r in rows:
        line = [r["policy"], r["V_est"], r["V_exact"], r["dV"]]
        for i in range(n_risks):
            line += [r["C_est"][i], r["C_exact"][i], r["dC"][i]]
        table.append(line)
    write_csv(os.path.join(args.out, "evaluation.csv"), header, table, cfg.hash)
    evaluation_figure(rows, os.path.join(args.out, "evaluation.png"))
    write_sidecar(args.out)
    for r in rows:
        print(f"{r['policy']}: V_est={r['V_est']:.4f} V_exact={r['V_exact']:.4f} "
              f"|dV|={abs(r['dV']):.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .diagnostics import convergence_study
    from .envs import TabularPOMDP
    from .evaluation import diagnose_bundle
    from .report import (bellman_figure, convergence_figure, ensure_dir,
                         write_csv, write_json, write_sidecar)
    cfg = _load(args)
    env = cfg.make_env()
    if not isinstance(env, TabularPOMDP):
        from .envs import OracleError
        raise OracleError("no-oracle: diagnostics need a tabular environment")
    ensure_dir(args.out)
    bundle_path = args.bundle or os.path.join(args.out, "bundle.json")
    report = diagnose_bundle(cfg, bundle_path)
    study = report["study"]
    rows = [(seed, k, e) for seed, errs in sorted(study["per_seed"].items())
            for k, e in zip(study["ks"], errs)]
    write_csv(os.path.join(args.out, "diagnostics.csv"),
              ["seed", "K", "forward_tv"], rows, cfg.hash)
    write_json(os.path.join(args.out, "diagnostics.json"), report["summary"], cfg.hash)
    convergence_figure(study["ks"], study["per_seed"], study["mean_errors"],
                       study["slope"], os.path.join(args.out, "convergence.png"))
    bellman_figure(report["bellman_trace"], os.path.join(args.out, "bellman.png"))
    write_sidecar(args.out)
    print(f"slope={study['slope']:.3f}  value_gap={report['summary']['value_gap']:.4f}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    from .acceptance import run_all
    results = run_all(args.out, seed=args.seed)
    return EXIT_OK if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    _cap_threads()
    args = _parser().parse_args(argv)
    from .config import ConfigError
    from .envs import EnvConfigError, OracleError
    from .operators import BundleFormatError, SolveError
    from .training import NumericalError
    handler = {
        "generate": cmd_generate, "fit": cmd_fit, "train": cmd_train,
        "evaluate": cmd_evaluate, "diagnose": cmd_diagnose, "run-all": cmd_run_all,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, EnvConfigError, OracleError, BundleFormatError,
            FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolveError, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
