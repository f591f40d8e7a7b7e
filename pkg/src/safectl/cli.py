"""Command-line entry point.

Subcommands: gen-demos, train, quantify, run, sweep, report. All artifact
paths are relative to --out. The environment variable SSP_SEED overrides the
master seed; explicit flags override config-file values which override
defaults. Exit codes: 0 success, 2 config error, 3 missing dependency,
4 threshold failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dynamics as dyn
from .config import ConfigError
from .control import ClfConfig
from .sim import ClfPolicy, compute_metrics, run_episode
from .sim import demo_from_log as sim_demo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_THRESHOLD = 4

DEMOS = "demos.jsonl"
MODEL_FULL = "model_full.bin"
MODEL_POS = "model_pos.bin"
LOSS_FULL = "loss_full.csv"
LOSS_POS = "loss_pos.csv"
BOUNDS_FULL = "bounds_full.json"
BOUNDS_POS = "bounds_pos.json"
SUMMARY = "summary.json"


class MissingArtifact(RuntimeError):
    pass


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path.name} ({hint}); looked in {path.parent}")
    return path


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_loss_csv(path: Path, losses):
    lines = ["epoch,loss"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n")


def _load_config(args) -> dict:
    overrides: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw_val = item.partition("=")
        try:
            val = json.loads(raw_val)
        except json.JSONDecodeError:
            val = raw_val
        cfgmod.set_by_dotted_path(overrides, key, val)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        overrides["episodes"] = args.episodes
    cfg = cfgmod.load(args.config, overrides)
    env_seed = os.environ.get("SSP_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"SSP_SEED must be an integer, got {env_seed!r}")
    return cfg


def _episode_seed(master: int, seed_group: int, index: int) -> tuple:
    return (master, seed_group, index)


def _split_from_cfg(cfg, demos):
    return dyn.split_demos(demos, cfg["train"]["holdout_frac"], seed=cfg["seed"])


# -- commands --------------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n
    # demonstrations are collected in the zone-free environment
    env_cfg = cfgmod.build_env(cfg, with_zones=False)
    demos = []
    failures = 0
    policy, _ = cfgmod.build_policy({**cfg, "policy": {**cfg["policy"], "type": "scripted"}})
    for i in range(n):
        result, log = run_episode(policy, env_cfg, seed=_episode_seed(cfg["seed"], 0, i))
        if not result.success:
            failures += 1
        demos.append(sim_demo(log, env_cfg.dt))
    dyn.save_demos(out / DEMOS, demos)
    print(f"wrote {len(demos)} demonstrations to {out / DEMOS} "
          f"({n - failures}/{n} reached the goal)")
    if failures > 0.05 * n:
        print(f"expert failure rate {failures / n:.2%} exceeds 5%", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    demos = dyn.load_demos(_need(out / DEMOS, "run gen-demos first"))
    train_demos, _ = _split_from_cfg(cfg, demos)
    tc = cfgmod.build_train_config(cfg)
    e = cfg["env"]

    model = dyn.NeuralOdeModel.create(
        n_state=e["n_state"], n_action=e["n_action"],
        hidden=cfg["model"]["hidden"], dt=e["dt"], seed=cfg["model"]["seed"],
    )
    trained, losses = dyn.train(model, train_demos, tc)
    trained.save(out / MODEL_FULL, extra={"train_seed": tc.seed,
                                          "holdout_frac": cfg["train"]["holdout_frac"]})
    _write_loss_csv(out / LOSS_FULL, losses)
    print(f"full model: final loss {losses[-1]:.3e} -> {out / MODEL_FULL}")

    pos_model, pos_losses = dyn.derive_position_model(model, train_demos, tc)
    pos_model.save(out / MODEL_POS, extra={"train_seed": tc.seed,
                                           "holdout_frac": cfg["train"]["holdout_frac"]})
    _write_loss_csv(out / LOSS_POS, pos_losses)
    print(f"position model: final loss {pos_losses[-1]:.3e} -> {out / MODEL_POS}")
    return EXIT_OK


def cmd_quantify(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    demos = dyn.load_demos(_need(out / DEMOS, "run gen-demos first"))
    full, _ = dyn.NeuralOdeModel.load(_need(out / MODEL_FULL, "run train first"))
    pos, _ = dyn.NeuralOdeModel.load(_need(out / MODEL_POS, "run train first"))
    _, held = _split_from_cfg(cfg, demos)
    b_full = dyn.quantify_uncertainty(full, held)
    b_pos = dyn.quantify_uncertainty(pos, dyn.slice_demos(held, (0, 1, 2), (0, 1, 2)))
    _write_json(out / BOUNDS_FULL, b_full.to_dict())
    _write_json(out / BOUNDS_POS, b_pos.to_dict())
    print(f"full:     e_sdot={b_full.e_sdot:.4e} e_s={b_full.e_s:.4e}")
    print(f"position: e_sdot={b_pos.e_sdot:.4e} e_s={b_pos.e_s:.4e}")
    return EXIT_OK


def _load_stack(cfg, out: Path, need_models: bool, need_bounds: bool):
    demos = dyn.load_demos(_need(out / DEMOS, "run gen-demos first"))
    models = bounds = None
    if need_models:
        full, _ = dyn.NeuralOdeModel.load(_need(out / MODEL_FULL, "run train first"))
        pos, _ = dyn.NeuralOdeModel.load(_need(out / MODEL_POS, "run train first"))
        models = {"full": full, "position": pos}
    if need_bounds:
        b_full = dyn.UncertaintyBounds.from_dict(
            json.loads(_need(out / BOUNDS_FULL, "run quantify first").read_text())
        )
        b_pos = dyn.UncertaintyBounds.from_dict(
            json.loads(_need(out / BOUNDS_POS, "run quantify first").read_text())
        )
        bounds = {"full": b_full, "position": b_pos}
    return demos, models, bounds


def _write_episode_csv(path: Path, log, n_state: int, n_action: int):
    cols = ["t"]
    cols += [f"s{i}" for i in range(n_state)]
    cols += [f"a_des{i}" for i in range(n_action)]
    cols += [f"a_safe{i}" for i in range(n_action)]
    k = log.filter_margins.shape[1] if log.filter_margins is not None else log.margins.shape[1]
    cols += [f"margin{i}" for i in range(k)]
    cols += ["slack", "solve_time_us"]
    lines = [",".join(cols)]
    steps = log.a_des.shape[0]
    for t in range(steps):
        m = log.filter_margins[t] if log.filter_margins is not None else log.margins[t + 1]
        row = [str(t)]
        row += [repr(float(v)) for v in log.states[t + 1]]
        row += [repr(float(v)) for v in log.a_des[t]]
        row += [repr(float(v)) for v in log.a_safe[t]]
        row += [repr(float(v)) for v in m]
        row += [repr(float(log.slack[t])), repr(float(log.solve_time_us[t]))]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    shield_on = cfg["shield"]["enabled"] if args.shield is None else args.shield == "on"
    cfg["shield"]["enabled"] = shield_on
    need_models = shield_on or cfg["policy"]["type"] == "clf"
    demos, models, bounds = _load_stack(cfg, out, need_models, need_bounds=shield_on)

    policy, path = cfgmod.build_policy(
        cfg, model_full=models["full"] if models else None, demos=demos
    )
    shield = cfgmod.build_shield(cfg, models, bounds, demos=demos) if shield_on else None

    env_cfg = cfgmod.build_env(cfg)
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    results_by_seed = {}
    for seed_group in cfg["seeds"]:
        results = []
        for i in range(cfg["episodes"]):
            result, log = run_episode(
                policy, env_cfg, seed=_episode_seed(cfg["seed"], seed_group, i),
                shield=shield, path=path,
            )
            _write_episode_csv(
                ep_dir / f"ep{seed_group}_{i:03d}.csv", log, env_cfg.n_state, env_cfg.n_action
            )
            results.append(result)
        results_by_seed[seed_group] = results

    bounds_payload = None
    if bounds is not None:
        bounds_payload = {"e_sdot": bounds["full"].e_sdot, "e_s": bounds["full"].e_s}
    summary = compute_metrics(results_by_seed, bounds=bounds_payload)
    summary["policy"] = cfg["policy"]["type"]
    summary["shield"] = shield_on
    _write_json(out / SUMMARY, summary)
    cr = summary["collision_rate"]["mean"]
    sr = summary["success_rate_without_violation"]["mean"]
    print(f"episodes={summary['episodes']} collision_rate={cr:.2f} "
          f"success(no violation)={sr:.2f} -> {out / SUMMARY}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one number")

    if args.param == "beta":
        # CLF tracking deviation, shield off
        demos, models, _ = _load_stack(cfg, out, need_models=True, need_bounds=False)
        env_cfg = cfgmod.build_env(cfg)
        path = cfgmod.build_path(cfg)
        if path is None:
            raise ConfigError("beta sweep requires policy.path")
        rows = []
        for beta in values:
            clf_cfg = ClfConfig(c=cfg["policy"]["c"], beta=beta,
                                threshold=cfg["policy"]["advance_threshold"],
                                exponent=cfg["policy"]["advance_exponent"])
            policy = ClfPolicy(models["full"], path, clf_cfg)
            devs = []
            for seed_group in cfg["seeds"]:
                for i in range(cfg["episodes"]):
                    result, _ = run_episode(
                        policy, env_cfg, seed=_episode_seed(cfg["seed"], seed_group, i), path=path
                    )
                    devs.append(result.tracking_dev)
            rows.append((beta, float(np.mean(devs))))
        csv_path = out / "sweep_beta.csv"
        csv_path.write_text(
            "beta,tracking_dev_m\n"
            + "\n".join(f"{b!r},{d!r}" for b, d in rows) + "\n"
        )
    else:
        # mean min hard margin under the shield
        demos, models, bounds = _load_stack(cfg, out, need_models=True, need_bounds=True)
        env_cfg = cfgmod.build_env(cfg)
        policy, path = cfgmod.build_policy(cfg, model_full=models["full"], demos=demos)
        rows = []
        for gamma in values:
            cfg_g = json.loads(json.dumps(cfg))
            cfg_g["shield"]["gamma"] = gamma
            shield = cfgmod.build_shield(cfg_g, models, bounds, demos=demos)
            margins = []
            for seed_group in cfg["seeds"]:
                for i in range(cfg["episodes"]):
                    result, _ = run_episode(
                        policy, env_cfg, seed=_episode_seed(cfg["seed"], seed_group, i),
                        shield=shield, path=path,
                    )
                    margins.append(result.min_margin)
            rows.append((gamma, float(np.mean(margins))))
        csv_path = out / "sweep_gamma.csv"
        csv_path.write_text(
            "gamma,mean_min_margin\n"
            + "\n".join(f"{g!r},{m!r}" for g, m in rows) + "\n"
        )
    for v, metric in rows:
        print(f"{args.param}={v:g}: {metric:.6e}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    report = {}
    summary_path = out / SUMMARY
    if summary_path.exists():
        report["summary"] = json.loads(summary_path.read_text())
    for name in ("sweep_beta", "sweep_gamma"):
        p = out / f"{name}.csv"
        if p.exists():
            header, *rows = p.read_text().strip().splitlines()
            keys = header.split(",")
            report[name] = [dict(zip(keys, (float(x) for x in r.split(",")))) for r in rows]
    for name in (BOUNDS_FULL, BOUNDS_POS):
        p = out / name
        if p.exists():
            report[name.removesuffix(".json")] = json.loads(p.read_text())
    if not report:
        raise MissingArtifact(f"nothing to report in {out} (run the pipeline first)")
    _write_json(out / "report.json", report)
    if "summary" in report:
        s = report["summary"]
        print("metric                           mean      std")
        for key in ("success_rate_with_violation", "success_rate_without_violation",
                    "collision_rate", "inference_time_ms", "safe_margin", "tracking_dev_m"):
            if key in s and isinstance(s[key], dict):
                print(f"{key:32s} {s[key]['mean']:+.4f}  {s[key]['std']:.4f}")
    for name in ("sweep_beta", "sweep_gamma"):
        if name in report:
            print(f"{name}: " + "  ".join(
                f"{row[list(row)[0]]:g}:{row[list(row)[1]]:.4e}" for row in report[name]
            ))
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safectl",
        description="Learned-dynamics safety filtering: demos, training, "
                    "uncertainty bounds, shielded evaluation, sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes=False):
        p.add_argument("--config", required=True, help="run-config JSON file")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field by dotted path (JSON value)")
        if episodes:
            p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    common(p)
    p.add_argument("--n", type=int, default=100, help="number of demonstrations")
    p.set_defaults(fn=cmd_gen_demos)

    p = sub.add_parser("train", help="train full and position dynamics models")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("quantify", help="held-out uncertainty bounds")
    common(p)
    p.set_defaults(fn=cmd_quantify)

    p = sub.add_parser("run", help="run evaluation episodes")
    common(p, episodes=True)
    p.add_argument("--shield", choices=("on", "off"), default=None,
                   help="override shield.enabled")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="hyperparameter sweep (beta or gamma)")
    common(p, episodes=True)
    p.add_argument("--param", choices=("beta", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate artifacts into report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
