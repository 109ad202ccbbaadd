"""Pipeline driver: one subcommand per stage, manifests chaining them.

Stages write into `NN-stagename/` under the run directory and record a
manifest (inputs with sha256 hashes, outputs, wall clock, full config
snapshot) so a finished directory is self-describing.  Exit codes:
0 success, 1 contract violation, 2 numeric fault, 3 verification failed,
64 usage error.

Heavy modules are imported inside the stage functions: `--threads` works
by capping the BLAS pools through the environment, which must happen
before numpy loads.
"""

import argparse
import hashlib
import json
import os
import sys
import time

from .errors import ContractViolation, NumericFault, SimblError

STAGE_DIRS = {
    "collect": "01-collect",
    "train-model": "02-train-model",
    "learn-safe-set": "03-learn-safe-set",
    "verify": "04-verify",
    "explore": "05-explore",
    "compare-lqr": "06-compare-lqr",
    "export-grid": "07-export-grid",
}

EXIT_VERIFICATION_FAILED = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="simbl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--run-dir", help="override [run] out_dir")
    parser.add_argument("--threads", type=int,
                        help="cap BLAS worker threads for this process")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    sub.add_parser("collect", help="roll the plant and record a dataset")
    p = sub.add_parser("train-model", help="fit the uncertainty-aware model")
    p.add_argument("--prev-model",
                   help="previous checkpoint for the consistency prior")
    p = sub.add_parser("learn-safe-set", help="alternate descent for (V, l_s, K)")
    p.add_argument("--model", default="model",
                   help="'env' for exact dynamics, 'model' for the trained "
                        "checkpoint, or a checkpoint path")
    p = sub.add_parser("verify", help="Monte-Carlo certificate for the safe set")
    p.add_argument("--target", default="env", choices=("env", "model"),
                   help="verify against the true plant or the learned model")
    p = sub.add_parser("explore", help="roll a safe-exploration trial")
    p.add_argument("--strategy", default="safe-mpc",
                   choices=("safe-mpc", "semi-random"))
    p.add_argument("--unsafe-override", action="store_true",
                   help="explore without a SAFE certificate")
    sub.add_parser("compare-lqr", help="learned gain vs the Riccati gain")
    sub.add_parser("export-grid", help="emit contour CSVs and SVG figures")
    return parser


# ----------------------------------------------------------------------
# plumbing


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _stage_dir(run_dir, command):
    path = os.path.join(run_dir, STAGE_DIRS[command])
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(run_dir, command, inputs, outputs, t0, cfg):
    manifest = {
        "stage": command,
        "inputs": {os.path.relpath(p, run_dir): _sha256(p) for p in inputs},
        "outputs": [os.path.relpath(p, run_dir) for p in sorted(outputs)],
        "wall_clock_s": round(time.time() - t0, 3),
        "config": cfg.as_dict(),
    }
    for p in outputs:
        if not os.path.exists(p):
            raise ContractViolation(f"stage output missing: {p}")
    path = os.path.join(_stage_dir(run_dir, command), "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path, hint):
    if not os.path.exists(path):
        raise ContractViolation(f"missing input artifact {path} (run `{hint}` first)")
    return path


def _load_run(args):
    from .config import RunConfig, load_config, DEFAULTS

    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig({s: dict(kv) for s, kv in DEFAULTS.items()})
    if "SIMBL_SEED" in os.environ:
        cfg.replace("run", "seed", int(os.environ["SIMBL_SEED"]))
    if args.run_dir:
        cfg.replace("run", "out_dir", args.run_dir)
    run_dir = cfg.get("run", "out_dir")
    os.makedirs(run_dir, exist_ok=True)
    return cfg, run_dir


def _params(cfg):
    from .pendulum import PendulumParams

    return PendulumParams(**cfg.section("pendulum"))


# ----------------------------------------------------------------------
# stages


def cmd_collect(args, cfg, run_dir):
    import numpy as np

    from .pendulum import collect_dataset, lqr_policy, save_dataset

    params = _params(cfg)
    sec = cfg.section("collect")
    policy = lqr_policy(np.asarray(sec["gain"]), params)
    dataset = collect_dataset(policy, sec["n_points"], params,
                              seed=cfg.get("run", "seed"),
                              episode_len=sec["episode_len"])
    out = os.path.join(_stage_dir(run_dir, "collect"), "dataset.csv")
    save_dataset(out, dataset)
    return [], [out]


def cmd_train_model(args, cfg, run_dir):
    from .model import ModelConfig, load_model, save_model, train_model
    from .pendulum import load_dataset
    from .serialize import write_csv

    params = _params(cfg)
    data_path = _require(os.path.join(run_dir, STAGE_DIRS["collect"],
                                      "dataset.csv"), "simbl collect")
    seed = cfg.get("run", "seed")
    dataset = load_dataset(data_path, params, seed=seed)
    inputs = [data_path]
    prev = None
    if args.prev_model:
        prev = load_model(_require(args.prev_model, "simbl train-model"))
        inputs.append(args.prev_model)
    model = train_model(dataset, prev, ModelConfig(**cfg.section("model")), seed)

    stage = _stage_dir(run_dir, "train-model")
    ckpt = os.path.join(stage, "model.txt")
    save_model(ckpt, model)
    log = os.path.join(stage, "training.csv")
    keys = list(model.history[0]) if model.history else ["epoch", "loss"]
    write_csv(log, keys, [[row[k] for row in model.history] for k in keys])
    return inputs, [ckpt, log]


def _load_safe_set(run_dir):
    from .lyapunov import load_lyapunov
    from .policy import load_policy

    stage = os.path.join(run_dir, STAGE_DIRS["learn-safe-set"])
    lyap_path = _require(os.path.join(stage, "lyapunov.txt"),
                         "simbl learn-safe-set")
    pol_path = _require(os.path.join(stage, "policy.txt"),
                        "simbl learn-safe-set")
    return (load_lyapunov(lyap_path), load_policy(pol_path),
            [lyap_path, pol_path])


def _resolve_model(spec_arg, cfg, run_dir, inputs):
    """'env' -> exact dynamics; 'model' -> this run's checkpoint; else path."""
    from .model import KnownModel, load_model

    if spec_arg == "env":
        return KnownModel(_params(cfg))
    path = (os.path.join(run_dir, STAGE_DIRS["train-model"], "model.txt")
            if spec_arg == "model" else spec_arg)
    _require(path, "simbl train-model")
    inputs.append(path)
    return load_model(path)


def cmd_learn_safe_set(args, cfg, run_dir):
    import numpy as np

    from .descent import DescentConfig, train_safe_set
    from .lyapunov import GridSpec, LyapunovConfig, save_lyapunov
    from .policy import LinearTanhPolicy, save_policy
    from .serialize import write_csv

    params = _params(cfg)
    sec = cfg.section("safe-set")
    inputs = []
    model = _resolve_model(args.model, cfg, run_dir, inputs)
    dcfg = DescentConfig(
        outer=sec["outer"], inner_v=sec["inner_v"], inner_k=sec["inner_k"],
        lr_v=sec["lr_v"], lr_k=sec["lr_k"],
        grid=GridSpec(counts=sec["grid_counts"]),
        sigma_bar=sec["sigma_bar"], rho=sec["rho"], gamma=sec["gamma"],
        q=sec["q"], r=sec["r"],
        lyapunov=LyapunovConfig(hidden=sec["v_hidden"], n_v=sec["n_v"],
                                eps=sec["eps"], angle_cap=sec["angle_cap"]),
        seed=cfg.get("run", "seed"),
    )
    policy = LinearTanhPolicy(sec["k0"], params.u_max)
    lyap, policy, hist = train_safe_set(policy, model, dcfg)

    stage = _stage_dir(run_dir, "learn-safe-set")
    lyap_path = os.path.join(stage, "lyapunov.txt")
    pol_path = os.path.join(stage, "policy.txt")
    hist_path = os.path.join(stage, "history.csv")
    save_lyapunov(lyap_path, lyap)
    save_policy(pol_path, policy)
    gains = np.asarray(hist.gains, dtype=float)
    n = len(hist)
    write_csv(hist_path,
              ["iteration", "lyapunov_loss", "policy_loss", "l_s",
               "k1", "k2", "volume", "selected"],
              [np.arange(n), hist.lyapunov_loss, hist.policy_loss, hist.l_s,
               gains[:, 0], gains[:, 1], hist.volume,
               (np.arange(n) == hist.selected).astype(int)])
    return inputs, [lyap_path, pol_path, hist_path]


def cmd_verify(args, cfg, run_dir):
    from .verifier import (EnvironmentTarget, ModelTarget, save_certificate,
                           verify)

    lyap, policy, inputs = _load_safe_set(run_dir)
    if args.target == "env":
        system = EnvironmentTarget(_params(cfg))
    else:
        system = ModelTarget(_resolve_model("model", cfg, run_dir, inputs))
    sec = cfg.section("verify")
    cert = verify(lyap, policy, system,
                  n_samples=sec["n_samples"], delta=sec["delta"],
                  sigma_bar=sec["sigma_bar"], seed=cfg.get("run", "seed"),
                  shared_w=sec["shared_w"], confidence=sec["confidence"])
    out = os.path.join(_stage_dir(run_dir, "verify"), "certificate.txt")
    save_certificate(out, cert)
    print(f"certificate: safe={cert.safe} l_u={cert.l_u} l_l={cert.l_l}")
    return inputs, [out], (0 if cert.safe else EXIT_VERIFICATION_FAILED)


def cmd_explore(args, cfg, run_dir):
    import numpy as np

    from .explorer import (ExplorationConfig, OccupancyGrid, mpc_strategy,
                           run_exploration, semi_random_strategy)
    from .model import KnownModel
    from .serialize import write_csv
    from .verifier import load_certificate

    lyap, policy, inputs = _load_safe_set(run_dir)
    params = _params(cfg)
    cert_path = os.path.join(run_dir, STAGE_DIRS["verify"], "certificate.txt")
    l_u = 1.0
    if os.path.exists(cert_path):
        cert = load_certificate(cert_path)
        if not cert.safe and not args.unsafe_override:
            raise ContractViolation(
                "certificate is not SAFE; pass --unsafe-override to explore anyway")
        l_u = cert.l_u if cert.safe else 1.0
        inputs.append(cert_path)
    elif not args.unsafe_override:
        raise ContractViolation(
            "no certificate found; run `simbl verify` or pass --unsafe-override")

    sec = cfg.section("explore")
    l_star = l_u * float(lyap.l_s.data)
    ecfg = ExplorationConfig(
        alpha=sec["alpha"], beta=sec["beta"], gamma=sec["gamma"],
        l_star=l_star, outer=sec["outer"], min_steps=sec["min_steps"],
        min_lr=sec["min_lr"], max_steps=sec["max_steps"],
        max_lr=sec["max_lr"], sigma_bar=sec["sigma_bar"],
        seed=cfg.get("run", "seed"),
    )
    model_path = os.path.join(run_dir, STAGE_DIRS["train-model"], "model.txt")
    if os.path.exists(model_path):
        model = _resolve_model("model", cfg, run_dir, inputs)
    else:
        model = KnownModel(params)

    trials = sec["trials"] if args.strategy == "semi-random" else 1
    grid = OccupancyGrid(counts=sec["grid_counts"])
    stage = _stage_dir(run_dir, "explore")
    outputs = []
    total_violations = 0
    seeds = np.random.SeedSequence(cfg.get("run", "seed")).generate_state(trials)
    for trial in range(trials):
        if args.strategy == "safe-mpc":
            strategy = mpc_strategy(lyap, model, ecfg, policy)
        else:
            strategy = semi_random_strategy(lyap, float(lyap.l_s.data), policy)
        traj, grid, nviol = run_exploration(
            params, strategy, sec["steps"], lyap, ecfg,
            seed=int(seeds[trial]), grid=grid)
        total_violations += nviol
        path = os.path.join(stage, f"trajectory-{trial:02d}.csv")
        write_csv(path, ["t", "x1", "x2", "u", "V", "violated"],
                  [np.arange(len(traj)), traj.states[:, 0], traj.states[:, 1],
                   traj.inputs, traj.values, traj.violated.astype(int)])
        outputs.append(path)

    occ_path = os.path.join(stage, "occupancy.csv")
    n1, n2 = grid.counts
    write_csv(occ_path, [f"j{j}" for j in range(n2)],
              [grid.cells[:, j] for j in range(n2)])
    outputs.append(occ_path)
    summary = os.path.join(stage, "summary.csv")
    write_csv(summary,
              ["trials", "steps", "violations", "coverage_volume", "l_star"],
              [[trials], [sec["steps"]], [total_violations],
               [grid.volume], [l_star]])
    outputs.append(summary)
    print(f"explore: strategy={args.strategy} trials={trials} "
          f"violations={total_violations} volume={grid.volume:.4f}")
    return inputs, outputs


def cmd_compare_lqr(args, cfg, run_dir):
    import numpy as np

    from .pendulum import lqr_gain
    from .serialize import write_csv

    lyap, policy, inputs = _load_safe_set(run_dir)
    if not hasattr(policy, "gain"):
        raise ContractViolation("compare-lqr needs a linear-tanh policy")
    sec = cfg.section("safe-set")
    k_lqr = lqr_gain(_params(cfg), q=np.diag(sec["q"]), r=sec["r"])
    k = policy.gain
    rel = np.abs((k - k_lqr) / k_lqr)
    out = os.path.join(_stage_dir(run_dir, "compare-lqr"), "comparison.csv")
    write_csv(out, ["k1", "k2", "lqr_k1", "lqr_k2", "rel_diff1", "rel_diff2"],
              [[k[0]], [k[1]], [k_lqr[0]], [k_lqr[1]], [rel[0]], [rel[1]]])
    print(f"gain [{k[0]:+.3f},{k[1]:+.3f}] vs lqr "
          f"[{k_lqr[0]:+.3f},{k_lqr[1]:+.3f}]")
    return inputs, [out]


def cmd_export_grid(args, cfg, run_dir):
    from .figures import emit_figures

    sec = cfg.section("figures")
    written = emit_figures(run_dir, counts=sec["grid_counts"],
                           n_levels=sec["levels"])
    stage = os.path.join(run_dir, STAGE_DIRS["learn-safe-set"])
    inputs = [os.path.join(stage, "lyapunov.txt"),
              os.path.join(stage, "policy.txt")]
    return inputs, written


COMMANDS = {
    "collect": cmd_collect,
    "train-model": cmd_train_model,
    "learn-safe-set": cmd_learn_safe_set,
    "verify": cmd_verify,
    "explore": cmd_explore,
    "compare-lqr": cmd_compare_lqr,
    "export-grid": cmd_export_grid,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    t0 = time.time()
    try:
        cfg, run_dir = _load_run(args)
        result = COMMANDS[args.command](args, cfg, run_dir)
        inputs, outputs = result[0], result[1]
        code = result[2] if len(result) > 2 else 0
        _write_manifest(run_dir, args.command, inputs, outputs, t0, cfg)
    except ContractViolation as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericFault as err:
        print(f"numeric fault: {err}", file=sys.stderr)
        return 2
    except SimblError as err:
        # remaining domain errors are verification-path failures
        print(f"verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFICATION_FAILED
    return code


if __name__ == "__main__":
    sys.exit(main())
