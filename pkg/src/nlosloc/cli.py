"""Command-line harness.

Subcommands: simulate, sweep, relay, validate-gossip, replicate.
Exit codes: 0 on success, 2 on configuration errors; estimator failures on
individual trials are recorded in the output rather than aborting.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import baseline, em_centralized, em_distributed, harness, relay_sim
from .errors import ConfigError, NlosLocError
from .model import load_scenario, substream, synthesize_measurements


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlosloc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="one scenario, one measurement draw, all estimators")
    sim.add_argument("--config", required=True, help="scenario JSON")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--estimators", nargs="+", default=list(harness.ESTIMATORS))

    sw = sub.add_parser("sweep", help="Monte-Carlo RMSE sweep over a noise parameter")
    sw.add_argument("--config", required=True, help="sweep JSON")
    sw.add_argument("--seed", type=int, default=None, help="override the config seed")
    sw.add_argument("--out", required=True, help="aggregate CSV path")
    sw.add_argument("--dump-trials", default=None, help="optional per-trial CSV path")
    sw.add_argument("--trials", type=int, default=None, help="override the config trial count")
    sw.add_argument("--parallel", type=int, default=1)

    rl = sub.add_parser("relay", help="TDOA relaying simulation with random clock offsets")
    rl.add_argument("--config", default=None, help="relay JSON (defaults to the Table-II plan)")
    rl.add_argument("--trials", type=int, default=100)
    rl.add_argument("--seed", type=int, default=0)
    rl.add_argument("--out", default=None, help="CSV of per-trial recovered TDOA")

    vg = sub.add_parser("validate-gossip", help="check mixing-weight assumptions")
    vg.add_argument("--topology", choices=["complete", "ring", "star"], default="complete")
    vg.add_argument("--nodes", type=int, default=4, help="number of gossiping nodes")
    vg.add_argument("--scheme", choices=["pairwise", "identity"], default="pairwise")
    vg.add_argument("--samples", type=int, default=10000)
    vg.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("replicate", help="synthetic 4-node measurement-campaign replica")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--trials", type=int, default=10, help="trials per target location")
    rp.add_argument("--out", required=True, help="output CSV path")
    return p


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.config)
    seed = scenario.seed if args.seed is None else args.seed
    meas = synthesize_measurements(scenario, seed=seed)
    problem = scenario.problem(meas)
    print(f"scenario: {scenario.n_nodes} nodes, target ({scenario.target[0]:.2f}, "
          f"{scenario.target[1]:.2f}), seed {seed}")
    for est in args.estimators:
        if est == "centralized":
            res = em_centralized.multi_start(problem, n_starts=4, seed=seed)
            q, conv, iters = res.x_hat.q, res.converged, res.iterations
        elif est == "distributed":
            res = em_distributed.run_distributed(problem, seed=seed)
            q, conv, iters = res.consensus_q, res.converged, res.iterations
        elif est == "tdoa_only":
            res = baseline.solve_tdoa_only(problem)
            q, conv, iters = res.q, True, 1
        else:
            raise ConfigError(f"unknown estimator {est!r}")
        err = float(np.linalg.norm(q - scenario.target))
        print(f"{est:12s} q=({q[0]:9.3f}, {q[1]:9.3f})  error={err:9.4f} m  "
              f"converged={conv}  iterations={iters}")
    return 0


def cmd_sweep(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep config: {exc}") from exc
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.trials is not None:
        cfg["trials"] = args.trials
    spec, scenario = harness.sweep_spec_from_dict(cfg)
    rows, records = harness.run_sweep(spec, scenario, parallel=args.parallel)
    harness.write_sweep_csv(rows, args.out)
    if args.dump_trials:
        harness.write_trials_csv(records, args.dump_trials)
    for row in rows:
        print(f"{row['param']}={row['value']:.4f} {row['estimator']:12s} "
              f"rmse={row['rmse_m']:9.3f} m  conv={row['convergence_rate']:.2f}")
    print(f"wrote {args.out}")
    return 0


def _relay_config_from_json(path) -> relay_sim.RelayConfig:
    try:
        cfg = json.loads(Path(path).read_text())
        return relay_sim.RelayConfig(
            sample_period=float(cfg.get("sample_period_ns", 100.0)) * 1e-9,
            oversample=int(cfg.get("oversample", 10)),
            node_start_offsets=tuple(float(v) * 1e-9 for v in cfg["t0_ns"]),
            retransmission_delays=tuple(float(v) * 1e-3 for v in cfg["t_delay_ms"]),
            tau1=tuple(float(v) / relay_sim.SPEED_OF_LIGHT for v in cfg["tau1_m"]),
            tau2=tuple(float(v) / relay_sim.SPEED_OF_LIGHT for v in cfg["tau2_m"]),
            packet_length=float(cfg.get("packet_ms", 10.0)) * 1e-3,
            noise_snr_db=cfg.get("noise_snr_db"),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad relay config: {exc}") from exc


def cmd_relay(args) -> int:
    base = _relay_config_from_json(args.config) if args.config else relay_sim.table2_config()
    source = relay_sim.generate_source(
        base.packet_length + 4e-4 + max(base.tau1) + max(base.node_start_offsets),
        base.sample_period, seed=args.seed, oversample=base.oversample,
    )
    truth = np.array([
        (base.tau1[i] - base.tau1[0]) * relay_sim.SPEED_OF_LIGHT
        for i in range(1, base.n_nodes)
    ])
    rng = substream(args.seed, 0, 9)
    rows = []
    for trial in range(args.trials):
        offsets = tuple(rng.uniform(0.0, 100e-9, base.n_nodes))
        cfg = relay_sim.RelayConfig(
            sample_period=base.sample_period, oversample=base.oversample,
            node_start_offsets=offsets,
            retransmission_delays=base.retransmission_delays,
            tau1=base.tau1, tau2=base.tau2,
            receiver_start=base.receiver_start, packet_length=base.packet_length,
            noise_snr_db=base.noise_snr_db, noise_seed=trial,
        )
        received = relay_sim.simulate_relay_chain(cfg, source)
        rec = relay_sim.recover_tdoa(received, cfg.tau2, oversample=base.oversample)
        for i, (t, r) in enumerate(zip(truth, rec)):
            rows.append((trial, i + 2, t, r, r - t))
    rows_np = np.array([(r[2], r[3], r[4]) for r in rows])
    spread = 0.0
    for i in range(base.n_nodes - 1):
        vals = rows_np[i::base.n_nodes - 1, 1]
        spread = max(spread, vals.max() - vals.min())
    print(f"trials={args.trials}: max |error|={np.abs(rows_np[:, 2]).max():.3f} m, "
          f"max per-node spread={spread:.3f} m")
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            f.write(harness.CSV_SCHEMA + "\n")
            w = csv.writer(f)
            w.writerow(["trial", "node", "true_tdoa_m", "recovered_tdoa_m", "error_m"])
            for trial, node, t, r, e in rows:
                w.writerow([trial, node, f"{t:.6f}", f"{r:.6f}", f"{e:.6f}"])
        print(f"wrote {args.out}")
    return 0


def cmd_validate_gossip(args) -> int:
    ids = tuple(range(2, 2 + args.nodes))
    topo = {
        "complete": em_distributed.Topology.complete,
        "ring": em_distributed.Topology.ring,
        "star": em_distributed.Topology.star,
    }[args.topology](ids)
    report = em_distributed.validate_weight_assumptions(
        topo, scheme=args.scheme, n_samples=args.samples, seed=args.seed
    )
    print(f"topology={args.topology} nodes={args.nodes} scheme={report.scheme}")
    print(f"row_stochastic_exact={report.row_ok}")
    print(f"col_sums_expected_ok={report.col_expect_ok} (max deviation {report.col_max_dev:.2e})")
    print(f"rho={report.rho:.6f} rho_ok={report.rho_ok}")
    return 0


def cmd_replicate(args) -> int:
    rows = harness.replicate_experiment_synthetic(seed=args.seed,
                                                  trials_per_location=args.trials)
    harness.write_replica_csv(rows, args.out)
    for mode in ("band", "list"):
        for est in ("centralized", "distributed"):
            sub = [r for r in rows if r["mode"] == mode and r["estimator"] == est]
            conv = [r for r in sub if r["converged"]]
            if conv:
                below = sum(r["error_m"] < 15.0 for r in conv) / len(conv)
                print(f"{mode:5s} {est:12s} converged={len(conv)}/{len(sub)} "
                      f"P(err<15m | converged)={below:.2%}")
            else:
                print(f"{mode:5s} {est:12s} no converged trials")
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "relay":
            return cmd_relay(args)
        if args.command == "validate-gossip":
            return cmd_validate_gossip(args)
        if args.command == "replicate":
            return cmd_replicate(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NlosLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
