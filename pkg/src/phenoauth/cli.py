"""Command-line scenario runner: ``phenoauth {enroll,auth,attack,bench}``.

Exit status is 0 when every in-run check passes, 1 when a check fails and 2
for configuration or usage errors.  Reports are written before exiting in
every case.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adversary, authenticator, plots
from .config import ScenarioConfig, load
from .errors import BadConfig, InsufficientData, PhenoAuthError
from .metrics import SESSION_COST, timing_report, write_json, write_rows_csv, write_timing_csv
from .protocol import Node, enroll_group, load_nvm, reference_images, save_nvm
from .puf_sim import DpufDevice, random_challenge
from .phenotype import generate_dataset
from .transport import FrameServer, SocketChannel, run_session, run_socket_session


def _labels(cfg: ScenarioConfig) -> list[str]:
    return [f"dev{i}" for i in range(cfg.devices)]


def _nodes(cfg: ScenarioConfig, session_stream: int = 0) -> list[Node]:
    params = cfg.protocol_params()
    refs = reference_images(cfg.puf, [cfg.seed_for(2, j) for j in range(cfg.reference_devices)],
                            cfg.reference_challenges, cfg.rng(4))
    return [Node(DpufDevice(cfg.seed_for(1, i), cfg.puf), label, params,
                 cfg.rng(3, i, session_stream), self_id=None, reference_images=refs)
            for i, label in enumerate(_labels(cfg))]


def _nvm_dir(cfg: ScenarioConfig) -> Path:
    return Path(cfg.out) / "nvm"


def build_group(cfg: ScenarioConfig) -> list[Node]:
    if cfg.devices < 2:
        raise InsufficientData("enrollment needs at least two devices")
    nodes = _nodes(cfg)
    enroll_group(nodes)
    return nodes


def load_group(cfg: ScenarioConfig, session_stream: int = 1) -> list[Node]:
    """Devices rebuilt from the seed, NVM restored from the last enrollment or run."""
    d = _nvm_dir(cfg)
    nodes = _nodes(cfg, session_stream)
    for node in nodes:
        node.nvm = load_nvm(d / f"{node.label}.json")
    return nodes


def _save_group(cfg: ScenarioConfig, nodes: list[Node]) -> None:
    d = _nvm_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    for node in nodes:
        save_nvm(node.nvm, d / f"{node.label}.json")


def _emit(args, report: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True, default=str))
    else:
        print("\n".join(lines))


def cmd_enroll(cfg: ScenarioConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    nodes = build_group(cfg)
    _save_group(cfg, nodes)

    grid = cfg.puf.env_grid()
    dev0 = nodes[0].device
    rel = dev0.min_reliability(np.arange(cfg.puf.cell_count), grid)
    plots.reliability_histogram(rel, cfg.t_stable, out / "reliability.png")

    node = nodes[0]
    model, t_hat = node.nvm.model, float(node.nvm.threshold)
    fresh = generate_dataset({n.label: n.device for n in nodes},
                             [random_challenge(cfg.puf, cfg.rng(6)) for _ in range(4)], grid, 1, cfg.rng(7))
    genuine = [s for it in fresh for lab, s in [authenticator.classify(model, it.image)] if lab == it.label]
    impostor = [authenticator.classify(model, img)[1] for img in node.reference_images]
    plots.confidence_distributions(genuine, impostor, t_hat, out / "confidence.png")

    report = {
        "command": "enroll",
        "seed": cfg.seed,
        "devices": [{
            "label": n.label,
            "peers": sorted(n.nvm.peers),
            "model_labels": list(n.nvm.model.labels),
            "threshold": float(n.nvm.threshold),
            "stable_cells": int(len(n.nvm.stable_map)),
            "stable_fraction": len(n.nvm.stable_map) / cfg.puf.cell_count,
            "holdout_accuracy": n.training.report.holdout_accuracy,
            "holdout_accept_rate": n.training.report.holdout_accept_rate,
        } for n in nodes],
        "ground_truth_fraction_above_0.99": float(np.mean(rel > 0.99)),
    }
    ok = all(len(d["peers"]) == cfg.devices - 1 and len(d["model_labels"]) == cfg.devices
             for d in report["devices"])
    report["passed"] = ok
    write_json(report, out / "enroll.json")
    _emit(args, report, [f"enrolled {cfg.devices} devices into {_nvm_dir(cfg)}"] + [
        f"  {d['label']}: peers={d['peers']} t={d['threshold']:.4f} stable={d['stable_cells']}"
        for d in report["devices"]])
    return 0 if ok else 1


def _session_rows(cfg: ScenarioConfig, nodes: list[Node], initiator: str, peer: str,
                  sessions: int, swap: bool):
    by_label = {n.label: n for n in nodes}
    rows, counters = [], []
    server = channel = None
    for i in range(sessions):
        p_lab, v_lab = (peer, initiator) if swap and i % 2 else (initiator, peer)
        prover, verifier = by_label[p_lab], by_label[v_lab]
        if cfg.transport == "socket":
            if server is None or server.verifier is not verifier:
                if server:
                    channel.close()
                    server.close()
                server = FrameServer(verifier).__enter__()
                channel = SocketChannel(server.address)
            before = len(server.outcomes)
            p_out = run_socket_session(prover, channel, v_lab)
            v_out = server.outcomes[before] if len(server.outcomes) > before else None
        else:
            rep = run_session(prover, verifier, v_lab)
            p_out, v_out = rep.prover, rep.verifier
        pr, vr = prover.nvm.peers[v_lab], verifier.nvm.peers[p_lab]
        success = p_out.ok and v_out is not None and v_out.ok
        rows.append({
            "session": i,
            "prover": p_lab,
            "verifier": v_lab,
            "prover_status": p_out.status.value,
            "prover_reason": p_out.reason.value if p_out.reason else "",
            "verifier_status": v_out.status.value if v_out else "",
            "verifier_reason": v_out.reason.value if v_out and v_out.reason else "",
            "keys_agree": success and p_out.mk == v_out.mk,
            "state_agree": success and pr.delta == vr.delta and pr.challenge == vr.challenge,
            "prover_counts_ok": p_out.ops.counts == SESSION_COST,
            "verifier_counts_ok": bool(v_out) and v_out.ops.counts == SESSION_COST,
        })
        counters += [p_out.ops] + ([v_out.ops] if v_out else [])
    if server:
        channel.close()
        server.close()
    return rows, counters


def cmd_auth(cfg: ScenarioConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (_nvm_dir(cfg) / "dev0.json").exists():
        _save_group(cfg, build_group(cfg))
    nodes = load_group(cfg, session_stream=args.stream)
    labels = {n.label for n in nodes}
    if args.initiator not in labels or args.peer not in labels or args.initiator == args.peer:
        raise BadConfig(f"initiator and peer must be two of {sorted(labels)}")
    sessions = args.sessions if args.sessions is not None else cfg.sessions
    rows, _ = _session_rows(cfg, nodes, args.initiator, args.peer, sessions, args.swap)
    _save_group(cfg, nodes)
    successes = [r for r in rows if r["prover_status"] == "Success" and r["verifier_status"] == "Success"]
    rate = len(successes) / len(rows) if rows else 0.0
    counts_ok = all(r["prover_counts_ok"] and r["verifier_counts_ok"] for r in successes)
    agree = all(r["keys_agree"] and r["state_agree"] for r in successes)
    ok = rate >= 0.99 and counts_ok and agree
    report = {"command": "auth", "seed": cfg.seed, "transport": cfg.transport, "sessions": len(rows),
              "successes": len(successes), "success_rate": rate, "cost_counts_ok": counts_ok,
              "agreement_ok": agree, "swap": args.swap, "passed": ok}
    write_rows_csv(rows, out / "sessions.csv")
    write_json(report, out / "auth.json")
    _emit(args, report, [f"{len(successes)}/{len(rows)} sessions succeeded over {cfg.transport}; "
                         f"op counts {'ok' if counts_ok else 'MISMATCH'}; "
                         f"{'PASS' if ok else 'FAIL'}"])
    return 0 if ok else 1


MU_SUITES = ("replay", "bit-tamper", "nvm-clone", "random-forge", "whitebox")
IND_SUITES = ("byte-frequency", "repeated-field", "cross-session-id", "keyed-control")


def cmd_attack(cfg: ScenarioConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    nodes = build_group(cfg)
    ctx = adversary.OracleContext({n.label: n for n in nodes})
    p, v = nodes[0].label, nodes[1].label
    suite = args.suite
    mu = MU_SUITES if suite == "all" else tuple(s for s in MU_SUITES if s == suite)
    ind = IND_SUITES if suite in ("all", "ind") else tuple(s for s in IND_SUITES if s == suite)
    results, verdicts = [], []
    for k, name in enumerate(mu):
        res = adversary.run_mu_game(ctx, adversary.STRATEGIES[name](), cfg.mu_trials, p, v,
                                    seed=cfg.seed_for(8, k))
        passed = res.wins >= 0.99 * res.trials if name == "whitebox" else res.clean_wins == 0
        results.append(res)
        verdicts.append(passed)
    for k, name in enumerate(ind):
        res = adversary.run_ind_game(ctx, adversary.DISTINGUISHERS[name](), cfg.ind_trials, p, v,
                                     seed=cfg.seed_for(9, k))
        rate = res.win_rate
        passed = rate > 0.99 if name == "keyed-control" else abs(rate - 0.5) <= 0.05
        results.append(res)
        verdicts.append(passed)
    ok = all(verdicts)
    report = {"command": "attack", "suite": suite, "seed": cfg.seed, "passed": ok,
              "games": [dict(json.loads(r.to_json()), passed=v) for r, v in zip(results, verdicts)]}
    write_json(report, out / "attack.json")
    _emit(args, report, [f"{r.game:3s} {r.strategy:16s} wins {r.wins}/{r.trials} "
                         f"(clean {r.clean_wins}/{r.clean_trials}) {'ok' if v else 'FAIL'}"
                         for r, v in zip(results, verdicts)])
    return 0 if ok else 1


def cmd_bench(cfg: ScenarioConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    nodes = build_group(cfg)
    rows, counters = _session_rows(cfg, nodes, nodes[0].label, nodes[1].label, cfg.sessions, False)
    timing = timing_report(counters)
    write_timing_csv(timing, out / "bench.csv")
    plots.timing_bars(timing, out / "timing.png")
    ok = all(r["prover_counts_ok"] and r["verifier_counts_ok"] for r in rows) and \
        all(t.total_s > 0 for t in timing)
    report = {"command": "bench", "seed": cfg.seed, "sessions": len(rows), "passed": ok,
              "note": "wall times measured on this machine for the simulator",
              "primitives": [{"primitive": t.primitive, "count": t.count, "mean_s": t.mean_s,
                              "total_s": t.total_s} for t in timing]}
    write_json(report, out / "bench.json")
    _emit(args, report, [f"{t.primitive:9s} count={t.count:6d} mean={t.mean_s * 1e3:.4f} ms"
                         for t in timing])
    return 0 if ok else 1


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario TOML file")
    common.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--transport", choices=("memory", "socket"))
    common.add_argument("--json", action="store_true", help="print the report as JSON")

    ap = argparse.ArgumentParser(prog="phenoauth", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("enroll", parents=[common], help="enroll a device group")
    auth = sub.add_parser("auth", parents=[common], help="run authentication sessions")
    auth.add_argument("--initiator", default="dev0")
    auth.add_argument("--peer", default="dev1")
    auth.add_argument("--sessions", type=int)
    auth.add_argument("--swap", action="store_true", help="alternate the initiator role")
    auth.add_argument("--stream", type=int, default=1, help="read-noise stream index for this run")
    attack = sub.add_parser("attack", parents=[common], help="run security games")
    attack.add_argument("--suite", default="all", choices=("all", "ind") + MU_SUITES + IND_SUITES)
    sub.add_parser("bench", parents=[common], help="operation counts and timings")
    return ap


COMMANDS = {"enroll": cmd_enroll, "auth": cmd_auth, "attack": cmd_attack, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load(args.config, seed=args.seed, out=args.out, transport=args.transport)
        return COMMANDS[args.command](cfg, args)
    except (BadConfig, InsufficientData, FileNotFoundError) as exc:
        print(f"phenoauth: error: {exc}", file=sys.stderr)
        return 2
    except PhenoAuthError as exc:
        print(f"phenoauth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
