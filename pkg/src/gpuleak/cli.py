"""Experiment driver.

Each subcommand reads an INI config (see ``gpuleak.config``), runs one
experiment in a fresh simulator and writes JSON/CSV/PGM files to the output
directory. Outputs depend only on the config and seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .covert import AlignmentFailed, bits_to_bytes, bytes_to_bits, latencies_csv, run_channel
from .probe import (
    CalibrationFailed,
    IncompleteSet,
    LatencyThresholds,
    calibrate_latencies,
    discover_eviction_set,
    dump_eviction_sets,
    enumerate_unique_sets,
    measure_associativity,
)
from .scenario import build_world
from .sidechan import (
    EmptyCalibration,
    FingerprintModel,
    TrainingDataInsufficient,
    build_calibration_table,
    classify,
    estimate_hidden_neurons,
    record_workload,
    train_fingerprint,
)
from .simcore import CLASS_NAMES, SimError, TraceLog
from .workloads import WorkloadError, WorkloadSpec

SCHEMA_VERSION = 1

EXIT_CONFIG = 1
EXIT_CALIBRATION = 2
EXIT_INCOMPLETE_SET = 3
EXIT_ALIGNMENT = 4
EXIT_TRAINING = 5
EXIT_EMPTY_CALIBRATION = 6


def _header(cfg: ExperimentConfig, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg.seed}


def _write(out_dir: str, name: str, data) -> str:
    path = os.path.join(out_dir, name)
    if isinstance(data, (dict, list)):
        data = json.dumps(data, indent=1, sort_keys=True) + "\n"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
        fh.write(data)
    return path


def _csv(rows, header) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def _world(cfg: ExperimentConfig):
    return build_world(cfg.layout(), cfg.topology(), cfg.latency(), noise_seed=cfg.seed)


def _run_seed(cfg: ExperimentConfig, *parts: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(1)[0] & 0x7FFFFFFF)


# --- subcommands ----------------------------------------------------------

def cmd_calibrate(cfg: ExperimentConfig, out_dir: str, args) -> str:
    world = _world(cfg)
    world.sim.trace = TraceLog()
    thr = calibrate_latencies(world.spy, world.spy_local, world.spy_remote, cfg["probe"]["samples"], cfg.probe())
    trace, world.sim.trace = world.sim.trace, None
    pairs = np.stack([trace.column("cycles"), trace.column("true_class")], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    rows = [(int(c), int(n), CLASS_NAMES[int(k)]) for (c, k), n in zip(uniq, counts)]
    _write(out_dir, "latency_histogram.csv", _csv(rows, ["cycles", "count", "true_class"]))
    agree = float(np.mean(thr.classify(trace.column("cycles")) == trace.column("true_class")))
    _write(out_dir, "thresholds.json", {**_header(cfg, "calibrate"), **thr.to_dict(), "oracle_agreement": agree})
    return f"thresholds {', '.join(f'{b:.1f}' for b in thr.boundaries)}"


def cmd_discover(cfg: ExperimentConfig, out_dir: str, args) -> str:
    world = _world(cfg)
    pcfg = cfg.probe()
    if args.thresholds:
        with open(args.thresholds) as fh:
            thr = LatencyThresholds.from_dict(json.load(fh))
    else:
        thr = calibrate_latencies(world.spy, world.spy_local, world.spy_remote, cfg["probe"]["samples"], pcfg)
    p = cfg["probe"]
    if p["count"] <= 1:
        sets = [discover_eviction_set(world.spy, world.spy_remote, p["target_offset"], thr, pcfg)]
    else:
        sets = enumerate_unique_sets(world.spy, world.spy_remote, p["count"], thr, pcfg)
        if not sets:
            raise IncompleteSet(0)
    report = measure_associativity(world.spy, sets[0], thr, p["trials"], pcfg.votes)
    _write(out_dir, "eviction_sets.json", dump_eviction_sets(sets) + "\n")
    _write(out_dir, "eviction_curve.csv", _csv([(k, f"{c:.2f}") for k, c in report.curve], ["k", "mean_cycles"]))
    _write(out_dir, "policy.json", {**_header(cfg, "discover"), **report.to_dict(), "sets_found": len(sets)})
    return f"{len(sets)} eviction set(s), ways {report.inferred_ways}, {report.policy_label}"


def cmd_covert(cfg: ExperimentConfig, out_dir: str, args) -> str:
    c = cfg["covert"]
    noise = cfg.noise_profile()
    common = dict(noise=noise, seed=cfg.seed, layout=cfg.layout(), topology=cfg.topology(),
                  slot_cycles=c["slot_cycles"], prime_reps=c["prime_reps"], latency=cfg.base_latency(),
                  setup_pairs=max(cfg.pairs()), align_cfg=cfg.alignment())
    rng = np.random.default_rng([cfg.seed, 7])
    payload = rng.integers(0, 256, size=-(-c["random_bits"] // 8), dtype=np.uint8).tobytes()
    runs = []
    for p in cfg.pairs():
        stats, _ = run_channel(payload, p, **common)
        runs.append(stats.to_dict())
    msg = c["message"].encode()
    first = cfg.pairs()[0]
    stats, rx = run_channel(msg, first, **common)
    _write(out_dir, "covert_sweep.csv", _csv(
        [(r["pairs"], f"{r['throughput_bits_per_kilocycle']:.6f}", f"{r['error_rate']:.6f}") for r in runs],
        ["pairs", "throughput_bits_per_kilocycle", "error_rate"]))
    _write(out_dir, "covert_slots.csv", latencies_csv(rx, bytes_to_bits(msg)))
    decoded = bits_to_bytes(rx.bits()).decode("latin-1")
    _write(out_dir, "covert.json", {**_header(cfg, "covert"), "sweep": runs,
                                    "message": {**stats.to_dict(), "sent": c["message"], "received": decoded}})
    return f"message {'ok' if decoded == c['message'] else 'corrupted'}; " + ", ".join(
        f"{r['pairs']}p err {r['error_rate']:.4f}" for r in runs)


def _record(cfg: ExperimentConfig, spec: WorkloadSpec, noise_seed: int, monitor=None):
    return record_workload(spec, noise_seed, monitor or cfg.monitor(), cfg.layout(), cfg.topology(),
                           cfg.latency(), setup_latency=cfg.base_latency())


def cmd_memorygram(cfg: ExperimentConfig, out_dir: str, args) -> str:
    mg = _record(cfg, cfg.workload(), cfg.seed)
    _write(out_dir, "memorygram.csv", mg.to_csv())
    _write(out_dir, "memorygram.pgm", mg.to_pgm())
    _write(out_dir, "memorygram.json", {**_header(cfg, "memorygram"), "kind": cfg.workload().kind,
                                        "sets": len(mg.set_ids), "epochs": mg.num_epochs,
                                        "total_misses": int(mg.matrix.sum()),
                                        "misses_after_warmup": int(mg.matrix[:, 1:].sum())})
    return f"{len(mg.set_ids)}x{mg.num_epochs} memorygram, {int(mg.matrix[:, 1:].sum())} misses after warm-up"


def _labeled(cfg: ExperimentConfig, split: int, per_label: int, noise: float | None = None):
    mon = cfg.monitor(noise)
    out = []
    for li, label in enumerate(cfg.labels()):
        for i in range(per_label):
            s = _run_seed(cfg, split, li, i)
            out.append((label, _record(cfg, WorkloadSpec(label, seed=s), s, mon)))
    return out


def _train(cfg: ExperimentConfig) -> FingerprintModel:
    n = cfg["sidechan"]["train_per_label"]
    if n < 5:
        raise TrainingDataInsufficient(f"train_per_label = {n}; need at least 5")
    return train_fingerprint(_labeled(cfg, 0, n, 0.0))


def cmd_fingerprint(cfg: ExperimentConfig, out_dir: str, args) -> str:
    model_path = args.model or os.path.join(out_dir, "fingerprint_model.json")
    if args.mode == "train":
        model = _train(cfg)
        _write(os.path.dirname(model_path) or ".", os.path.basename(model_path),
               {**_header(cfg, "fingerprint-train"), **model.to_dict()})
        return f"model with {len(model.labels)} labels"
    if os.path.exists(model_path):
        with open(model_path) as fh:
            model = FingerprintModel.from_dict(json.load(fh))
    else:
        model = _train(cfg)
    tests = _labeled(cfg, 1, cfg["sidechan"]["test_per_label"])
    labels = model.labels
    idx = {lb: i for i, lb in enumerate(labels)}
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for true, mg in tests:
        pred, _ = classify(model, mg)
        if true in idx:
            conf[idx[true], idx[pred]] += 1
    per_class = {lb: (float(conf[i, i] / conf[i].sum()) if conf[i].sum() else None) for i, lb in enumerate(labels)}
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    _write(out_dir, "confusion.csv", _csv([[lb, *conf[i].tolist()] for i, lb in enumerate(labels)],
                                          ["true\\predicted", *labels]))
    _write(out_dir, "fingerprint_report.json", {
        **_header(cfg, "fingerprint-eval"), "accuracy": acc, "per_class_accuracy": per_class,
        "labels": labels, "test_samples": int(conf.sum()),
        "noise_intensity": cfg["sidechan"]["noise_intensity"]})
    return f"accuracy {acc:.4f} over {int(conf.sum())} memorygrams"


def cmd_mlp_extract(cfg: ExperimentConfig, out_dir: str, args) -> str:
    m = cfg["mlp"]
    sizes = cfg.mlp_sizes()
    if not sizes or m["calibration_runs"] < 1:
        raise EmptyCalibration("no MLP sizes or calibration runs configured")
    mon = cfg.mlp_monitor()
    totals: dict[int, list[float]] = {}
    rows = []
    for n in sizes:
        for r in range(m["calibration_runs"]):
            s = _run_seed(cfg, 2, n, r)
            mg = _record(cfg, WorkloadSpec("mlp", {"neurons": n, "epochs": m["epochs"]}, s), s, mon)
            totals.setdefault(n, []).append(float(mg.matrix.sum()))
            rows.append((n, r, int(mg.matrix.sum())))
    table = build_calibration_table(totals)
    results = []
    for n in sizes:
        for r in range(m["test_runs"]):
            s = _run_seed(cfg, 3, n, r)
            mg = _record(cfg, WorkloadSpec("mlp", {"neurons": n, "epochs": m["epochs"]}, s), s, mon)
            est = estimate_hidden_neurons(mg, table)
            results.append({"true_neurons": n, "estimated": est.estimated_class,
                            "observed_total_misses": est.observed_total_misses})
    acc = float(np.mean([r["estimated"] == r["true_neurons"] for r in results])) if results else 0.0
    _write(out_dir, "mlp_totals.csv", _csv(rows, ["neurons", "run", "total_misses"]))
    _write(out_dir, "mlp_calibration.json", {**_header(cfg, "mlp-extract"),
                                             "calibration_table": {str(k): v for k, v in table.items()}})
    _write(out_dir, "neuron_estimate.json", {**_header(cfg, "mlp-extract"), "accuracy": acc, "runs": results,
                                             "calibration_table": {str(k): v for k, v in table.items()}})
    return f"size accuracy {acc:.3f} over {len(results)} held-out runs"


COMMANDS = {
    "calibrate": cmd_calibrate,
    "discover": cmd_discover,
    "covert": cmd_covert,
    "memorygram": cmd_memorygram,
    "fingerprint": cmd_fingerprint,
    "mlp-extract": cmd_mlp_extract,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override sim.seed")
    common.add_argument("--out-dir", default="out", help="directory for output files (default: out)")
    common.add_argument("--pairs", type=int, help="covert: run a single pair count")
    common.add_argument("--noise", type=float, help="latency sigma scale; 0 also disables contention noise")
    parser = argparse.ArgumentParser(prog="gpuleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="cluster access latencies into four classes")
    d = sub.add_parser("discover", parents=[common], help="find eviction sets and infer the replacement policy")
    d.add_argument("--thresholds", help="thresholds JSON from 'calibrate' (skips calibration)")
    sub.add_parser("covert", parents=[common], help="run the covert channel over a sweep of pair counts")
    sub.add_parser("memorygram", parents=[common], help="record a memorygram of one victim workload")
    f = sub.add_parser("fingerprint", parents=[common], help="train or evaluate the workload classifier")
    f.add_argument("mode", choices=("train", "eval"))
    f.add_argument("--model", help="model JSON path (default: <out-dir>/fingerprint_model.json)")
    sub.add_parser("mlp-extract", parents=[common], help="estimate an MLP's hidden-layer width")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        cfg.apply_flags(args.seed, args.pairs, args.noise)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        summary = COMMANDS[args.command](cfg, args.out_dir, args)
    except CalibrationFailed as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except IncompleteSet as exc:
        print(f"eviction set incomplete: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE_SET
    except AlignmentFailed as exc:
        print(f"alignment failed: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except EmptyCalibration as exc:
        print(f"empty calibration: {exc}", file=sys.stderr)
        return EXIT_EMPTY_CALIBRATION
    except TrainingDataInsufficient as exc:
        print(f"training data insufficient: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, WorkloadError, SimError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"[seed {cfg.seed}] {args.command}: {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
