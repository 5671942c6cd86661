"""Experiment harness and command-line entry point.

Subcommands and their CSV columns:

  occupancy    mnk, insertions, occupancy
  fpr          f, collision_entry_ratio, multi_collision_ratio, theoretical_eps
  brute-force  trial, fills
  reverse      b, mnk, l, trial, eviction_set_size, fills_issued, rounds, success
               (with --exact: b, mnk, p_max, minimal_size)
  primeprobe   monitor, iteration, true_bit, inferred_bit, square_miss,
               multiply_miss, square_prefetched
  synthetic    workload, captures_per_million_accesses, prefetches_issued

Every run prints a summary table. The same seed and config always give the
same CSV bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import random
import sys
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import yaml

from .attacks import (
    AttackScenario,
    brute_force_trials,
    exhaustive_tree_analysis,
    prefill,
    run_prime_probe,
    run_reverse_attack,
)
from .cachesim import CacheGeometry, LevelGeometry
from .filter import AutoCuckooFilter, FilterConfig, theoretical_fpr
from .monitor import MonitorConfig, PiPoMonitor, write_events_csv
from .system import Simulator, read_trace

EXPERIMENTS = ("occupancy", "fpr", "brute-force", "reverse", "primeprobe", "synthetic")
CONFIG_SECTIONS = ("filter", "monitor", "geometry", "attack")

# query addresses live in the upper half of the address space, fills in the lower
_QUERY_BIT = 1 << 47


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


@dataclass
class CsvReport:
    columns: Sequence[str]
    rows: List[Sequence] = dataclasses.field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([fmt(v) for v in r])
        return buf.getvalue()

    def column(self, name: str) -> list:
        i = list(self.columns).index(name)
        return [r[i] for r in self.rows]


def distinct_addresses(n: int, seed: int, high: bool = False) -> List[int]:
    """``n`` distinct line addresses below 2^47 (or in the upper half if ``high``)."""
    lines = random.Random(seed).sample(range(1 << 41), n)
    base = _QUERY_BIT if high else 0
    return [base | (x << 6) for x in lines]


# ---------------------------------------------------------------------------
# Filter behaviour
# ---------------------------------------------------------------------------

def run_occupancy(l: int, b: int, mnk_list: Sequence[int], insertions: int, seed: int = 0,
                  step: int = 500, f: int = 12) -> CsvReport:
    """Occupancy curves: one series per mnk over the same address stream."""
    addrs = distinct_addresses(insertions, seed)
    report = CsvReport(("mnk", "insertions", "occupancy"))
    for mnk in mnk_list:
        flt = AutoCuckooFilter(FilterConfig(l=l, b=b, f=f, mnk=mnk, rng_seed=seed))
        for i, a in enumerate(addrs, 1):
            flt.query_and_update(a)
            if i % step == 0 or i == insertions:
                report.add(mnk, i, flt.occupancy())
    return report


def first_full(config: FilterConfig, seed: int, limit: int) -> Optional[int]:
    """Insertion count at which occupancy first reaches 1.0, or None within ``limit``."""
    flt = AutoCuckooFilter(dataclasses.replace(config, rng_seed=seed))
    for i, a in enumerate(distinct_addresses(limit, seed), 1):
        flt.query_and_update(a)
        if flt.valid_count == config.entries:
            return i
    return None


def measured_fpr(config: FilterConfig, queries: int, seed: int = 0) -> float:
    """Positive rate of a full filter on never-inserted addresses."""
    rng = random.Random(seed)
    flt = AutoCuckooFilter(config)
    prefill(flt, rng)
    hits = flt.contains_many(distinct_addresses(queries, seed + 1, high=True))
    return float(hits.mean())


def collision_ratios(config: FilterConfig, insertions: int, seed: int = 0):
    """Fraction of valid entries standing for >=2 and >2 distinct inserted addresses."""
    flt = AutoCuckooFilter(config, track_sources=True)
    for a in distinct_addresses(insertions, seed):
        flt.query_and_update(a)
    sizes = [len(s) for s in flt.iter_sources()]
    if not sizes:
        return 0.0, 0.0
    sizes = np.asarray(sizes)
    return float((sizes >= 2).mean()), float((sizes > 2).mean())


def run_fpr(b: int, f_list: Sequence[int], insertions: int, seed: int = 0,
            l: int = 1024, mnk: int = 4) -> CsvReport:
    report = CsvReport(("f", "collision_entry_ratio", "multi_collision_ratio",
                        "theoretical_eps"))
    for f in f_list:
        cfg = FilterConfig(l=l, b=b, f=f, mnk=mnk, rng_seed=seed)
        ratio, multi = collision_ratios(cfg, insertions, seed)
        report.add(f, ratio, multi, theoretical_fpr(cfg))
    return report


# ---------------------------------------------------------------------------
# Synthetic workloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    """``uniform[:LINES]``, ``hotset:LINES[:STRIDE]`` or ``streaming``.

    Strides and footprints are in cache lines. A hot set loops over LINES
    lines spaced STRIDE lines apart, so STRIDE equal to the LLC set count
    piles every line into one LLC set.
    """

    name: str
    kind: str
    lines: int = 0
    stride: int = 1

    @classmethod
    def parse(cls, text: str, geometry: CacheGeometry) -> "Workload":
        parts = text.split(":")
        kind = parts[0]
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise ConfigError(f"bad workload {text!r}") from None
        llc_lines = geometry.llc.size // geometry.line_size
        if kind == "uniform" and len(nums) <= 1:
            return cls(text, kind, nums[0] if nums else 4 * llc_lines)
        if kind == "hotset" and 1 <= len(nums) <= 2:
            return cls(text, kind, nums[0], nums[1] if len(nums) > 1 else 1)
        if kind == "streaming" and not nums:
            return cls(text, kind)
        raise ConfigError(f"bad workload {text!r}; expected uniform[:LINES], "
                          "hotset:LINES[:STRIDE] or streaming")

    def addresses(self, count: int, seed: int, line_size: int = 64) -> Iterable[int]:
        base = 0x4000_0000
        if self.kind == "uniform":
            rng = random.Random(seed)
            for _ in range(count):
                yield base + rng.randrange(self.lines) * line_size
        elif self.kind == "hotset":
            for i in range(count):
                yield base + (i % self.lines) * self.stride * line_size
        else:
            for i in range(count):
                yield base + i * line_size


DEFAULT_WORKLOADS = ("uniform", "hotset:32768", "hotset:24:4096", "streaming")


def run_workload(workload: Workload, accesses: int, seed: int, geometry: CacheGeometry,
                 monitor_config: MonitorConfig, gap: int = 10) -> Simulator:
    sim = Simulator(geometry, PiPoMonitor(monitor_config, log_events=False))
    cycle = 0
    for addr in workload.addresses(accesses, seed, geometry.line_size):
        sim.access(0, addr, cycle)
        cycle += gap
    sim.advance(cycle + monitor_config.prefetch_delay)
    return sim


def synthetic_row(name: str, sim: Simulator):
    per_million = sim.monitor.stats.captures * 1_000_000 / max(sim.accesses, 1)
    return name, per_million, sim.monitor.stats.prefetches_scheduled


def run_synthetic(workloads: Sequence[str], accesses: int, seed: int = 0,
                  geometry: Optional[CacheGeometry] = None,
                  monitor_config: Optional[MonitorConfig] = None) -> CsvReport:
    """Benign workloads under the monitor; every capture is a false positive."""
    geometry = geometry or CacheGeometry()
    monitor_config = monitor_config or MonitorConfig()
    report = CsvReport(("workload", "captures_per_million_accesses", "prefetches_issued"))
    for text in workloads:
        wl = Workload.parse(text, geometry)
        sim = run_workload(wl, accesses, seed, geometry, monitor_config)
        report.add(*synthetic_row(wl.name, sim))
    return report


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
    return data


def _build(cls, values: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from None


def filter_config(cfg: dict, **overrides) -> FilterConfig:
    values = dict(cfg.get("filter", {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return _build(FilterConfig, values, "filter")


def monitor_config(cfg: dict, filt: FilterConfig) -> MonitorConfig:
    values = dict(cfg.get("monitor", {}))
    values["filter_config"] = filt
    return _build(MonitorConfig, values, "monitor")


def geometry_config(cfg: dict) -> CacheGeometry:
    values = dict(cfg.get("geometry", {}))
    for level in ("l1", "l2", "llc"):
        if level in values:
            if not isinstance(values[level], dict):
                raise ConfigError(f"geometry.{level} must be a mapping of size/ways/latency")
            values[level] = _build(LevelGeometry, values[level], f"geometry.{level}")
    return _build(CacheGeometry, values, "geometry")


def attack_value(cfg: dict, key: str, cli, default):
    if cli is not None:
        return cli
    return cfg.get("attack", {}).get(key, default)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def summarize(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def print_table(title: str, rows: Sequence[Sequence], out=None) -> None:
    out = out or sys.stdout
    text = [[fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(text[0]))]
    print(title, file=out)
    for r in text:
        print("  " + "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip(), file=out)


def cmd_occupancy(args, cfg) -> CsvReport:
    fc = filter_config(cfg, l=args.l, b=args.b, f=args.f)
    report = run_occupancy(fc.l, fc.b, args.mnk, args.insertions, args.seed, args.step, fc.f)
    rows = [("mnk", "final_occupancy", "first_full")]
    for mnk in args.mnk:
        occ = [o for m, _, o in report.rows if m == mnk]
        full = [i for m, i, o in report.rows if m == mnk and o >= 1.0]
        rows.append((mnk, occ[-1], full[0] if full else "-"))
    print_table(f"occupancy l={fc.l} b={fc.b} insertions={args.insertions}", rows)
    return report


def cmd_fpr(args, cfg) -> CsvReport:
    fc = filter_config(cfg, l=args.l, b=args.b)
    report = run_fpr(fc.b, args.f, args.insertions, args.seed, fc.l, fc.mnk)
    rows = [("f", "collision_entry_ratio", "multi_collision_ratio", "theoretical_eps")]
    rows += report.rows
    print_table(f"fingerprint collisions b={fc.b} l={fc.l} insertions={args.insertions}", rows)
    if args.queries:
        q = dataclasses.replace(fc, f=args.f[0])
        rate = measured_fpr(q, args.queries, args.seed)
        print(f"measured false-positive rate f={q.f}: {rate:.6f} over {args.queries} queries "
              f"(theoretical {theoretical_fpr(q):.6f})")
    return report


def cmd_brute_force(args, cfg) -> CsvReport:
    fc = filter_config(cfg, l=args.l, b=args.b)
    trials = attack_value(cfg, "trials", args.trials, 200)
    res = brute_force_trials(fc, trials, args.seed)
    report = CsvReport(("trial", "fills"))
    for i, n in enumerate(res.fills):
        report.add(i, n)
    s = summarize(res.fills)
    print_table(f"brute-force eviction l={fc.l} b={fc.b} trials={trials}", [
        ("mean", "std", "min", "max", "cv", "theoretical"),
        (s["mean"], s["std"], int(s["min"]), int(s["max"]), res.cv, res.expected),
    ])
    return report


def cmd_reverse(args, cfg) -> CsvReport:
    fc = filter_config(cfg, l=args.l, b=args.b, f=args.f)
    if args.exact:
        report = CsvReport(("b", "mnk", "p_max", "minimal_size"))
        for mnk in args.mnk:
            a = exhaustive_tree_analysis(dataclasses.replace(fc, mnk=mnk))
            report.add(a.b, mnk, str(a.p_max), a.minimal_size)
        print_table(f"exhaustive trigger search l={fc.l} b={fc.b} f={fc.f}",
                    [report.columns] + report.rows)
        return report
    trials = attack_value(cfg, "trials", args.trials, 5)
    report = CsvReport(("b", "mnk", "l", "trial", "eviction_set_size", "fills_issued",
                        "rounds", "success"))
    rows = [("mnk", "eviction_set_size", "successes", "mean_fills")]
    for mnk in args.mnk:
        c = dataclasses.replace(fc, mnk=mnk)
        fills, wins = [], 0
        for t in range(trials):
            seed = args.seed + t
            target = random.Random(seed).getrandbits(40) << 6
            r = run_reverse_attack(dataclasses.replace(c, rng_seed=seed), target, seed=seed,
                                   budget=args.budget)
            report.add(c.b, mnk, c.l, t, r.eviction_set_size_used, r.fills_issued,
                       r.rounds, r.success)
            fills.append(r.fills_issued)
            wins += r.success
        rows.append((mnk, c.b ** (mnk + 1), f"{wins}/{trials}", summarize(fills)["mean"]))
    print_table(f"reverse attack l={fc.l} b={fc.b}", rows)
    return report


def cmd_primeprobe(args, cfg) -> CsvReport:
    fc = filter_config(cfg)
    mc = monitor_config(cfg, fc)
    geom = geometry_config(cfg)
    nbits = attack_value(cfg, "key_length", args.bits, 100)
    key = cfg.get("attack", {}).get("key_bits") or AttackScenario.random_key(nbits, args.seed)
    if any(k not in (0, 1) for k in key):
        raise ConfigError("attack.key_bits must contain only 0 and 1")
    period = attack_value(cfg, "probe_period", args.probe_period, 5000)
    modes = {"off": [False], "on": [True], "both": [False, True]}[args.monitor]
    report = CsvReport(("monitor", "iteration", "true_bit", "inferred_bit", "square_miss",
                        "multiply_miss", "square_prefetched"))
    rows = [("monitor", "accuracy", "square_misses", "prefetches_seen")]
    for on in modes:
        sc = AttackScenario(list(key), geometry=geom, monitor=on, monitor_config=mc,
                            probe_period=period)
        trace, res = run_prime_probe(sc)
        for i in range(len(trace)):
            report.add("on" if on else "off", i, res.true_bits[i], res.inferred_bits[i],
                       trace.observed_miss["square"][i], trace.observed_miss["multiply"][i],
                       trace.prefetched["square"][i])
        rows.append(("on" if on else "off", res.accuracy, sum(trace.observed_miss["square"]),
                     sum(trace.prefetched["square"])))
    print_table(f"prime+probe key bits={len(key)} period={period}", rows)
    return report


def cmd_synthetic(args, cfg) -> CsvReport:
    fc = filter_config(cfg)
    mc = monitor_config(cfg, fc)
    geom = geometry_config(cfg)
    if args.trace:
        sim = Simulator(geom, PiPoMonitor(mc))
        try:
            sim.run_trace(read_trace(args.trace))
        except OSError as e:
            raise ConfigError(f"cannot read trace {args.trace}: {e.strerror}") from None
        if args.events:
            with open(args.events, "w") as fh:
                write_events_csv(sim.events, fh)
        report = CsvReport(("workload", "captures_per_million_accesses", "prefetches_issued"))
        report.add(*synthetic_row("trace", sim))
    else:
        report = run_synthetic(args.workloads, args.accesses, args.seed, geom, mc)
    print_table("benign workloads (captures are false positives)",
                [report.columns] + report.rows)
    return report


COMMANDS = {
    "occupancy": cmd_occupancy,
    "fpr": cmd_fpr,
    "brute-force": cmd_brute_force,
    "reverse": cmd_reverse,
    "primeprobe": cmd_primeprobe,
    "synthetic": cmd_synthetic,
}


def int_list(text: str) -> List[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}")
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=u64, default=0, help="RNG seed (default 0)")
    common.add_argument("--out", help="CSV output path (default <experiment>.csv)")
    common.add_argument("--config", help="YAML file with filter/monitor/geometry/attack sections")

    parser = argparse.ArgumentParser(
        prog="pipomonitor", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="experiment", metavar="experiment", required=True)

    p = sub.add_parser("occupancy", parents=[common], help="occupancy vs insertions per mnk")
    p.add_argument("--l", type=positive_int)
    p.add_argument("--b", type=positive_int)
    p.add_argument("--f", type=positive_int)
    p.add_argument("--mnk", type=int_list, default=[2, 4, 8])
    p.add_argument("--insertions", type=positive_int, default=14000)
    p.add_argument("--step", type=positive_int, default=500, help="sampling interval")

    p = sub.add_parser("fpr", parents=[common], help="fingerprint collision ratios per f")
    p.add_argument("--l", type=positive_int)
    p.add_argument("--b", type=positive_int)
    p.add_argument("--f", type=int_list, default=[8, 10, 12, 14, 16])
    p.add_argument("--insertions", type=positive_int, default=100_000)
    p.add_argument("--queries", type=int, default=0,
                   help="also measure the false-positive rate of a full filter (first f)")

    p = sub.add_parser("brute-force", parents=[common], help="fills to flush a target record")
    p.add_argument("--l", type=positive_int)
    p.add_argument("--b", type=positive_int)
    p.add_argument("--trials", type=positive_int)

    p = sub.add_parser("reverse", parents=[common], help="eviction-tree attack on the filter")
    p.add_argument("--l", type=positive_int)
    p.add_argument("--b", type=positive_int)
    p.add_argument("--f", type=positive_int)
    p.add_argument("--mnk", type=int_list, default=[0, 1, 2])
    p.add_argument("--trials", type=positive_int)
    p.add_argument("--budget", type=positive_int, help="fill budget (default 10*b^(mnk+1))")
    p.add_argument("--exact", action="store_true",
                   help="exhaustive trigger search on a toy filter instead")

    p = sub.add_parser("primeprobe", parents=[common], help="Prime+Probe key recovery")
    p.add_argument("--bits", type=positive_int, help="random key length (default 100)")
    p.add_argument("--monitor", choices=("off", "on", "both"), default="both")
    p.add_argument("--probe-period", type=positive_int)

    p = sub.add_parser("synthetic", parents=[common], help="false captures on benign workloads")
    p.add_argument("--workloads", type=lambda s: [w for w in s.split(",") if w],
                   default=list(DEFAULT_WORKLOADS))
    p.add_argument("--accesses", type=positive_int, default=200_000)
    p.add_argument("--trace", help="replay a trace file instead of generated workloads")
    p.add_argument("--events", help="with --trace, write the monitor event log here")
    return parser


def writable(path: str) -> bool:
    if os.path.isdir(path):
        return False
    if os.path.exists(path):
        return os.access(path, os.W_OK)
    return os.access(os.path.dirname(os.path.abspath(path)), os.W_OK)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = args.out or f"{args.experiment}.csv"
    if not writable(out):
        print(f"error: cannot write {out}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        report = COMMANDS[args.experiment](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    with open(out, "w") as fh:
        fh.write(report.to_csv())
    print(f"wrote {len(report.rows)} rows to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
