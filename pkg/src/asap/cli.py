"""Command line for asap: graph tools, training runs and the consistency benchmark.

Exit codes: 0 success, 2 usage or config error, 3 target not reached within
the epoch cap, 4 runtime or protocol failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import AsapError, InvalidArgument, ParseError
from .learner import LrSchedule, StubGradients
from .metrics import write_consistency, write_trace
from .protocol import SyncMode
from .runtime import Cluster, ExperimentConfig, FaultKnobs, RunFailed, build_dataset
from .runtime import run as run_experiment
from .topology import (KINDS, format_topology, generate, is_doubly_stochastic, is_strongly_connected,
                       read_topology, spectral_report, transition_matrix, write_topology)

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DNC = 3
EXIT_FAILURE = 4

MODES = [m.value for m in SyncMode]
FAULT_KEYS = ("interleave_prob", "delay_prob", "delay_steps")


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"asap: {msg}", file=sys.stderr)


# -- graph ------------------------------------------------------------------

def cmd_graph(args) -> int:
    if args.graph_cmd == "gen":
        try:
            topo = generate(args.kind, args.n)
        except InvalidArgument as exc:
            _err(str(exc))
            return EXIT_USAGE
        if args.out:
            write_topology(topo, args.out)
        else:
            sys.stdout.write(format_topology(topo))
        return EXIT_OK

    try:
        topo = read_topology(args.input)
    except (OSError, InvalidArgument) as exc:
        _err(f"cannot read topology: {exc}")
        return EXIT_USAGE
    p = transition_matrix(topo)
    rep = spectral_report(p)
    print(json.dumps({
        "name": topo.name,
        "n": topo.n,
        "degree_profile": topo.degree_profile(),
        "sigma1": rep.sigma1,
        "sigma2": rep.sigma2,
        "gap": rep.gap,
        "doubly_stochastic": is_doubly_stochastic(p),
        "strongly_connected": is_strongly_connected(topo),
    }))
    return EXIT_OK


# -- config -----------------------------------------------------------------

def _config_keys() -> dict[str, type]:
    keys = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "faults"}
    keys.update(dict(zip(FAULT_KEYS, ("float", "float", "int"))))
    return keys


def _coerce(key: str, kind, value):
    kind = str(kind)
    if value is None:
        return None
    try:
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if "SyncMode" in kind:
            return SyncMode.parse(value)
        if not isinstance(value, str):
            raise ValueError
        return value
    except (TypeError, ValueError, InvalidArgument):
        raise UsageError(f"config key {key!r}: bad value {value!r}") from None


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    known = _config_keys()
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, known[k], v) for k, v in raw.items()}


def resolve_config(args) -> ExperimentConfig:
    """File values, then flags on top; anything left unset takes the default."""
    values = load_config_file(args.config) if args.config else {}
    for key in ("seed", "mode", "topology", "n"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _coerce(key, _config_keys()[key], flag)
    if getattr(args, "data", None):
        values["data_path"] = args.data

    defaulted = sorted(set(_config_keys()) - set(values))
    if defaulted:
        print(f"notice: using defaults for {', '.join(defaulted)}", file=sys.stderr)

    base = FaultKnobs()
    faults = FaultKnobs(*(values.pop(k, getattr(base, k)) for k in FAULT_KEYS))
    try:
        return ExperimentConfig(faults=faults, **values)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    d = cfg.as_dict()
    faults = d.pop("faults")
    d.update(faults)
    lines = []
    for k, v in d.items():
        if v is None:
            lines.append(f"# {k} unset")
        elif isinstance(v, bool):
            lines.append(f"{k} = {str(v).lower()}")
        elif isinstance(v, str):
            lines.append(f"{k} = {json.dumps(v)}")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("ASAP_OUT_DIR") or "asap-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train ------------------------------------------------------------------

def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.topology}-n{cfg.n}-{cfg.mode.value}-s{cfg.seed}"


def _write_artifacts(out: Path, rid: str, result) -> None:
    write_trace(result.trace, out / f"{rid}_trace.csv")
    write_consistency([result.histogram], out / f"{rid}_consistency.json")
    (out / f"{rid}_bytes.json").write_text(json.dumps({
        "bytes_sent": result.bytes_sent,
        "messages_sent": result.messages_sent,
        "bytes_per_worker": result.bytes_per_worker,
        "iterations": result.iterations,
    }, indent=1))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    try:
        data = build_dataset(cfg)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {cfg.data_path}: {exc.strerror}") from None
    except ParseError as exc:
        raise UsageError(f"dataset {cfg.data_path}: {exc}") from None
    try:
        generate(cfg.topology, cfg.n)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None

    out = _out_dir(args)
    rid = run_id(cfg)
    try:
        result = run_experiment(cfg, data=data, resume=args.resume)
    except RunFailed as exc:
        _write_artifacts(out, rid, exc.result)
        _err(f"run failed: {exc.cause}")
        return EXIT_FAILURE
    _write_artifacts(out, rid, result)

    if cfg.target_accuracy is not None:
        row = result.trace.first_reaching(cfg.target_accuracy)
        if row is None:
            last = result.trace.rows[-1]
            print(f"DNC: accuracy {last.accuracy:.4f} at iter {last.iteration} "
                  f"bytes/worker {last.bytes_per_worker:.0f}")
            return EXIT_DNC
    else:
        row = result.trace.rows[-1]
    print(f"reached {row.accuracy:.4f} at iter {row.iteration} bytes/worker {row.bytes_per_worker:.0f}")
    return EXIT_OK


# -- simulate ---------------------------------------------------------------

def consistency_benchmark(topology: str = "allreduce", n: int = 8, iterations: int = 1000,
                          interleave_prob: float = 0.5, d: int = 64, seed: int = 1,
                          modes=tuple(SyncMode)) -> dict[str, object]:
    """Histograms of intact buffers per reduce for each mode on stub gradients."""
    topo = generate(topology, n)
    grads = np.random.default_rng(seed).standard_normal((1, n, d))
    out = {}
    for mode in modes:
        mode = SyncMode.parse(mode)
        payload = StubGradients(grads, LrSchedule(0.1, 0.0))
        cluster = Cluster(topo, mode, payload, seed=seed, faults=FaultKnobs(interleave_prob=interleave_prob))
        out[mode.value] = cluster.run(iterations).histogram
    return out


def cmd_simulate(args) -> int:
    if not 0.0 <= args.interleave <= 1.0:
        raise UsageError("--interleave must be in [0, 1]")
    if args.iterations < 1 or args.d < 1:
        raise UsageError("--iterations and --d must be positive")
    seed = 1 if args.seed is None else args.seed
    n = 8 if args.n is None else args.n
    topology = args.topology or "allreduce"
    modes = [args.mode] if args.mode else list(SyncMode)
    try:
        hists = consistency_benchmark(topology, n, args.iterations, args.interleave, args.d, seed, modes)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    except RunFailed as exc:
        _err(f"run failed: {exc.cause}")
        return EXIT_FAILURE
    out = _out_dir(args)
    write_consistency(hists, out / f"simulate-{topology}-n{n}-s{seed}_consistency.json")
    summary = {}
    for mode, h in hists.items():
        summary[mode] = {**h.as_dict(), "fraction_full": h.fraction_full(),
                         "fraction_at_least_5": h.fraction_at_least(min(5, n - 1))}
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("graph", help="generate or analyze communication graphs")
    gsub = g.add_subparsers(dest="graph_cmd", required=True)
    gen = gsub.add_parser("gen", help="write a generated topology")
    gen.add_argument("--kind", required=True, choices=sorted(KINDS))
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--out", help="output file (default: stdout)")
    an = gsub.add_parser("analyze", help="spectral report for a topology file as JSON")
    an.add_argument("--in", dest="input", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--topology", choices=sorted(KINDS))
        p.add_argument("--n", type=int)
        p.add_argument("--out", help="output directory (default: $ASAP_OUT_DIR or ./asap-out)")

    t = sub.add_parser("train", help="train the SVM over a simulated cluster")
    t.add_argument("--config", help="TOML file with flat experiment keys")
    t.add_argument("--data", help="LIBSVM dataset (overrides data_path)")
    t.add_argument("--resume", help="checkpoint file to resume from")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common(t)

    s = sub.add_parser("simulate", help="consistency micro-benchmark across sync modes")
    common(s)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--interleave", type=float, default=0.5)
    s.add_argument("--d", type=int, default=64)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"graph": cmd_graph, "train": cmd_train, "simulate": cmd_simulate}
    try:
        return handlers[args.cmd](args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except AsapError as exc:
        _err(str(exc))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
