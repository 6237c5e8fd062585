"""Command line entry point: ``nmnist-snn <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aer import AerError, IndexEntry, decode_events, index_dataset
from .config import ConfigKeyError, ConfigValueError, RunConfig, parse_key_values
from .dse import DseGrid, DseResult, parse_spans, refine_linear, run_grid
from .network import (
    CheckpointError,
    NonFiniteState,
    NoResponseAfterMaxRetries,
    load_checkpoint,
)
from .plasticity import (
    DegeneratePsth,
    EmptyLog,
    FixedPost,
    TraceStdp,
    TStarOutOfRange,
    estimate_tstar,
    h_to_csv,
)
from .preprocess import (
    COLLAPSE_MODES,
    EmptyPatternSet,
    Pattern,
    collapse,
    compute_psth,
    export_frame_pgm,
    slice_saccade,
)
from .trainer import (
    Model,
    assign_labels,
    ensemble_evaluate,
    evaluate,
    export_weight_grid,
    histogram_csv,
    psth_mode,
    train,
    weight_histogram,
)

log = logging.getLogger("nmnist_snn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class RunFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- fingerprint -------------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass
class LoadedSplit:
    patterns: list[Pattern]
    fingerprint: int


def load_split(root: str, split: str, cfg: RunConfig, limit: int = 0,
               fingerprint: bool = False) -> LoadedSplit:
    """Decode one split; the fingerprint covers the event bytes of every file used, in order."""
    try:
        index = index_dataset(root)
    except (AerError, OSError) as exc:
        raise DataError(str(exc)) from exc
    entries: list[IndexEntry] = index.split(split)
    if limit:
        entries = entries[:limit]
    if not entries:
        raise DataError(f"no {split} files under {root}")
    h = FNV_OFFSET
    patterns = []
    for e in entries:
        try:
            data = e.path.read_bytes()
            stream = decode_events(data)
        except (AerError, OSError) as exc:
            raise DataError(f"{e.path}: {exc}") from exc
        if fingerprint:
            h = fnv1a64(data, h)
        patterns.append(slice_saccade(stream, cfg.saccade, cfg.polarity, e.label))
    return LoadedSplit(patterns, h)


# --- config and manifest ------------------------------------------------------------

def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    try:
        cfg = RunConfig().validate()
        if path:
            # a run manifest is a valid config; its run.* records are skipped
            values = parse_key_values(Path(path).read_text())
            cfg = cfg.updated({k: v for k, v in values.items() if not k.startswith("run.")})
        if overrides:
            cfg = cfg.updated(parse_key_values("\n".join(overrides)))
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except (ConfigKeyError, ConfigValueError) as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from exc
    return cfg


def manifest_path(model_path: str | Path) -> Path:
    return Path(str(model_path) + ".manifest")


def write_manifest(path: Path, cfg: RunConfig, run: dict[str, object]) -> None:
    lines = [f"# nmnist-snn {__version__} run manifest", cfg.to_text().rstrip("\n")]
    lines.append("# run")
    lines.extend(f"run.{k}={v}" for k, v in run.items())
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> tuple[RunConfig, dict[str, str]]:
    values = parse_key_values(path.read_text())
    run = {k[4:]: v for k, v in values.items() if k.startswith("run.")}
    cfg = RunConfig().updated({k: v for k, v in values.items() if not k.startswith("run.")})
    return cfg, run


def load_model(path: str, config: str | None = None) -> tuple[Model, RunConfig]:
    """Checkpoint plus the config and gain recorded next to it (or ``config`` if given)."""
    try:
        weights, theta, labels = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    run: dict[str, str] = {}
    mpath = manifest_path(path)
    if config:
        cfg = load_config(config)
    elif mpath.exists():
        cfg, run = read_manifest(mpath)
    else:
        raise UsageError(f"{path} has no manifest; pass --config")
    cfg = cfg.replace(n_exc=weights.shape[0], n_input=weights.shape[1]).validate()
    gain = float(run.get("gain", cfg.gain_init))
    return Model(cfg.network_config(), weights, theta, gain, labels), cfg


# --- subcommands ----------------------------------------------------------------------

def cmd_decode(args) -> int:
    try:
        stream = decode_events(Path(args.file).read_bytes())
    except (AerError, OSError) as exc:
        raise DataError(str(exc)) from exc
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.csv:
            out.write("t_us,x,y,polarity\n")
            for ev in stream:
                out.write(f"{ev.timestamp},{ev.x},{ev.y},{int(ev.polarity)}\n")
        else:
            span = (int(stream.timestamp[0]), int(stream.timestamp[-1])) if len(stream) else (0, 0)
            n_on = int(np.count_nonzero(stream.polarity == 1))
            out.write(f"events={len(stream)} on={n_on} off={len(stream) - n_on} "
                      f"t_first_us={span[0]} t_last_us={span[1]} reordered={stream.n_reordered}\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_collapse(args) -> int:
    cfg = RunConfig(saccade=args.saccade, polarity=args.polarity).validate()
    loaded = load_split(args.root, args.split, cfg, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    non_empty = peak_one = 0
    for i, pat in enumerate(loaded.patterns):
        frame = collapse(pat, args.mode)
        if pat.n_spikes:
            non_empty += 1
            peak_one += frame.intensity.max() == 1.0
        (out / f"{args.split}_{i:05d}_{pat.label}.pgm").write_bytes(export_frame_pgm(frame))
    print(f"frames={len(loaded.patterns)} non_empty={non_empty} peak_is_one={peak_one}")
    return EXIT_OK


def cmd_psth(args) -> int:
    cfg = RunConfig(saccade=args.saccade, polarity=args.polarity).validate()
    loaded = load_split(args.root, args.split, cfg, args.limit)
    table = compute_psth(loaded.patterns)
    Path(args.out).write_text(table.to_csv())
    peak = int(np.argmax(table.values))
    print(f"patterns={table.n_patterns} peak_ms={peak} peak_H={table.values[peak]:.4f}")
    return EXIT_OK


def _data_root(args, cfg: RunConfig) -> str:
    root = getattr(args, "data", None) or cfg.data_root
    if not root:
        raise UsageError("no dataset: set data_root in the config or pass --data")
    return root


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.shuffle is not None:
        cfg = cfg.replace(shuffle_seed=args.shuffle).validate()
    root = _data_root(args, cfg)
    loaded = load_split(root, "train", cfg, cfg.n_train, fingerprint=True)
    patterns = loaded.patterns
    net = cfg.network_config()
    params = cfg.plasticity_params()
    shuffle = cfg.shuffle_seed if cfg.shuffle_seed >= 0 else None
    run: dict[str, object] = {"mode": args.mode, "n_train_used": len(patterns),
                              "dataset_fnv1a64": f"{loaded.fingerprint:016x}"}
    if args.mode == "trace":
        mode = TraceStdp(params)
    elif args.mode == "fixedpost":
        t_star = cfg.t_star
        if t_star < 0:
            probe = train(net, TraceStdp(params), patterns, 1, seed=cfg.seed, shuffle_seed=shuffle)
            t_star = estimate_tstar(probe.log.first_spike_ms)
            log.info("estimated t* = %d ms from a trace-STDP pass", t_star)
        mode = FixedPost(float(t_star), params, duration=cfg.present_ms)
        run["t_star_ms"] = t_star
    else:
        mode, cal = psth_mode(patterns, net, params, cfg.seed, cfg.calib_patterns, cfg.rho)
        base = Path(args.out)
        Path(str(base) + ".h.csv").write_text(h_to_csv(cal.h))
        Path(str(base) + ".calibration.csv").write_text(cal.report_csv())
        run.update(psth_a=repr(cal.a), psth_b=repr(cal.b), psth_ratio=repr(cal.ratio))
    model = train(net, mode, patterns, cfg.epochs, seed=cfg.seed, shuffle_seed=shuffle)
    if cfg.epochs > 0:
        model = assign_labels(model, patterns, cfg.workers)
    Path(args.out).write_bytes(model.checkpoint_bytes())
    run["gain"] = repr(model.gain)
    assigned = int(np.count_nonzero(model.labels >= 0))
    run["assigned_neurons"] = assigned
    write_manifest(manifest_path(args.out), cfg, run)
    print(f"trained {len(patterns)} patterns x {cfg.epochs} epochs; gain={model.gain:g} "
          f"assigned={assigned}/{cfg.n_exc} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_model(args.model, args.config)
    loaded = load_split(args.test, "test", cfg, args.limit or cfg.n_test)
    report = evaluate(model, loaded.patterns, args.workers)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.summary())
    return EXIT_OK


def cmd_ensemble(args) -> int:
    reports = []
    for path in args.models:
        model, cfg = load_model(path)
        loaded = load_split(args.test, "test", cfg, args.limit or cfg.n_test)
        rep = evaluate(model, loaded.patterns, args.workers)
        print(f"{path}: saccade={cfg.saccade} polarity={cfg.polarity} {rep.summary()}")
        reports.append(rep)
    combined = ensemble_evaluate(reports)
    if args.out:
        Path(args.out).write_text(combined.to_csv())
    print(f"ensemble: {combined.summary()}")
    return EXIT_OK


def cmd_dse(args) -> int:
    cfg = load_config(args.grid, args.set)
    root = _data_root(args, cfg)
    try:
        grid = DseGrid.from_config(cfg)
        spans = parse_spans(args.refine) if args.refine else None
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_set = load_split(root, "train", cfg, cfg.n_train).patterns
    test_set = load_split(root, "test", cfg, cfg.n_test).patterns
    result = run_grid(grid, train_set, test_set, args.workers)
    _report_grid(result, args.out)
    if spans is not None and result.best is not None:
        refined = refine_linear(result, spans, cfg, train_set, test_set, args.workers)
        _report_grid(refined, Path(str(args.out) + ".refined.csv") if args.out else None)
        result = refined
    return EXIT_OK if result.best is not None else EXIT_RUN


def _report_grid(result: DseResult, out) -> None:
    text = result.to_csv()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    best = result.best
    if best is None:
        print("no cell finished", file=sys.stderr)
    else:
        print(f"best: tau_xpre={best.tau_xpre:g} eta={best.eta:g} "
              f"delta_theta={best.delta_theta:g} accuracy={best.accuracy:.4f}")


def cmd_inspect(args) -> int:
    model, cfg = load_model(args.model, args.config)
    hist, edges, score = weight_histogram(model.weights, args.bins, cfg.w_max)
    if args.weights_pgm:
        Path(args.weights_pgm).write_bytes(export_weight_grid(model))
    if args.hist:
        Path(args.hist).write_text(histogram_csv(hist, edges, score))
    labels = model.labels
    print(f"neurons={cfg.n_exc} inputs={cfg.n_input} assigned={int(np.count_nonzero(labels >= 0))} "
          f"theta_mean={model.theta.mean():.4f} gain={model.gain:g} bimodality={score:.4f}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nmnist-snn", description="Unsupervised STDP spiking network for N-MNIST.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("decode", help="decode one .bin recording")
    s.add_argument("file")
    s.add_argument("--csv", action="store_true", help="print every event as t_us,x,y,polarity")
    s.add_argument("--out", help="write to this file instead of stdout")
    s.set_defaults(func=cmd_decode)

    def add_pattern_args(s):
        s.add_argument("root", help="dataset root with Train/ and Test/")
        s.add_argument("--saccade", type=int, choices=(1, 2, 3), default=1)
        s.add_argument("--polarity", choices=("ON", "OFF"), default="ON")
        s.add_argument("--split", choices=("train", "test"), default="train")
        s.add_argument("--limit", type=int, default=0, help="use only the first N files (0 = all)")

    s = sub.add_parser("collapse", help="export time-collapsed frames as PGM")
    add_pattern_args(s)
    s.add_argument("--mode", choices=COLLAPSE_MODES, default="count")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_collapse)

    s = sub.add_parser("psth", help="write the population PSTH H(t) as CSV")
    add_pattern_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_psth)

    s = sub.add_parser("train", help="train one network and assign neuron labels")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    s.add_argument("--data", help="dataset root (overrides data_root)")
    s.add_argument("--mode", choices=("trace", "fixedpost", "psth"), default="trace")
    s.add_argument("--shuffle", type=int, metavar="SEED", help="shuffle pattern order every epoch")
    s.add_argument("--out", required=True, help="checkpoint path (.snnw)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a trained checkpoint on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True, help="dataset root")
    s.add_argument("--config", help="config to use instead of the model manifest")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="per-pattern CSV report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble", help="majority vote over several trained networks")
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--test", required=True, help="dataset root")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="per-pattern CSV report")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("dse", help="grid search over tau_xpre, eta and delta_theta")
    s.add_argument("--grid", required=True, help="key=value config with *_values lists")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--data", help="dataset root (overrides data_root)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--refine", metavar="SPANS",
                   help="linear refinement around the best cell, e.g. eta=0.02:5,delta_theta=0.05:5")
    s.add_argument("--out", help="results CSV (stdout if omitted)")
    s.set_defaults(func=cmd_dse)

    s = sub.add_parser("inspect", help="weight mosaic and histogram of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--config", help="config to use instead of the model manifest")
    s.add_argument("--weights-pgm")
    s.add_argument("--hist")
    s.add_argument("--bins", type=int, default=20)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptyPatternSet, DegeneratePsth) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NoResponseAfterMaxRetries as exc:
        print(f"run failed at pattern {getattr(exc, 'pattern_index', '?')}: {exc}", file=sys.stderr)
        return EXIT_RUN
    except (NonFiniteState, TStarOutOfRange, EmptyLog, RunFailure) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except BrokenPipeError:  # e.g. piped into head
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
