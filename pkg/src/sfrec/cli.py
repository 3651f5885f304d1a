"""Batch command-line interface.

Subcommands:

* ``simulate``     generate a dataset (signals + geometry) into a directory
* ``reconstruct``  run one method on a dataset and write the reconstruction
* ``select``       compute a sample-selection mask and its objective
* ``sweep``        run the configured experiment sweeps
* ``kernel-dump``  write covariance/coherence tables for inspection

Exit codes: 0 success, 1 usage error, 2 runtime failure (more than 10% of
sweep trials failed, or an unrecoverable error).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .covariance import (
    Geometry,
    build_covariance_set,
    coherence_diffuse,
    cross_spectral_density,
    temporal_correlation,
)
from .estimator import fit_posterior, reconstruct_stream
from .harness import (
    METHOD_NAMES,
    ConfigError,
    cv_select_sigma2,
    load_config,
    reconstruct_method,
    run_sweep,
    simulate_trial,
)
from .selection import select

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems via exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_signals_csv(path: Path, signals: np.ndarray):
    rows = [
        (ch, t, float(signals[ch, t]))
        for ch in range(signals.shape[0])
        for t in range(signals.shape[1])
    ]
    _write_csv(path, ["channel_index", "time_index", "value"], rows)


def _read_signals_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["channel_index", "time_index", "value"]:
            raise ValueError(f"{path}: unexpected header {header}")
        triples = [(int(c), int(t), float(v)) for c, t, v in reader]
    n_ch = max(c for c, _, _ in triples) + 1
    n_t = max(t for _, t, _ in triples) + 1
    out = np.zeros((n_ch, n_t))
    for c, t, v in triples:
        out[c, t] = v
    return out


def _load_cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=int(args.seed))
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    noisy, clean, truth = simulate_trial(cfg, args.trial)
    _write_csv(out / "mics.csv", ["x", "y", "z"], [tuple(p) for p in cfg.mics])
    _write_csv(out / "targets.csv", ["x", "y", "z"], [tuple(p) for p in cfg.targets])
    _write_signals_csv(out / "observed.csv", noisy)
    _write_signals_csv(out / "clean.csv", clean)
    _write_signals_csv(out / "truth.csv", truth)
    meta = {
        "fs": cfg.fs,
        "c": cfg.c,
        "snr_db": cfg.snr_db,
        "simulator": cfg.simulator,
        "seed": cfg.seed,
        "trial": args.trial,
        "num_samples": cfg.num_samples,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    print(f"dataset written to {out}")
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.dataset)
    signals = _read_signals_csv(data_dir / "observed.csv")
    truth_path = data_dir / "truth.csv"
    geometry = Geometry(mics=cfg.mics, targets=cfg.targets, window=cfg.window)
    ctx = cfg.method_context(args.method)
    if args.sigma2 is not None:
        sigma2 = float(args.sigma2)
    else:
        sigma2 = cv_select_sigma2(ctx, signals, cfg.mics, cfg.sigma2_grid)
    rec = reconstruct_method(ctx, sigma2, signals, geometry)
    variance = rec.variance if rec.variance is not None else np.full(rec.mean.shape[0], np.nan)
    rows = [
        (t, p, float(rec.mean[p, t]), float(variance[p]))
        for t in np.flatnonzero(rec.valid)
        for p in range(rec.mean.shape[0])
    ]
    _write_csv(Path(args.output), ["time_index", "target_index", "mean", "variance"], rows)
    msg = f"reconstruction written to {args.output} (sigma2={sigma2:g})"
    if truth_path.is_file():
        from .harness import nmse

        truth = _read_signals_csv(truth_path)
        warm = int(np.argmax(rec.valid))
        stop = int(len(rec.valid) - np.argmax(rec.valid[::-1]))
        score = nmse(rec.mean[:, :stop], truth[:, :stop], trim=cfg.trim, warmup=warm)
        msg += f", NMSE {score:.2f} dB"
    print(msg)
    return 0


def _cmd_select(args) -> int:
    cfg = _load_cfg(args)
    W = cfg.selection_window
    M = cfg.mics.shape[0]
    model = cfg.kernel_model()
    geometry = Geometry(mics=cfg.mics, targets=cfg.targets, window=W)
    cov = build_covariance_set(model, geometry)
    if args.sigma2 is not None:
        sigma2 = float(args.sigma2)
    else:
        noisy, _, _ = simulate_trial(cfg, 0, seed_tag="select")
        ctx = cfg.method_context("spatio-temporal", window=W, model=model)
        sigma2 = cv_select_sigma2(ctx, noisy, cfg.mics, cfg.sigma2_grid)
    result = select(
        cov,
        sigma2,
        int(args.budget),
        epsilon=cfg.selection_epsilon,
        rho=cfg.selection_rho,
        iters=cfg.selection_iters,
    )
    rows = [
        (idx % M, idx // M, int(result.mask.z[idx]), float(result.relaxed_scores[idx]))
        for idx in range(M * W)
    ]
    _write_csv(Path(args.output), ["mic_index", "lag", "selected", "relaxed_score"], rows)
    print(
        f"mask written to {args.output} (K={args.budget}, sigma2={sigma2:g}, "
        f"objective={result.objective:.6g})"
    )
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    result = run_sweep(cfg, output_dir=args.output_dir)
    for path in result.csv_paths:
        print(f"wrote {path}")
    if result.failures:
        print(f"{len(result.failures)} trial(s) failed", file=sys.stderr)
    if result.failure_fraction > 0.10:
        return 2
    return 0


def _cmd_kernel_dump(args) -> int:
    cfg = _load_cfg(args)
    radius = float(args.radius) if args.radius is not None else cfg.source_radius
    q_points = int(args.quadrature) if args.quadrature is not None else cfg.quadrature_points
    model = cfg.kernel_model(source_radius=radius, quadrature_points=q_points)
    out = Path(args.output_dir)

    deltas = np.linspace(-0.01, 0.01, 201)
    corr = temporal_correlation(deltas, model.spectrum)
    _write_csv(
        out / "kappa_table.csv",
        ["delta_s", "correlation"],
        [(float(d), float(k)) for d, k in zip(deltas, corr)],
    )

    center = cfg.mics.mean(axis=0)
    lo, hi = cfg.band_hz
    freqs = [f for f in (100.0, 300.0, 500.0, 1000.0) if lo <= f <= hi] or [0.5 * (lo + hi)]
    distances = np.linspace(0.0, 0.2, 21)
    rows = []
    for f in freqs:
        omega = 2.0 * np.pi * f
        auto = cross_spectral_density(model, center, center, omega).real
        for d in distances:
            if d == 0.0:
                coh = 1.0
            else:
                shift = np.array([0.5 * d, 0.0, 0.0])
                cross = cross_spectral_density(model, center - shift, center + shift, omega)
                coh = float(np.real(cross) / auto)
            rows.append((f, float(d), coh, float(coherence_diffuse(d, omega, cfg.c))))
    _write_csv(
        out / "coherence_table.csv",
        ["freq_hz", "distance_m", "coherence_model", "coherence_sinc"],
        rows,
    )
    print(f"kernel tables written to {out}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="sfrec", description="Causal spatio-temporal sound field tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a simulated dataset")
    p.add_argument("--config", required=True, help="experiment configuration (JSON)")
    p.add_argument("--output-dir", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p.add_argument("--trial", type=int, default=0, help="trial index for the seed stream")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct the field from a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, help="directory written by `simulate`")
    p.add_argument("--method", required=True, choices=METHOD_NAMES)
    p.add_argument("--output", required=True, help="reconstruction CSV path")
    p.add_argument("--sigma2", type=float, default=None, help="noise parameter (default: cross-validated)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("select", help="budget-constrained sample selection")
    p.add_argument("--config", required=True)
    p.add_argument("--budget", type=int, required=True, help="number of samples to keep")
    p.add_argument("--output", required=True, help="mask CSV path")
    p.add_argument("--sigma2", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("sweep", help="run the configured experiment sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None, help="override the configured output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("kernel-dump", help="write covariance and coherence tables")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--radius", type=float, default=None, help="override the source-sphere radius")
    p.add_argument("--quadrature", type=int, default=None, help="override the quadrature point count")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_kernel_dump)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
