"""
HOLD Commands Module
====================
One function per subcommand. Each takes the parsed arguments, builds the
run configuration, does its work through the modules package and writes
its artifacts under the output directory. Return value is the exit code.
"""

import logging
import math
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from components.artifacts import RunStamp, write_csv, write_json, write_sidecar
from modules.data_loader import Dataset, export_dataset_csv, make_dataset, samples_frame
from modules.errors import ConfigError
from modules.hold_config import RunConfig, load_config
from modules.likelihood import gaussian_bound_gap, nll_bound
from modules.metrics import cluster_masses, sample_distance
from modules.objective import loss_profile
from modules.oracle import verification_report
from modules.parallel import stream
from modules.samplers import evolve_fractions, fraction_times, generate
from modules.scorenet import ScoreModel, load_checkpoint
from modules.trainer import FINAL_CHECKPOINT, train

logger = logging.getLogger(__name__)

# Stream indices far above any chunk index used by the samplers
REFERENCE_STREAM = 1 << 40
METRIC_STREAM = (1 << 40) + 1
PROFILE_STREAM = (1 << 40) + 2
LOSS_PROFILE_BINS = 10

BLOCKS = ("q", "p", "s")


# =============================================================================
# SHARED HELPERS
# =============================================================================
def load_run(args, **extra) -> RunConfig:
    """Config file, then --set overrides, then dedicated flags."""
    explicit = {
        "run.seed": getattr(args, "seed", None),
        "run.threads": getattr(args, "threads", None),
        "run.out_dir": getattr(args, "out", None),
    }
    explicit.update(extra)
    return load_config(getattr(args, "config", None), getattr(args, "overrides", []), **explicit)


def stamp_for(run: RunConfig) -> RunStamp:
    return RunStamp(config_hash=run.hash, seed=run.seed)


def load_model(args, run: RunConfig) -> Tuple[ScoreModel, str]:
    """
    Score model for sampling/likelihood commands.

    Returns:
        Tuple of (model, hash identifying it)
    """
    if getattr(args, "analytic", False):
        dataset = make_dataset(run.data)
        if dataset.exact_score is None:
            raise ConfigError("--analytic", f"no exact score for data.name={run.data.name!r} (gaussian and gmm1d have one)")
        return dataset.exact_score(run.kernel), "analytic"
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(run.out_dir) / "checkpoints" / FINAL_CHECKPOINT
    ckpt = load_checkpoint(path)
    if ckpt.spec.d != run.net.d:
        raise ConfigError("net.d", f"checkpoint {path} was trained with d={ckpt.spec.d}, config has d={run.net.d}")
    trained_kernel = ckpt.extra.get("kernel")
    if trained_kernel and trained_kernel != asdict(run.kernel):
        logger.warning("checkpoint %s was trained with kernel %s, sampling with %s", path, trained_kernel, asdict(run.kernel))
    return ckpt.model(use_ema=True), ckpt.config_hash


def reference_samples(run: RunConfig, dataset: Dataset) -> np.ndarray:
    return dataset.sample(run.data.n_eval, stream(run.seed, REFERENCE_STREAM))


def distance_to_data(run: RunConfig, samples: np.ndarray, reference: np.ndarray) -> float:
    return sample_distance(samples, reference, run.eval.n_dirs, stream(run.seed, METRIC_STREAM))


# =============================================================================
# COMMANDS
# =============================================================================
def cmd_verify(args) -> int:
    run = load_run(args)
    started = time.perf_counter()
    results = verification_report(
        run.kernel, run.eval, run.seed, run.threads, include_monte_carlo=not args.skip_monte_carlo,
    )
    passed = all(r.passed for r in results)
    path = Path(run.out_dir) / "verify_report.json"
    write_json({"passed": passed, "checks": [r.to_dict() for r in results]}, path, stamp_for(run))
    write_sidecar(path, stamp_for(run), wall_s=time.perf_counter() - started)
    logger.info("verification %s (%d checks) -> %s", "passed" if passed else "FAILED", len(results), path)
    return 0 if passed else 1


def cmd_train(args) -> int:
    run = load_run(args)
    dataset = make_dataset(run.data)
    out = Path(run.out_dir)
    stamp = stamp_for(run)
    export_dataset_csv(dataset, run.data.n_eval, out / "dataset.csv", seed=run.seed, preamble=stamp.preamble())
    result = train(run, dataset, out, progress=not args.no_progress)
    model = load_checkpoint(result.checkpoint).model(use_ema=True)
    reference = dataset.exact_score(run.kernel) if dataset.exact_score else None
    q0 = dataset.sample(run.data.n_eval, stream(run.seed, PROFILE_STREAM))
    profile = loss_profile(run.kernel, model, q0, stream(run.seed, PROFILE_STREAM + 1), LOSS_PROFILE_BINS, reference)
    write_csv(profile, out / "loss_by_time.csv", stamp)
    summary = out / "train_summary.json"
    write_json(
        {"checkpoint": result.checkpoint, "final_loss": result.final_loss, "n_iters": result.n_iters,
         "loss_kind": run.train.loss_kind, "dataset": run.data.name},
        summary, stamp,
    )
    write_sidecar(summary, stamp, log=result.log_path)
    return 0


def cmd_sample(args) -> int:
    extra = {"grid.sampler": args.sampler, "grid.n_steps": args.steps, "grid.n_samples": args.n_samples}
    run = load_run(args, **extra)
    model, model_hash = load_model(args, run)
    dataset = make_dataset(run.data)
    stamp = stamp_for(run)
    result = generate(run.kernel, model, run.grid, run.grid.n_samples, run.seed, run.threads)

    out = Path(run.out_dir)
    path = write_csv(samples_frame(result.samples), out / f"samples_{result.sampler}.csv", stamp)
    report = {
        "sampler": result.sampler,
        "n_steps": run.grid.n_steps,
        "n_samples": run.grid.n_samples,
        "nfe": result.nfe,
        "model_hash": model_hash,
        "w1_to_data": distance_to_data(run, result.samples, reference_samples(run, dataset)),
    }
    if dataset.centers is not None:
        report["cluster_masses"] = cluster_masses(result.samples, dataset.centers)
    write_json(report, out / f"samples_{result.sampler}.json", stamp)
    write_sidecar(path, stamp, nfe=result.nfe, wall_s=result.wall_s, sampler=result.sampler)
    logger.info("%s samples -> %s (W1 to data %.4f)", result.sampler, path, report["w1_to_data"])
    return 0


def cmd_nll(args) -> int:
    run = load_run(args)
    model, model_hash = load_model(args, run)
    dataset = make_dataset(run.data)
    stamp = stamp_for(run)
    q0 = dataset.sample(run.eval.n_points, stream(run.seed, REFERENCE_STREAM))
    started = time.perf_counter()
    est = nll_bound(
        run.kernel, model, q0, run.eval.n_aux, run.eval.n_hutch, run.seed,
        run.grid.atol, run.grid.rtol, run.threads,
    )
    report = {
        "bound_nats": est.bound_nats,
        "bits_per_dim": est.bound_bits_per_dim,
        "std_error": est.std_error,
        "n_aux": est.n_aux_draws,
        "n_hutch": est.n_hutchinson,
        "n_points": est.n_points,
        "tol": run.grid.atol,
        "checkpoint_hash": model_hash,
    }
    if dataset.entropy is not None:
        report["true_nll_nats"] = dataset.entropy
        report["gap_nats"] = est.bound_nats - dataset.entropy
    if model_hash == "analytic" and run.data.name == "gaussian":
        report["expected_gap_nats"] = gaussian_bound_gap(run.kernel, run.data.mean, run.data.var, run.net.d)
    path = write_json(report, Path(run.out_dir) / "nll_report.json", stamp)
    write_sidecar(path, stamp, wall_s=time.perf_counter() - started)
    return 0


def cmd_compare(args) -> int:
    extra = {"eval.compare_steps": tuple(args.steps) if args.steps else None}
    run = load_run(args, **extra)
    model, model_hash = load_model(args, run)
    dataset = make_dataset(run.data)
    reference = reference_samples(run, dataset)
    stamp = stamp_for(run)

    rows: List[Dict[str, object]] = []
    wall: Dict[str, float] = {}
    for n_steps in run.eval.compare_steps:
        for sampler in args.samplers:
            metrics, nfes = [], []
            for rep in range(run.eval.compare_seeds):
                result = generate(
                    run.kernel, model, run.grid, run.grid.n_samples, run.seed + rep, run.threads,
                    n_steps=n_steps, sampler=sampler,
                )
                metrics.append(distance_to_data(run, result.samples, reference))
                nfes.append(result.nfe)
                wall[f"{sampler}_{n_steps}_{rep}"] = result.wall_s
            se = float(np.std(metrics, ddof=1) / math.sqrt(len(metrics))) if len(metrics) > 1 else 0.0
            rows.append({
                "sampler": sampler,
                "n_steps": n_steps,
                "nfe": int(np.max(nfes)),
                "metric_mean": float(np.mean(metrics)),
                "metric_se": se,
                "n_seeds": len(metrics),
            })
            logger.info("%s @ %d steps: W1 %.4f +- %.4f", sampler, n_steps, rows[-1]["metric_mean"], se)
    path = write_csv(pd.DataFrame(rows), Path(run.out_dir) / "compare.csv", stamp)
    write_sidecar(path, stamp, model_hash=model_hash, wall_s=wall)
    return 0


def _histograms(states: List[np.ndarray], block: int, n_bins: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Shared bin edges across snapshots; per-coordinate densities."""
    values = np.concatenate([s[:, block, :].ravel() for s in states])
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    dens = []
    for s in states:
        cols = [np.histogram(s[:, block, j], bins=edges, density=True)[0] for j in range(s.shape[2])]
        dens.append(np.stack(cols, axis=1))
    return edges, dens


def cmd_evolve(args) -> int:
    extra = {"grid.sampler": args.sampler, "eval.n_snapshots": args.snapshots}
    run = load_run(args, **extra)
    model, model_hash = load_model(args, run)
    stamp = stamp_for(run)
    sampler = run.grid.sampler
    fractions = evolve_fractions(sampler, run.eval.n_snapshots)
    times = fraction_times(run.kernel, fractions)
    result = generate(run.kernel, model, run.grid, run.grid.n_samples, run.seed, run.threads, snapshot_times=times)

    out = Path(run.out_dir) / "evolve"
    states = [snap.state for snap in result.snapshots]
    for b, block in enumerate(BLOCKS):
        edges, dens = _histograms(states, b, run.eval.n_bins)
        for j, density in enumerate(dens):
            frame = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:]})
            for c in range(density.shape[1]):
                frame[f"density_{c}"] = density[:, c]
            write_csv(frame, out / f"{sampler}_snap{j:02d}_{block}.csv", stamp)
    index = pd.DataFrame({
        "snapshot": range(len(fractions)),
        "fraction": fractions,
        "t_requested": times,
        "t_actual": [snap.t for snap in result.snapshots],
    })
    path = write_csv(index, out / f"{sampler}_index.csv", stamp)
    write_sidecar(path, stamp, nfe=result.nfe, wall_s=result.wall_s, model_hash=model_hash)
    logger.info("%d snapshots x %d blocks -> %s", len(fractions), len(BLOCKS), out)
    return 0


def cmd_ablate(args) -> int:
    run = load_run(args)
    dataset = make_dataset(run.data)
    reference = reference_samples(run, dataset)
    stamp = stamp_for(run)
    rows = []
    for L in args.l_values:
        for alpha in args.alpha_values:
            cell = replace(run, kernel=replace(run.kernel, L=L, alpha=alpha), out_dir=str(Path(run.out_dir) / f"L{L:g}_alpha{alpha:g}"))
            cell.validate()
            trained = train(cell, dataset, Path(cell.out_dir), progress=not args.no_progress)
            model = load_checkpoint(trained.checkpoint).model(use_ema=True)
            result = generate(cell.kernel, model, cell.grid, cell.grid.n_samples, cell.seed, cell.threads, sampler="lt")
            row = {
                "L": L,
                "alpha": alpha,
                "final_loss": trained.final_loss,
                "w1_to_data": distance_to_data(cell, result.samples, reference),
            }
            if dataset.centers is not None:
                masses = cluster_masses(result.samples, dataset.centers)
                row["min_cluster_mass"] = float(masses.min())
            rows.append(row)
            logger.info("L=%g alpha=%g: W1 %.4f", L, alpha, row["w1_to_data"])
    write_csv(pd.DataFrame(rows), Path(run.out_dir) / "ablate.csv", stamp)
    return 0


COMMAND_TABLE: Dict[str, Callable] = {
    "verify": cmd_verify,
    "train": cmd_train,
    "sample": cmd_sample,
    "nll": cmd_nll,
    "compare": cmd_compare,
    "evolve": cmd_evolve,
    "ablate": cmd_ablate,
}
