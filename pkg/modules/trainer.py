"""
HOLD Trainer Module
===================
Optimization loop for the score network: Adam with linear warmup, EMA of
the parameters, optional global-norm clipping, periodic checkpoints and a
CSV training log (``iter,loss,lr,wall_ms``).

Runs on a single optimization thread. With a fixed seed the checkpoints and
the iter, loss and lr columns of the log are bit-identical across runs;
wall_ms is the only column that varies.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from modules.data_loader import Dataset
from modules.errors import CheckpointError, TrainingDiverged
from modules.hold_config import RunConfig, TrainConfig
from modules.objective import (
    MinibatchResult,
    draw_bcsm_batch,
    draw_dsm_batch,
    network_loss,
    sample_initial_phase,
)
from modules.scorenet import Checkpoint, init_params, save_checkpoint

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_COLUMNS = ["iter", "loss", "lr", "wall_ms"]
FINAL_CHECKPOINT = "final.ckpt"


# =============================================================================
# OPTIMIZER PIECES
# =============================================================================
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), step=0)


def adam_update(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> np.ndarray:
    """
    One bias-corrected Adam step (no weight decay). Updates ``state`` in place.

    Returns:
        New parameter array
    """
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def learning_rate(cfg: TrainConfig, k: int) -> float:
    """lr * k / warmup for k < warmup, then the base rate."""
    if cfg.warmup_iters > 0 and k < cfg.warmup_iters:
        return cfg.lr * k / cfg.warmup_iters
    return cfg.lr


def ema_update(ema: np.ndarray, params: np.ndarray, decay: float) -> np.ndarray:
    return decay * ema + (1.0 - decay) * params


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# =============================================================================
# TRAINING LOOP
# =============================================================================
@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    final_loss: float
    n_iters: int


def _minibatch(run: RunConfig, dataset: Dataset, theta: np.ndarray, rng: np.random.Generator) -> MinibatchResult:
    q0 = dataset.sample(run.train.batch_size, rng)
    if run.train.loss_kind == "dsm":
        batch = draw_dsm_batch(run.kernel, sample_initial_phase(run.kernel, q0, rng), rng)
    else:
        batch = draw_bcsm_batch(run.kernel, q0, rng)
    return network_loss(run.net, theta, batch, run.kernel.T)


def _dump_batch(path: Path, result: MinibatchResult) -> Path:
    batch = result.batch
    frame = pd.DataFrame({"t": batch.t, "ell": batch.ell, "loss": result.per_element})
    for j in range(batch.x_t.d):
        frame[f"q_t_{j}"] = batch.x_t.q[:, j]
        frame[f"p_t_{j}"] = batch.x_t.p[:, j]
        frame[f"s_t_{j}"] = batch.x_t.s[:, j]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def _append_log(path: Path, rows: list, header: bool) -> None:
    try:
        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(path, mode="w" if header else "a", header=header, index=False)
    except OSError as exc:
        raise CheckpointError(str(path), f"cannot write training log: {exc}") from exc


def train(
    run: RunConfig,
    dataset: Dataset,
    out_dir: Optional[Path] = None,
    progress: bool = True,
) -> TrainResult:
    """
    Train a score network and write checkpoints under ``out_dir``.

    Args:
        run: Validated run configuration
        dataset: Source of q0 batches
        out_dir: Output directory (defaults to run.out_dir)
        progress: Show a tqdm progress bar

    Returns:
        TrainResult pointing at the final checkpoint and the CSV log

    Raises:
        TrainingDiverged: non-finite loss (the batch is dumped to nan_batch.csv)
        CheckpointError: checkpoint or log not writable
    """
    cfg = run.train
    out_dir = Path(out_dir or run.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    log_path = out_dir / "train_log.csv"
    config_hash = run.hash
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(run.seed)
    theta = init_params(run.net, rng).values
    ema = theta.copy()
    adam = AdamState.zeros_like(theta)

    def checkpoint(step: int, name: str) -> Path:
        ckpt = Checkpoint(
            spec=run.net,
            params=theta,
            ema=ema,
            step=step,
            config_hash=config_hash,
            rng_state=rng.bit_generator.state,
            horizon=run.kernel.T,
            extra={"kernel": asdict(run.kernel), "dataset": run.data.name, "loss_kind": cfg.loss_kind},
        )
        return save_checkpoint(ckpt_dir / name, ckpt)

    logger.info(
        "training %s on %s: %d iters, batch %d, lr %.2e (warmup %d), config %s",
        cfg.loss_kind, dataset.name, cfg.n_iters, cfg.batch_size, cfg.lr, cfg.warmup_iters, config_hash,
    )
    _append_log(log_path, [], header=True)
    started = time.perf_counter()
    window: list = []
    smoothed = math.nan

    for k in tqdm(range(1, cfg.n_iters + 1), desc="train", disable=not progress, leave=False):
        result = _minibatch(run, dataset, theta, rng)
        if not np.isfinite(result.loss) or not np.all(np.isfinite(result.grad)):
            dump = _dump_batch(ckpt_dir / "nan_batch.csv", result)
            logger.error("non-finite loss at iteration %d", k)
            raise TrainingDiverged(k, str(dump))

        lr_k = learning_rate(cfg, k)
        theta = adam_update(theta, clip_by_global_norm(result.grad, cfg.grad_clip), adam, lr_k)
        ema = ema_update(ema, theta, cfg.ema_decay)
        window.append(result.loss)

        if k % cfg.log_every == 0 or k == cfg.n_iters:
            smoothed = float(np.mean(window))
            wall_ms = int(round(1000.0 * (time.perf_counter() - started)))
            _append_log(log_path, [[k, smoothed, lr_k, wall_ms]], header=False)
            logger.debug("iter %d loss %.5f lr %.3e", k, smoothed, lr_k)
            window = []
        if k % cfg.checkpoint_every == 0 and k != cfg.n_iters:
            checkpoint(k, f"step_{k:07d}.ckpt")

    final = checkpoint(cfg.n_iters, FINAL_CHECKPOINT)
    logger.info("training finished: loss %.5f, checkpoint %s", smoothed, final)
    return TrainResult(checkpoint=final, log_path=log_path, final_loss=smoothed, n_iters=cfg.n_iters)
